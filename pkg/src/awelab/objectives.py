"""Training objectives on top of an acoustic encoder.

* phone n-gram detection: multi-label sigmoid head, binary cross-entropy
  summed over n-grams and averaged over the batch;
* word-to-phones: a GRU decoder initialized from the embedding, trained
  with teacher forcing, categorical cross-entropy summed over steps
  (including the end symbol) and averaged over the batch;
* siamese triplet: hinge on cosine distances with in-batch negatives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .encoders import orthogonal_gates

BOS, EOS = "<bos>", "<eos>"
SAMPLING = ("random", "semi_hard", "semi_hard_band")


class DegenerateInputError(ValueError):
    pass


class SamplingError(ValueError):
    pass


# --- phone n-gram detection ----------------------------------------------

class DetectHead:
    def __init__(self, in_dim: int, n_outputs: int, rng: np.random.Generator):
        dtype = ad.get_default_dtype()
        bound = 1.0 / np.sqrt(in_dim)
        self.params = {
            "detect.weight": ad.parameter(rng.uniform(-bound, bound, (in_dim, n_outputs)).astype(dtype)),
            "detect.bias": ad.parameter(np.zeros(n_outputs, dtype=dtype)),
        }

    @property
    def n_outputs(self) -> int:
        return self.params["detect.bias"].shape[0]

    def logits(self, x: Tensor) -> Tensor:
        return ad.add_bias(ad.matmul(x, self.params["detect.weight"]), self.params["detect.bias"])


def detect_loss(x: Tensor, y: np.ndarray, head: DetectHead) -> Tensor:
    """Binary cross-entropy from logits: sum_i softplus(z_i) - y_i z_i."""
    y = np.asarray(y)
    if y.ndim == 1:
        y = y[None, :]
    if y.shape != (x.shape[0], head.n_outputs):
        raise ShapeError(f"detect_loss: targets {y.shape} vs batch {x.shape[0]} x {head.n_outputs} n-grams")
    z = head.logits(x)
    per = ad.sub(ad.softplus(z), ad.mul_const(z, y))
    return ad.mul_scalar(ad.tsum(per), 1.0 / x.shape[0])


# --- word-to-phones --------------------------------------------------------

class PhoneDecoder:
    """Single-layer GRU decoding a phone string from an embedding."""

    def __init__(self, phones: Sequence[str], in_dim: int, rng: np.random.Generator,
                 hidden: int = 512, emb_dim: int = 64):
        dtype = ad.get_default_dtype()
        self.symbols = [BOS, EOS] + sorted(set(phones))
        self.index = {s: i for i, s in enumerate(self.symbols)}
        V, H = len(self.symbols), hidden
        b_in, b_h = 1.0 / np.sqrt(in_dim), 1.0 / np.sqrt(H)
        self.params = {
            "decoder.embedding": ad.parameter(rng.standard_normal((V, emb_dim)).astype(dtype)),
            "decoder.init.weight": ad.parameter(rng.uniform(-b_in, b_in, (in_dim, H)).astype(dtype)),
            "decoder.init.bias": ad.parameter(np.zeros(H, dtype=dtype)),
            "decoder.w_in": ad.parameter(rng.uniform(-b_h, b_h, (emb_dim, 3 * H)).astype(dtype)),
            "decoder.b_in": ad.parameter(np.zeros(3 * H, dtype=dtype)),
            "decoder.w_rec": ad.parameter(orthogonal_gates(rng, H, 3, dtype)),
            "decoder.b_rec": ad.parameter(np.zeros(3 * H, dtype=dtype)),
            "decoder.out.weight": ad.parameter(rng.uniform(-b_h, b_h, (H, V)).astype(dtype)),
            "decoder.out.bias": ad.parameter(np.zeros(V, dtype=dtype)),
        }

    @property
    def vocab_size(self) -> int:
        return len(self.symbols)

    def encode(self, phones: Sequence[str]) -> list[int]:
        try:
            return [self.index[p] for p in phones]
        except KeyError as e:
            raise KeyError(f"objectives: phone {e.args[0]!r} not in decoder vocabulary") from None

    def initial_state(self, x: Tensor) -> Tensor:
        p = self.params
        return ad.tanh(ad.add_bias(ad.matmul(x, p["decoder.init.weight"]), p["decoder.init.bias"]))

    def step_logits(self, x: Tensor, inputs: np.ndarray, lengths) -> Tensor:
        """Teacher-forced logits, shape (B, T, V), for input ids (B, T)."""
        p = self.params
        emb = ad.getitem(p["decoder.embedding"], inputs)
        xp = ad.add_bias(ad.matmul(emb, p["decoder.w_in"]), p["decoder.b_in"])
        hs = ad.gru_layer(xp, p["decoder.w_rec"], p["decoder.b_rec"], lengths, h0=self.initial_state(x))
        return ad.add_bias(ad.matmul(hs, p["decoder.out.weight"]), p["decoder.out.bias"])

    def greedy_decode(self, x: np.ndarray, max_len: int = 20) -> list[str]:
        """Most likely phone string for one embedding; inspection only."""
        xt = Tensor(np.asarray(x, dtype=ad.get_default_dtype())[None, :])
        out: list[int] = []
        for _ in range(max_len):
            ids = np.array([[self.index[BOS]] + out])
            logits = self.step_logits(xt, ids, [ids.shape[1]]).data[0, -1].copy()
            logits[self.index[BOS]] = -np.inf
            nxt = int(logits.argmax())
            if nxt == self.index[EOS]:
                break
            out.append(nxt)
        return [self.symbols[i] for i in out]


def teacher_forcing_batch(decoder: PhoneDecoder, sequences: Sequence[Sequence[str]]):
    """Input ids (BOS + phones), target ids (phones + EOS) and lengths, right-padded."""
    encoded = [decoder.encode(s) for s in sequences]
    if any(not e for e in encoded):
        raise ValueError("word2phones: empty phone sequence")
    lengths = np.array([len(e) + 1 for e in encoded])
    T = int(lengths.max())
    inputs = np.full((len(encoded), T), decoder.index[EOS], dtype=np.intp)
    targets = np.full((len(encoded), T), decoder.index[EOS], dtype=np.intp)
    for i, e in enumerate(encoded):
        inputs[i, :len(e) + 1] = [decoder.index[BOS]] + e
        targets[i, :len(e)] = e
    return inputs, targets, lengths


def word2phones_loss(x: Tensor, phones: Sequence[Sequence[str]], decoder: PhoneDecoder) -> Tensor:
    """-sum_t log P(phi_t | phi_<t, x) over phones and the end symbol, mean over batch."""
    if phones and isinstance(phones[0], str):
        phones = [phones]
    if len(phones) != x.shape[0]:
        raise ShapeError(f"word2phones_loss: {len(phones)} sequences for batch of {x.shape[0]}")
    inputs, targets, lengths = teacher_forcing_batch(decoder, phones)
    logp = ad.log_softmax(decoder.step_logits(x, inputs, lengths))
    b_idx, t_idx = np.nonzero(np.arange(inputs.shape[1])[None, :] < lengths[:, None])
    gold = ad.getitem(logp, (b_idx, t_idx, targets[b_idx, t_idx]))
    return ad.mul_scalar(ad.tsum(gold), -1.0 / x.shape[0])


# --- siamese triplet -------------------------------------------------------

@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.4
    sampling: str = "semi_hard"
    scaled_distance: bool = True
    symmetric: bool = True

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be > 0")
        if self.sampling not in SAMPLING:
            raise ValueError(f"sampling must be one of {SAMPLING}")


def cosine_distance(cos, scaled: bool = True):
    """(1 - cos) / 2 in [0, 1] when scaled, else 1 - cos."""
    return (1.0 - cos) * 0.5 if scaled else 1.0 - cos


def _cos_dist_tensor(a: Tensor, b: Tensor, scaled: bool) -> Tensor:
    try:
        cos = ad.cosine_similarity(a, b)
    except ValueError:
        raise DegenerateInputError("triplet_loss: zero-norm embedding") from None
    return ad.mul_scalar(ad.add_scalar(ad.mul_scalar(cos, -1.0), 1.0), 0.5 if scaled else 1.0)


def triplet_loss(x_a: Tensor, x_pos: Tensor, x_neg: Tensor, margin: float = 0.4,
                 scaled: bool = True) -> Tensor:
    """mean over rows of max(0, margin + d(a, pos) - d(a, neg))."""
    if x_a.ndim == 1:
        x_a, x_pos, x_neg = (ad.reshape(t, (1, -1)) for t in (x_a, x_pos, x_neg))
    d_ap = _cos_dist_tensor(x_a, x_pos, scaled)
    d_an = _cos_dist_tensor(x_a, x_neg, scaled)
    hinge = ad.relu(ad.add_scalar(ad.sub(d_ap, d_an), margin))
    return ad.mul_scalar(ad.tsum(hinge), 1.0 / x_a.shape[0])


def cosine_distance_matrix(emb: np.ndarray, scaled: bool = True) -> np.ndarray:
    e = np.asarray(emb, dtype=np.float64)
    norms = np.linalg.norm(e, axis=1)
    if (norms == 0).any():
        raise DegenerateInputError("zero-norm embedding in batch")
    e = e / norms[:, None]
    return cosine_distance(e @ e.T, scaled)


def sample_negative(batch, anchor_index: int, strategy: str = "semi_hard",
                    rng: np.random.Generator | None = None, positive_index: int | None = None,
                    margin: float = 0.4, scaled: bool = True) -> int:
    """Choose an in-batch negative for one anchor.

    ``batch`` is a sequence of (embedding, word_type). ``semi_hard`` returns
    the different-type item closest to the anchor (lowest index on ties);
    ``semi_hard_band`` prefers the closest negative that is farther than
    the positive but within the margin, falling back to ``semi_hard``.
    """
    types = [t for _, t in batch]
    cand = [i for i, t in enumerate(types) if t != types[anchor_index]]
    if not cand:
        raise SamplingError(f"no negative of a different word type for anchor {anchor_index}")
    if strategy == "random":
        if rng is None:
            raise ValueError("random negative sampling needs a generator")
        return cand[int(rng.integers(len(cand)))]
    a = np.asarray(batch[anchor_index][0], dtype=np.float64)
    dists = np.array([cosine_distance(_cos(a, batch[i][0]), scaled) for i in cand])
    if strategy == "semi_hard_band":
        if positive_index is None:
            raise ValueError("semi_hard_band needs the positive index")
        d_ap = cosine_distance(_cos(a, batch[positive_index][0]), scaled)
        band = (dists > d_ap) & (dists < d_ap + margin)
        if band.any():
            return cand[int(np.flatnonzero(band)[dists[band].argmin()])]
    elif strategy != "semi_hard":
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    return cand[int(dists.argmin())]


def _cos(a, b):
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("zero-norm embedding in batch")
    return float(a @ b / (na * nb))


def select_negatives(emb: np.ndarray, types: Sequence, anchors: Sequence[int], positives: Sequence[int],
                     strategy: str, rng: np.random.Generator | None = None,
                     margin: float = 0.4, scaled: bool = True) -> np.ndarray:
    """Vectorized ``sample_negative`` for many anchors over one pool."""
    types = np.asarray(types)
    anchors = np.asarray(anchors)
    valid = types[None, :] != types[anchors][:, None]
    if not valid.any(axis=1).all():
        raise SamplingError("an anchor has no negative of a different word type")
    if strategy == "random":
        out = np.empty(len(anchors), dtype=np.intp)
        for k, row in enumerate(valid):
            cand = np.flatnonzero(row)
            out[k] = cand[int(rng.integers(len(cand)))]
        return out
    D = cosine_distance_matrix(emb, scaled)[anchors]
    masked = np.where(valid, D, np.inf)
    hardest = masked.argmin(axis=1)
    if strategy == "semi_hard":
        return hardest
    if strategy != "semi_hard_band":
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    d_ap = D[np.arange(len(anchors)), np.asarray(positives)]
    band = valid & (D > d_ap[:, None]) & (D < d_ap[:, None] + margin)
    banded = np.where(band, D, np.inf).argmin(axis=1)
    return np.where(band.any(axis=1), banded, hardest)


class DegenerateCorpusError(ValueError):
    pass


def build_triplet_batch(segments, batch_size: int, rng: np.random.Generator):
    """Sample (anchor, positive) pairs of the same word type.

    Anchors are drawn uniformly over segments whose type has at least two
    segments, so types appear in proportion to their segment counts. The
    batch always spans at least two word types.
    """
    by_type: dict[str, list[int]] = {}
    for i, s in enumerate(segments):
        by_type.setdefault(s.word_type, []).append(i)
    eligible_types = [t for t, idx in by_type.items() if len(idx) >= 2]
    if len(eligible_types) < 2:
        raise DegenerateCorpusError("need at least 2 word types with at least 2 segments each")
    eligible = [i for t in sorted(eligible_types) for i in by_type[t]]
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    anchors = [eligible[int(k)] for k in rng.integers(len(eligible), size=batch_size)]
    if len({segments[a].word_type for a in anchors}) < 2:
        first = segments[anchors[0]].word_type
        others = [i for i in eligible if segments[i].word_type != first]
        anchors[-1] = others[int(rng.integers(len(others)))]
    pairs = []
    for a in anchors:
        same = [i for i in by_type[segments[a].word_type] if i != a]
        pairs.append((segments[a], segments[same[int(rng.integers(len(same)))]]))
    return pairs
