"""Acoustic encoders mapping a (T, 39) frame matrix to a fixed-size embedding.

Two architectures are provided:

* ``cnn``: stacked conv -> batch norm -> ReLU -> dropout blocks followed by
  a global average over the remaining time steps.
* ``bgru``: stacked bidirectional GRUs; the embedding is the final forward
  state concatenated with the final backward state of the top layer.

Training runs batched and right-padded with per-row masking. Eval-mode
embedding runs one segment at a time, so a segment's embedding never
depends on what else is in the batch.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .corpus import N_MFSC

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "bgru"
    input_dim: int = N_MFSC
    cnn_filters: tuple[int, ...] = (256, 512, 1024)
    cnn_widths: tuple[int, ...] = (16, 32, 48)
    dropout: float = 0.2
    bgru_layers: int = 2
    bgru_hidden: int = 512
    bgru_readout: str = "last"

    def __post_init__(self):
        if self.kind not in ("cnn", "bgru"):
            raise ValueError(f"encoder kind must be cnn or bgru, got {self.kind!r}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if len(self.cnn_filters) != len(self.cnn_widths) or not self.cnn_filters:
            raise ValueError("cnn_filters and cnn_widths must be nonempty and the same length")
        if self.bgru_readout not in ("last", "mean"):
            raise ValueError("bgru_readout must be 'last' or 'mean'")
        if self.bgru_layers < 1 or self.bgru_hidden < 1:
            raise ValueError("bgru needs at least one layer and one hidden unit")

    @property
    def embed_dim(self) -> int:
        return self.cnn_filters[-1] if self.kind == "cnn" else 2 * self.bgru_hidden

    def to_dict(self):
        d = asdict(self)
        d["cnn_filters"] = list(self.cnn_filters)
        d["cnn_widths"] = list(self.cnn_widths)
        return d

    @classmethod
    def from_dict(cls, d: Mapping):
        d = dict(d)
        for k in ("cnn_filters", "cnn_widths"):
            if k in d:
                d[k] = tuple(d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**d)


def kaiming_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def orthogonal_gates(rng, hidden, n_gates, dtype):
    """Recurrent matrix of ``n_gates`` independent orthogonal (H, H) blocks."""
    blocks = []
    for _ in range(n_gates):
        q, r = np.linalg.qr(rng.standard_normal((hidden, hidden)))
        blocks.append(q * np.sign(np.diag(r)))
    return np.concatenate(blocks, axis=1).astype(dtype)


def pad_frames(frames: Sequence[np.ndarray], dtype=None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad a list of (T_i, D) matrices into (B, max T, D) plus lengths."""
    if not frames:
        raise ValueError("empty batch")
    dtype = dtype or ad.get_default_dtype()
    lengths = np.array([f.shape[0] for f in frames])
    D = frames[0].shape[1]
    out = np.zeros((len(frames), lengths.max(), D), dtype=dtype)
    for i, f in enumerate(frames):
        out[i, :f.shape[0]] = f
    return out, lengths


class AcousticEncoder:
    """Base class: named parameters plus non-trainable buffers."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    def forward(self, frames: Sequence[np.ndarray], train: bool, rng=None) -> Tensor:
        raise NotImplementedError

    def _check_frames(self, frames):
        for f in frames:
            if f.ndim != 2 or f.shape[1] != self.config.input_dim or f.shape[0] < 1:
                raise ShapeError(f"encoder: expected (T>=1, {self.config.input_dim}) frames, got {f.shape}")

    def embed(self, frames: np.ndarray, mode: str = "eval", rng=None) -> np.ndarray:
        return self.embed_batch([frames], mode, rng)[0]

    def embed_batch(self, segments, mode: str = "eval", rng=None) -> np.ndarray:
        """Embed a list of segments (or raw frame matrices) into an (N, D) array."""
        frames = [getattr(s, "frames", s) for s in segments]
        if not frames:
            raise ValueError("embed_batch: empty batch")
        if mode == "train":
            return self.forward(frames, True, rng).data.copy()
        if mode != "eval":
            raise ValueError(f"mode must be train or eval, got {mode!r}")
        return np.stack([self.forward([f], False).data[0] for f in frames])


class CnnEncoder(AcousticEncoder):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        super().__init__(config)
        dtype = ad.get_default_dtype()
        c_in = config.input_dim
        for i, (f, k) in enumerate(zip(config.cnn_filters, config.cnn_widths)):
            self.params[f"conv{i}.weight"] = ad.parameter(kaiming_uniform(rng, (k, c_in, f), k * c_in, dtype))
            self.params[f"conv{i}.bias"] = ad.parameter(np.zeros(f, dtype=dtype))
            self.params[f"bn{i}.gamma"] = ad.parameter(np.ones(f, dtype=dtype))
            self.params[f"bn{i}.beta"] = ad.parameter(np.zeros(f, dtype=dtype))
            self.buffers[f"bn{i}.running_mean"] = np.zeros(f, dtype=dtype)
            self.buffers[f"bn{i}.running_var"] = np.ones(f, dtype=dtype)
            c_in = f

    def forward(self, frames, train, rng=None):
        self._check_frames(frames)
        x_np, lengths = pad_frames(frames)
        x = Tensor(x_np)
        cfg = self.config
        padded = int((lengths < cfg.cnn_widths[0]).sum())
        if padded and train:
            log.debug("cnn: %d of %d segments shorter than the first kernel (%d frames), left-padded",
                      padded, len(frames), cfg.cnn_widths[0])
        for i, k in enumerate(cfg.cnn_widths):
            new_len = np.maximum(lengths, k)
            x = ad.place_in_time(x, lengths, new_len - lengths, int(new_len.max()))
            x = ad.conv1d(x, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"])
            lengths = new_len - k + 1
            mask = np.arange(x.shape[1])[None, :] < lengths[:, None]
            x = ad.batch_norm(x, self.params[f"bn{i}.gamma"], self.params[f"bn{i}.beta"],
                              self.buffers[f"bn{i}.running_mean"], self.buffers[f"bn{i}.running_var"],
                              train, mask)
            x = ad.relu(x)
            x = ad.dropout(x, cfg.dropout, rng, train)
        return ad.mean_over_time(x, lengths)


class BgruEncoder(AcousticEncoder):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        super().__init__(config)
        dtype = ad.get_default_dtype()
        H = config.bgru_hidden
        c_in = config.input_dim
        bound = 1.0 / np.sqrt(H)
        for layer in range(config.bgru_layers):
            for d in ("fwd", "bwd"):
                p = f"gru{layer}.{d}"
                self.params[f"{p}.w_in"] = ad.parameter(rng.uniform(-bound, bound, (c_in, 3 * H)).astype(dtype))
                self.params[f"{p}.b_in"] = ad.parameter(np.zeros(3 * H, dtype=dtype))
                self.params[f"{p}.w_rec"] = ad.parameter(orthogonal_gates(rng, H, 3, dtype))
                self.params[f"{p}.b_rec"] = ad.parameter(np.zeros(3 * H, dtype=dtype))
            c_in = 2 * H

    def forward(self, frames, train, rng=None):
        self._check_frames(frames)
        x_np, lengths = pad_frames(frames)
        x = Tensor(x_np)
        cfg = self.config
        B = len(frames)
        rows = np.arange(B)
        for layer in range(cfg.bgru_layers):
            if layer > 0:
                x = ad.dropout(x, cfg.dropout, rng, train)
            outs = []
            for d in ("fwd", "bwd"):
                p = f"gru{layer}.{d}"
                xp = ad.add_bias(ad.matmul(x, self.params[f"{p}.w_in"]), self.params[f"{p}.b_in"])
                outs.append(ad.gru_layer(xp, self.params[f"{p}.w_rec"], self.params[f"{p}.b_rec"],
                                         lengths, reverse=(d == "bwd")))
            if layer == cfg.bgru_layers - 1:
                if cfg.bgru_readout == "mean":
                    return ad.mean_over_time(ad.concat(outs, axis=2), lengths)
                last_fwd = ad.getitem(outs[0], (rows, lengths - 1))
                first_bwd = ad.getitem(outs[1], (rows, np.zeros(B, dtype=np.intp)))
                return ad.concat([last_fwd, first_bwd], axis=1)
            x = ad.concat(outs, axis=2)


def build_encoder(config: EncoderConfig, rng: np.random.Generator) -> AcousticEncoder:
    if config.kind == "cnn":
        return CnnEncoder(config, rng)
    return BgruEncoder(config, rng)


def embed(encoder: AcousticEncoder, frames: np.ndarray, mode: str = "eval", rng=None) -> np.ndarray:
    return encoder.embed(frames, mode, rng)


def embed_batch(encoder: AcousticEncoder, segments, mode: str = "eval", rng=None) -> np.ndarray:
    return encoder.embed_batch(segments, mode, rng)
