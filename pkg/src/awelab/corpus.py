"""Word-segment corpora: MFSC features, manifest I/O, synthetic data and
phone n-gram targets."""

from __future__ import annotations

import csv
import logging
import struct
import wave
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .phonology import FeatureTable

log = logging.getLogger(__name__)

N_MFSC = 39
BOUNDARY = "#"
MANIFEST_COLUMNS = ("segment_id", "split", "word_type", "phones", "speaker_id",
                    "source", "path", "start_s", "end_s")
SPLITS = ("train", "valid", "test")


class CorpusError(ValueError):
    pass


class TooShortError(CorpusError):
    pass


@dataclass
class WordSegment:
    segment_id: str
    word_type: str
    phones: tuple[str, ...]
    frames: np.ndarray
    speaker_id: str
    duration_s: float

    def __post_init__(self):
        self.phones = tuple(self.phones)
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if not self.phones:
            raise CorpusError(f"{self.segment_id}: empty phone sequence")
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] != N_MFSC:
            raise CorpusError(f"{self.segment_id}: frames must be T x {N_MFSC}, got {self.frames.shape}")
        if not self.duration_s > 0:
            raise CorpusError(f"{self.segment_id}: duration must be positive")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class CorpusSplit:
    train: list[WordSegment]
    valid: list[WordSegment]
    test: list[WordSegment]
    vocabulary: dict[str, tuple[str, ...]]

    def __post_init__(self):
        seen = set()
        for seg in self.all_segments():
            if seg.segment_id in seen:
                raise CorpusError(f"duplicate segment_id {seg.segment_id!r}")
            seen.add(seg.segment_id)
            if seg.word_type not in self.vocabulary:
                raise CorpusError(f"{seg.segment_id}: word type {seg.word_type!r} not in vocabulary")

    def split(self, name: str) -> list[WordSegment]:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def all_segments(self) -> Iterable[WordSegment]:
        for name in SPLITS:
            yield from getattr(self, name)


# --- MFSC ------------------------------------------------------------------

@dataclass(frozen=True)
class MfscConfig:
    sample_rate_hz: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = N_MFSC
    log_floor: float = 1e-10
    fmin_hz: float = 0.0
    fmax_hz: float | None = None

    def __post_init__(self):
        if not self.window_ms > self.hop_ms > 0:
            raise ValueError("need window_ms > hop_ms > 0")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")

    @property
    def window_len(self) -> int:
        return int(round(self.sample_rate_hz * self.window_ms / 1000))

    @property
    def hop_len(self) -> int:
        return int(round(self.sample_rate_hz * self.hop_ms / 1000))

    @property
    def n_fft(self) -> int:
        return 1 << (self.window_len - 1).bit_length()


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_centers(cfg: MfscConfig) -> np.ndarray:
    fmax = cfg.fmax_hz or cfg.sample_rate_hz / 2
    mels = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(fmax), cfg.n_mels + 2)
    return mel_to_hz(mels)[1:-1]


def mel_filterbank(cfg: MfscConfig) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape (n_mels, n_fft//2 + 1)."""
    fmax = cfg.fmax_hz or cfg.sample_rate_hz / 2
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(fmax), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate_hz / cfg.n_fft
    fb = np.zeros((cfg.n_mels, freqs.size))
    for i in range(cfg.n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[i] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def frame_signal(pcm: np.ndarray, cfg: MfscConfig) -> np.ndarray:
    win, hop = cfg.window_len, cfg.hop_len
    if pcm.shape[0] < win:
        raise TooShortError(f"waveform of {pcm.shape[0]} samples is shorter than one {win}-sample window")
    n = (pcm.shape[0] - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return pcm[idx]


def power_spectrum(frames: np.ndarray, cfg: MfscConfig) -> np.ndarray:
    windowed = frames * np.hamming(cfg.window_len)
    return np.abs(np.fft.rfft(windowed, n=cfg.n_fft, axis=1)) ** 2


def extract_mfsc(pcm, cfg: MfscConfig = MfscConfig()) -> np.ndarray:
    """Log mel filterbank energies, one row per 25 ms frame (no DCT)."""
    pcm = np.asarray(pcm, dtype=np.float64)
    if pcm.ndim != 1:
        raise CorpusError(f"expected a mono waveform, got shape {pcm.shape}")
    spec = power_spectrum(frame_signal(pcm, cfg), cfg)
    energies = spec @ mel_filterbank(cfg).T
    return np.log(energies + cfg.log_floor).astype(np.float32)


# --- binary features and audio ---------------------------------------------

def write_features(path, frames: np.ndarray) -> None:
    """Raw little-endian float32 matrix preceded by ``T, D`` as two uint32."""
    frames = np.ascontiguousarray(frames, dtype="<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<II", *frames.shape))
        f.write(frames.tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise CorpusError(f"{path}: truncated feature header")
    t, d = struct.unpack("<II", raw[:8])
    if len(raw) != 8 + 4 * t * d:
        raise CorpusError(f"{path}: expected {t}x{d} floats, file holds {(len(raw) - 8) // 4}")
    return np.frombuffer(raw, dtype="<f4", offset=8).reshape(t, d).astype(np.float32)


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise CorpusError(f"{path}: only 16-bit mono PCM WAV is supported")
        rate = w.getframerate()
        pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2").astype(np.float64) / 32768.0
    return pcm, rate


def write_wav(path, pcm: np.ndarray, rate: int) -> None:
    data = np.clip(np.round(np.asarray(pcm) * 32767), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(data.tobytes())


# --- manifests -------------------------------------------------------------

def load_manifest(path, table: FeatureTable | None = None, mfsc: MfscConfig | None = None) -> CorpusSplit:
    """Read a TSV manifest; relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    splits = {s: [] for s in SPLITS}
    vocab: dict[str, tuple[str, ...]] = {}
    seen = set()
    with path.open(encoding="utf-8", newline="") as f:
        reader = csv.reader(f, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_COLUMNS:
            raise CorpusError(f"{path}: header must be {'/'.join(MANIFEST_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            sid = row[0] if row else "?"
            if len(row) != len(MANIFEST_COLUMNS):
                raise CorpusError(f"{path}:{lineno}: segment {sid}: expected {len(MANIFEST_COLUMNS)} columns")
            rec = dict(zip(MANIFEST_COLUMNS, row))
            if sid in seen:
                raise CorpusError(f"{path}:{lineno}: duplicate segment_id {sid!r}")
            seen.add(sid)
            if rec["split"] not in splits:
                raise CorpusError(f"{path}:{lineno}: segment {sid}: unknown split {rec['split']!r}")
            phones = tuple(rec["phones"].split())
            if not phones:
                raise CorpusError(f"{path}:{lineno}: segment {sid}: no phones")
            if table is not None:
                for p in phones:
                    if p not in table:
                        raise CorpusError(f"{path}:{lineno}: segment {sid}: phone {p!r} not in feature table")
            try:
                start, end = float(rec["start_s"]), float(rec["end_s"])
            except ValueError:
                raise CorpusError(f"{path}:{lineno}: segment {sid}: bad start/end times") from None
            src = base / rec["path"]
            if not src.exists():
                raise CorpusError(f"segment {sid}: missing file {src}")
            if rec["source"] == "feats":
                frames = read_features(src)
            elif rec["source"] == "audio":
                pcm, rate = read_wav(src)
                cfg = mfsc or MfscConfig(sample_rate_hz=rate)
                if cfg.sample_rate_hz != rate:
                    raise CorpusError(f"segment {sid}: {src} has rate {rate}, config expects {cfg.sample_rate_hz}")
                frames = extract_mfsc(pcm[int(round(start * rate)):int(round(end * rate))], cfg)
            else:
                raise CorpusError(f"{path}:{lineno}: segment {sid}: source must be audio or feats")
            known = vocab.setdefault(rec["word_type"], phones)
            if known != phones:
                raise CorpusError(f"segment {sid}: word type {rec['word_type']!r} has conflicting phones")
            splits[rec["split"]].append(WordSegment(sid, rec["word_type"], phones, frames,
                                                    rec["speaker_id"], end - start))
    return CorpusSplit(splits["train"], splits["valid"], splits["test"], vocab)


def write_manifest(corpus: CorpusSplit, out_dir) -> Path:
    """Write every segment as a feature file plus a manifest referencing it."""
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.tsv"
    with manifest.open("w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for name in SPLITS:
            for seg in corpus.split(name):
                rel = f"feats/{seg.segment_id}.feats"
                write_features(out / rel, seg.frames)
                w.writerow([seg.segment_id, name, seg.word_type, " ".join(seg.phones), seg.speaker_id,
                            "feats", rel, "0", repr(seg.duration_s)])
    return manifest


# --- synthetic corpora -----------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic corpus generator.

    Word types are random phone strings; with probability ``derive_prob`` a
    new type is made from an earlier one by one or two phone edits, so the
    vocabulary contains phonological neighbourhoods. Phone prototypes mix a
    random projection of the phone's feature vector (weight
    ``feature_coupling``) with a phone-specific random vector.
    """

    n_word_types: int = 20
    n_speakers: int = 5
    segments_per_type: int = 20
    phone_proto_dim: int = N_MFSC
    noise_std: float = 0.5
    speaker_shift_std: float = 0.5
    duration_jitter: float = 0.25
    seed: int = 0
    min_phones: int = 4
    max_phones: int = 9
    min_frames_per_phone: int = 3
    max_frames_per_phone: int = 8
    derive_prob: float = 0.5
    feature_coupling: float = 0.7
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    frame_shift_s: float = 0.01

    def __post_init__(self):
        for name in ("n_word_types", "n_speakers", "segments_per_type", "min_phones",
                     "min_frames_per_phone"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("noise_std", "speaker_shift_std", "duration_jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.phone_proto_dim != N_MFSC:
            raise ValueError(f"phone_proto_dim must be {N_MFSC}")

    def to_dict(self):
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_dict(cls, d: Mapping):
        d = dict(d)
        if "split_fractions" in d:
            d["split_fractions"] = tuple(d["split_fractions"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


def _segment_rng(seed: int, segment_id: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, zlib.crc32(segment_id.encode())])))


def phone_prototypes(scfg: SynthConfig, table: FeatureTable, rng: np.random.Generator) -> np.ndarray:
    """One prototype frame per phone in ``table``, shape (n_phones, 39)."""
    proj = rng.standard_normal((table.n_features, scfg.phone_proto_dim)) / np.sqrt(table.n_features)
    feat = table.values.astype(np.float64) @ proj
    feat /= feat.std()
    own = rng.standard_normal((len(table), scfg.phone_proto_dim))
    a = scfg.feature_coupling
    return a * feat + np.sqrt(1 - a * a) * own


def _random_word(rng, symbols, lo, hi):
    return tuple(rng.choice(symbols, size=int(rng.integers(lo, hi + 1))))


def _derive_word(rng, parent, symbols, lo, hi):
    w = list(parent)
    for _ in range(int(rng.integers(1, 3))):
        op = rng.integers(3)
        if op == 0 or (op == 1 and len(w) >= hi) or (op == 2 and len(w) <= lo):
            w[int(rng.integers(len(w)))] = str(rng.choice(symbols))
        elif op == 1:
            w.insert(int(rng.integers(len(w) + 1)), str(rng.choice(symbols)))
        else:
            del w[int(rng.integers(len(w)))]
    return tuple(w)


def synthesize_corpus(scfg: SynthConfig, table: FeatureTable) -> CorpusSplit:
    rng = np.random.Generator(np.random.Philox(scfg.seed))
    symbols = list(table.symbols)
    protos = phone_prototypes(scfg, table, rng)
    speakers = rng.standard_normal((scfg.n_speakers, scfg.phone_proto_dim)) * scfg.speaker_shift_std

    vocab: dict[str, tuple[str, ...]] = {}
    durations: dict[str, np.ndarray] = {}
    words: list[tuple[str, ...]] = []
    while len(words) < scfg.n_word_types:
        if words and rng.random() < scfg.derive_prob:
            w = _derive_word(rng, words[int(rng.integers(len(words)))], symbols,
                             scfg.min_phones, scfg.max_phones)
        else:
            w = _random_word(rng, symbols, scfg.min_phones, scfg.max_phones)
        if w in words:
            continue
        name = f"w{len(words):03d}"
        words.append(w)
        vocab[name] = w
        durations[name] = rng.integers(scfg.min_frames_per_phone, scfg.max_frames_per_phone + 1, size=len(w))

    splits = {s: [] for s in SPLITS}
    fr = np.asarray(scfg.split_fractions, dtype=np.float64)
    bounds = np.cumsum(fr / fr.sum())
    for name, phones in vocab.items():
        for k in range(scfg.segments_per_type):
            sid = f"{name}_{k:03d}"
            srng = _segment_rng(scfg.seed, sid)
            spk = int(srng.integers(scfg.n_speakers))
            base = durations[name]
            if scfg.duration_jitter > 0:
                lens = np.round(base * np.exp(scfg.duration_jitter * srng.standard_normal(base.size)))
                lens = np.clip(lens, 1, None).astype(int)
            else:
                lens = base
            frames = np.concatenate([np.repeat(protos[table.index_of(p)][None, :], n, axis=0)
                                     for p, n in zip(phones, lens)])
            frames = frames + speakers[spk]
            if scfg.noise_std > 0:
                frames = frames + srng.standard_normal(frames.shape) * scfg.noise_std
            pos = (k + 0.5) / scfg.segments_per_type
            split = SPLITS[int(np.searchsorted(bounds, pos))]
            splits[split].append(WordSegment(sid, name, phones, frames.astype(np.float32),
                                             f"spk{spk}", frames.shape[0] * scfg.frame_shift_s))
    return CorpusSplit(splits["train"], splits["valid"], splits["test"], vocab)


# --- phone n-grams ---------------------------------------------------------

def ngrams(phones: Sequence[str], orders: Iterable[int]) -> set[tuple[str, ...]]:
    """Boundary-padded phone n-grams of every requested order."""
    padded = (BOUNDARY, *phones, BOUNDARY)
    out = set()
    for n in orders:
        if n < 1:
            raise ValueError("n-gram order must be >= 1")
        out.update(padded[i:i + n] for i in range(len(padded) - n + 1))
    return out


def ngram_inventory(vocabulary, orders=(2, 3)) -> list[tuple[str, ...]]:
    """Sorted union of the n-grams of every word in ``vocabulary``.

    ``vocabulary`` is a mapping word -> phones or an iterable of phone
    sequences.
    """
    orders = tuple(orders)
    if not orders:
        raise ValueError("need at least one n-gram order")
    seqs = vocabulary.values() if isinstance(vocabulary, Mapping) else vocabulary
    inv = set()
    for phones in seqs:
        inv |= ngrams(phones, orders)
    return sorted(inv)


class NgramIndex:
    """Position lookup for an n-gram inventory."""

    def __init__(self, inventory: Sequence[tuple[str, ...]]):
        self.inventory = list(inventory)
        self.position = {g: i for i, g in enumerate(self.inventory)}
        self.orders = sorted({len(g) for g in self.inventory})

    def __len__(self):
        return len(self.inventory)

    def targets(self, phones: Sequence[str], strict: bool = False) -> np.ndarray:
        y = np.zeros(len(self.inventory), dtype=np.float32)
        for g in ngrams(phones, self.orders):
            i = self.position.get(g)
            if i is None:
                if strict:
                    raise CorpusError(f"n-gram {' '.join(g)!r} not in inventory")
                continue
            y[i] = 1.0
        return y


def ngram_targets(segment, inventory, strict: bool = False) -> np.ndarray:
    """Binary presence vector of the segment's n-grams over ``inventory``."""
    index = inventory if isinstance(inventory, NgramIndex) else NgramIndex(inventory)
    phones = segment.phones if isinstance(segment, WordSegment) else segment
    return index.targets(phones, strict=strict)
