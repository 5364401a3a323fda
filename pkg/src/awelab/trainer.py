"""Training loop, plateau learning-rate schedule and checkpoint files.

All randomness in a run (initialization, batch order, dropout, negative
sampling) is drawn from one counter-based Philox generator seeded from the
run config, and its state is stored in checkpoints, so a resumed run
continues bit-exactly.

Checkpoint layout::

    b"AWE1" | uint32 LE header length | UTF-8 JSON header | float32 LE payload

The header maps every tensor name to its shape and byte offset and carries
the config snapshot, the scheduler/optimizer/generator state and a SHA-256
checksum of the payload.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from . import autodiff as ad
from .corpus import CorpusSplit, NgramIndex, ngram_inventory
from .encoders import AcousticEncoder, EncoderConfig, build_encoder
from .evalkit import build_index, mean_average_precision
from .objectives import (
    SAMPLING, DetectHead, PhoneDecoder, build_triplet_batch, detect_loss, select_negatives,
    triplet_loss, word2phones_loss,
)
from .optim import AdamState, adam_step, clip_grad_norm

log = logging.getLogger(__name__)

OBJECTIVES = ("phone_detect", "word2phones", "siamese")
MAGIC = b"AWE1"
FORMAT_VERSION = 1
_ENCODER_KEYS = {f.name for f in fields(EncoderConfig)} - {"kind"}


class NumericalError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Flat run configuration; encoder fields are inlined."""

    objective: str = "siamese"
    sampling: str = "semi_hard"
    margin: float = 0.4
    scaled_distance: bool = True
    symmetric: bool = True
    encoder: str = "bgru"
    input_dim: int = 39
    cnn_filters: tuple[int, ...] = (256, 512, 1024)
    cnn_widths: tuple[int, ...] = (16, 32, 48)
    dropout: float = 0.2
    bgru_layers: int = 2
    bgru_hidden: int = 512
    bgru_readout: str = "last"
    ngram_orders: tuple[int, ...] = (2, 3)
    decoder_hidden: int = 512
    decoder_emb_dim: int = 64
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    min_lr: float = 1e-6
    clip_norm: float = 5.0
    seed: int = 0
    log_wallclock: bool = False
    corpus: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.sampling not in SAMPLING:
            raise ValueError(f"sampling must be one of {SAMPLING}, got {self.sampling!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must be in (0, 1)")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if self.batch_size < 2 or not self.lr > 0 or not self.margin > 0:
            raise ValueError("batch_size >= 2, lr > 0 and margin > 0 required")
        self.encoder_config()  # validates encoder fields

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(kind=self.encoder, **{k: getattr(self, k) for k in _ENCODER_KEYS})

    @property
    def recurrent(self) -> bool:
        return self.encoder == "bgru" or self.objective == "word2phones"

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        obj = json.loads(text)
        if not isinstance(obj, dict):
            raise ValueError("run config must be a JSON object")
        return cls.from_dict(obj)

    def fingerprint(self) -> str:
        """Hash of the resolved config, ignoring where files live."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class PlateauScheduler:
    """Scale the LR by ``factor`` after ``patience`` epochs without strict improvement.

    The counter resets on improvement and after each reduction.
    """

    lr: float
    factor: float = 0.5
    patience: int = 10
    min_lr: float = 1e-6
    best: float = -math.inf
    bad_epochs: int = 0
    reductions: int = 0

    def step(self, metric: float) -> bool:
        """Record one epoch's metric; returns True if it is a new best."""
        if metric > self.best:
            self.best = metric
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            new_lr = max(self.lr * self.factor, self.min_lr)
            if new_lr < self.lr:
                self.reductions += 1
                log.info("plateau: lr %.3g -> %.3g", self.lr, new_lr)
            self.lr = new_lr
            self.bad_epochs = 0
        return False

    def state(self) -> dict:
        return asdict(self)


# --- model assembly ----------------------------------------------------------

@dataclass
class Model:
    config: RunConfig
    encoder: AcousticEncoder
    head: DetectHead | None = None
    decoder: PhoneDecoder | None = None
    ngrams: NgramIndex | None = None

    @property
    def params(self) -> dict[str, ad.Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        for extra in (self.head, self.decoder):
            if extra is not None:
                out.update(extra.params)
        return out

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return {f"encoder.{k}": v for k, v in self.encoder.buffers.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        snap = {f"param/{k}": p.data.copy() for k, p in self.params.items()}
        snap.update({f"buffer/{k}": b.copy() for k, b in self.buffers.items()})
        return snap

    def restore(self, tensors: Mapping[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data[...] = _take(tensors, f"param/{k}", p.data.shape)
        for k, b in self.buffers.items():
            b[...] = _take(tensors, f"buffer/{k}", b.shape)

    def embed(self, segments) -> np.ndarray:
        return self.encoder.embed_batch(segments, "eval")


def _take(tensors, name, shape):
    if name not in tensors:
        raise CheckpointError(f"checkpoint missing tensor {name}")
    t = tensors[name]
    if t.shape != tuple(shape):
        raise CheckpointError(f"tensor {name}: shape {t.shape} does not match model {tuple(shape)}")
    return t


def build_model(config: RunConfig, vocabulary: Mapping[str, Sequence[str]], rng: np.random.Generator) -> Model:
    enc_cfg = config.encoder_config()
    model = Model(config, build_encoder(enc_cfg, rng))
    if config.objective == "phone_detect":
        model.ngrams = NgramIndex(ngram_inventory(vocabulary, config.ngram_orders))
        model.head = DetectHead(enc_cfg.embed_dim, len(model.ngrams), rng)
    elif config.objective == "word2phones":
        phones = sorted({p for seq in vocabulary.values() for p in seq})
        model.decoder = PhoneDecoder(phones, enc_cfg.embed_dim, rng, config.decoder_hidden, config.decoder_emb_dim)
    return model


def new_generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _rng_state(rng: np.random.Generator) -> dict:
    return json.loads(json.dumps(rng.bit_generator.state, default=lambda a: a.tolist()))


def _set_rng_state(rng: np.random.Generator, state: dict) -> None:
    s = dict(state)
    s["state"] = {k: np.array(v, dtype=np.uint64) for k, v in s["state"].items()}
    s["buffer"] = np.array(s["buffer"], dtype=np.uint64)
    rng.bit_generator.state = s


# --- one epoch ----------------------------------------------------------------

def _batch_loss(model: Model, batch, rng: np.random.Generator) -> ad.Tensor:
    cfg = model.config
    if cfg.objective == "siamese":
        anchors = [a for a, _ in batch]
        positives = [p for _, p in batch]
        B = len(batch)
        emb = model.encoder.forward([s.frames for s in anchors + positives], True, rng)
        types = [s.word_type for s in anchors + positives]
        a_rows = np.arange(B)
        p_rows = np.arange(B, 2 * B)
        if cfg.symmetric:
            a_rows, p_rows = np.concatenate([a_rows, p_rows]), np.concatenate([p_rows, a_rows])
        neg = select_negatives(emb.data, types, a_rows, p_rows, cfg.sampling, rng, cfg.margin,
                               cfg.scaled_distance)
        return triplet_loss(ad.getitem(emb, a_rows), ad.getitem(emb, p_rows), ad.getitem(emb, neg),
                            cfg.margin, cfg.scaled_distance)
    emb = model.encoder.forward([s.frames for s in batch], True, rng)
    if cfg.objective == "phone_detect":
        y = np.stack([model.ngrams.targets(s.phones) for s in batch])
        return detect_loss(emb, y, model.head)
    return word2phones_loss(emb, [s.phones for s in batch], model.decoder)


def _epoch_batches(config: RunConfig, train, rng):
    n_batches = max(1, math.ceil(len(train) / config.batch_size))
    if config.objective == "siamese":
        for _ in range(n_batches):
            yield build_triplet_batch(train, config.batch_size, rng)
        return
    order = rng.permutation(len(train))
    for b in range(n_batches):
        yield [train[i] for i in order[b * config.batch_size:(b + 1) * config.batch_size]]


def validation_map(model: Model, segments) -> float:
    emb = model.embed(segments)
    return mean_average_precision(build_index(emb, segments)).map


# --- checkpoints ---------------------------------------------------------------

@dataclass
class ModelCheckpoint:
    config: RunConfig
    epoch: int
    val_map: float
    tensors: dict[str, np.ndarray]
    vocabulary: dict[str, tuple[str, ...]]
    optimizer_step: int = 0
    rng_state: dict | None = None
    scheduler: dict | None = None
    best_epoch: int | None = None
    history: list = field(default_factory=list)

    def model(self) -> Model:
        """Rebuild the network and load the stored parameters."""
        model = build_model(self.config, self.vocabulary, new_generator(self.config.seed))
        model.restore(self.tensors)
        return model


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    names = sorted(ckpt.tensors)
    table, chunks, offset = {}, [], 0
    for name in names:
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        table[name] = {"shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "awelab_version": __version__,
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "val_map": ckpt.val_map,
        "best_epoch": ckpt.best_epoch,
        "vocabulary": {k: list(v) for k, v in sorted(ckpt.vocabulary.items())},
        "optimizer": {"step": ckpt.optimizer_step},
        "rng_state": ckpt.rng_state,
        "scheduler": ckpt.scheduler,
        "history": ckpt.history,
        "tensors": table,
        "payload_bytes": len(payload),
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(MAGIC + struct.pack("<I", len(head)) + head + payload)
        tmp.replace(path)
    except OSError as e:
        raise CheckpointError(f"trainer: cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path) -> ModelCheckpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise CheckpointError(f"{path}: header length truncated")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise CheckpointError(f"{path}: header truncated ({len(raw) - 8} of {hlen} bytes)")
    try:
        header = json.loads(raw[8:8 + hlen])
    except ValueError as e:
        raise CheckpointError(f"{path}: header is not valid JSON") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format_version {header.get('format_version')} unsupported")
    payload = raw[8 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload_bytes {len(payload)} != {header['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != header["checksum"]:
        raise CheckpointError(f"{path}: checksum mismatch")
    tensors = {}
    for name, spec in header["tensors"].items():
        end = spec["offset"] + spec["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {name} runs past the payload")
        buf = payload[spec["offset"]:end]
        tensors[name] = np.frombuffer(buf, dtype="<f4").reshape(spec["shape"]).astype(np.float32)
    return ModelCheckpoint(
        config=RunConfig.from_dict(header["config"]),
        epoch=header["epoch"],
        val_map=header["val_map"],
        tensors=tensors,
        vocabulary={k: tuple(v) for k, v in header["vocabulary"].items()},
        optimizer_step=header["optimizer"]["step"],
        rng_state=header["rng_state"],
        scheduler=header["scheduler"],
        best_epoch=header["best_epoch"],
        history=header["history"],
    )


# --- training --------------------------------------------------------------------

@dataclass
class TrainResult:
    best: ModelCheckpoint
    log: list[dict]
    last: ModelCheckpoint


def _training_state(model, config, epoch, val_map, vocab, adam, rng, sched, best_tensors, best_epoch, history):
    tensors = model.snapshot()
    for k in model.params:
        tensors[f"adam.m/{k}"] = adam.m[k]
        tensors[f"adam.v/{k}"] = adam.v[k]
    tensors.update({f"best/{k}": v for k, v in best_tensors.items()})
    return ModelCheckpoint(config, epoch, val_map, tensors, dict(vocab), adam.step, _rng_state(rng),
                           sched.state(), best_epoch, list(history))


def train(config: RunConfig, corpus: CorpusSplit, resume: ModelCheckpoint | None = None,
          checkpoint_path=None, log_path=None, stop_after: int | None = None) -> TrainResult:
    """Run the epoch loop and return the best-validation checkpoint plus the log.

    With ``resume`` (a checkpoint saved by this function) training continues
    from the stored epoch with the stored optimizer, scheduler and generator
    state. ``checkpoint_path`` receives the full training state after every
    epoch; ``log_path`` gets one JSON line per epoch. ``stop_after`` ends
    the loop early after that epoch, as an interruption would.
    """
    rng = new_generator(config.seed)
    vocab = {k: tuple(v) for k, v in corpus.vocabulary.items()}
    model = build_model(config, vocab, rng)
    adam = AdamState.zeros_like(model.params)
    sched = PlateauScheduler(config.lr, config.plateau_factor, config.plateau_patience, config.min_lr)
    history: list[dict] = []
    start = 0
    best_tensors = model.snapshot()
    best_epoch = None
    if resume is not None:
        if resume.config.fingerprint() != config.fingerprint():
            raise CheckpointError("resume checkpoint was written by a different run config")
        model.restore(resume.tensors)
        for k in model.params:
            adam.m[k][...] = _take(resume.tensors, f"adam.m/{k}", adam.m[k].shape)
            adam.v[k][...] = _take(resume.tensors, f"adam.v/{k}", adam.v[k].shape)
        adam.step = resume.optimizer_step
        _set_rng_state(rng, resume.rng_state)
        sched = PlateauScheduler(**resume.scheduler)
        best_tensors = {k[5:]: v.copy() for k, v in resume.tensors.items() if k.startswith("best/")}
        best_epoch = resume.best_epoch
        history = list(resume.history)
        start = resume.epoch
    if log_path is not None:
        Path(log_path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in history))

    params = model.params
    end = config.epochs if stop_after is None else min(stop_after, config.epochs)
    for epoch in range(start + 1, end + 1):
        t0 = time.perf_counter()
        losses = []
        for b, batch in enumerate(_epoch_batches(config, corpus.train, rng)):
            loss = _batch_loss(model, batch, rng)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"trainer: non-finite loss {value} at epoch {epoch} batch {b}")
            for p in params.values():
                p.grad = None
            ad.backward(loss)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            if config.recurrent:
                norm = clip_grad_norm(grads, config.clip_norm)
                if norm > config.clip_norm:
                    log.debug("epoch %d batch %d: grad norm %.3g clipped", epoch, b, norm)
            adam_step(params, grads, adam, sched.lr)
            losses.append(value)
        val_map = validation_map(model, corpus.valid)
        lr_used = sched.lr
        if sched.step(val_map):
            best_tensors, best_epoch = model.snapshot(), epoch
        record = {"epoch": epoch, "loss": float(np.mean(losses)), "val_map": val_map, "lr": lr_used,
                  "seconds": round(time.perf_counter() - t0, 3) if config.log_wallclock else None}
        history.append(record)
        log.info("epoch %d loss %.4f val_map %.4f lr %.3g", epoch, record["loss"], val_map, lr_used)
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        if checkpoint_path is not None:
            save_checkpoint(_training_state(model, config, epoch, val_map, vocab, adam, rng, sched,
                                            best_tensors, best_epoch, history), checkpoint_path)

    last = _training_state(model, config, history[-1]["epoch"], history[-1]["val_map"], vocab, adam, rng, sched,
                           best_tensors, best_epoch, history)
    best = ModelCheckpoint(config, best_epoch, sched.best, dict(best_tensors), dict(vocab),
                           best_epoch=best_epoch, history=list(history))
    return TrainResult(best, history, last)
