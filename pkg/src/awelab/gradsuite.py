"""Finite-difference gradient suite over every differentiable op and loss.

Each case builds random float64 inputs for a given 2-D base shape, reduces
the op output with a fixed random linear probe and returns the relative
error between backprop and central differences.
"""

from __future__ import annotations

import time
import zlib

import numpy as np

from . import autodiff as ad
from .autodiff import default_dtype, gradcheck

SHAPES = [(2, 3), (3, 2), (1, 4)]
TOLERANCE = 1e-4


def rand(rng, *shape, away_from_zero=False):
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.where(np.abs(x) < 0.05, 0.3, x)
    return ad.parameter(x)


def probe(out, rng):
    """Random linear functional of an op output, to exercise every gradient entry."""
    w = rng.standard_normal(out.shape)
    return ad.tsum(ad.mul_const(out, w))


def _unary_case(op, away=False):
    def run(rng, shape):
        x = rand(rng, *shape, away_from_zero=away)
        f = lambda: probe(op(x), np.random.default_rng(99))
        return gradcheck(f, [x])
    return run


def _binary_case(op):
    def run(rng, shape):
        a, b = rand(rng, *shape), rand(rng, *shape)
        return gradcheck(lambda: probe(op(a, b), np.random.default_rng(99)), [a, b])
    return run


def _matmul(rng, shape):
    a, b = rand(rng, *shape), rand(rng, shape[1], 3)
    return gradcheck(lambda: probe(ad.matmul(a, b), np.random.default_rng(99)), [a, b])


def _add_bias(rng, shape):
    x, b = rand(rng, *shape), rand(rng, shape[-1])
    return gradcheck(lambda: probe(ad.add_bias(x, b), np.random.default_rng(99)), [x, b])


def _conv1d(rng, shape):
    B, C = shape
    x, w, b = rand(rng, B, 5, C), rand(rng, 3, C, 2), rand(rng, 2)
    return gradcheck(lambda: probe(ad.conv1d(x, w, b), np.random.default_rng(99)), [x, w, b])


def _batch_norm(rng, shape, train=True):
    x = rand(rng, shape[0] + 3, shape[1])
    g, b = rand(rng, shape[1]), rand(rng, shape[1])
    rm, rv = np.zeros(shape[1]), np.ones(shape[1]) * 1.5
    mask = np.ones(x.shape[0], dtype=bool)
    mask[-1] = False
    f = lambda: probe(ad.batch_norm(x, g, b, rm.copy(), rv.copy(), train, mask), np.random.default_rng(99))
    return gradcheck(f, [x, g, b])


def _dropout(rng, shape):
    x = rand(rng, *shape)
    f = lambda: probe(ad.dropout(x, 0.3, np.random.default_rng(5), True), np.random.default_rng(99))
    return gradcheck(f, [x])


def _mean_over_time(rng, shape):
    x = rand(rng, shape[0], 4, shape[1])
    lengths = np.arange(shape[0]) % 4 + 1
    return gradcheck(lambda: probe(ad.mean_over_time(x, lengths), np.random.default_rng(99)), [x])


def _concat(rng, shape):
    a, b = rand(rng, *shape), rand(rng, shape[0], 2)
    return gradcheck(lambda: probe(ad.concat([a, b], axis=1), np.random.default_rng(99)), [a, b])


def _gather_rows(rng, shape):
    x = rand(rng, *shape)
    idx = [0, shape[0] - 1, 0]
    return gradcheck(lambda: probe(ad.gather_rows(x, idx), np.random.default_rng(99)), [x])


def _pick(rng, shape):
    x = rand(rng, *shape)
    idx = np.arange(shape[0]) % shape[1]
    return gradcheck(lambda: probe(ad.pick(x, idx), np.random.default_rng(99)), [x])


def _stack(rng, shape):
    a, b = rand(rng, *shape), rand(rng, *shape)
    return gradcheck(lambda: probe(ad.stack([a, b], axis=1), np.random.default_rng(99)), [a, b])


def _place_in_time(rng, shape):
    x = rand(rng, 2, 3, shape[1])
    return gradcheck(lambda: probe(ad.place_in_time(x, [3, 2], [0, 2], 5), np.random.default_rng(99)), [x])


def _cosine(rng, shape):
    a, b = rand(rng, *shape), rand(rng, *shape)
    return gradcheck(lambda: probe(ad.cosine_similarity(a, b), np.random.default_rng(99)), [a, b])


def _gru_cell(rng, shape):
    B, H = shape
    xp, h, u, bu = rand(rng, B, 3 * H), rand(rng, B, H), rand(rng, H, 3 * H), rand(rng, 3 * H)
    mask = np.arange(B) % 2
    return gradcheck(lambda: probe(ad.gru_cell(xp, h, u, bu, mask), np.random.default_rng(99)), [xp, h, u, bu])


def _gru_layer(rng, shape, reverse=False):
    B, H = shape
    T = 4
    xp, u, bu, h0 = rand(rng, B, T, 3 * H), rand(rng, H, 3 * H), rand(rng, 3 * H), rand(rng, B, H)
    lengths = np.arange(B) % T + 1
    f = lambda: probe(ad.gru_layer(xp, u, bu, lengths, reverse, h0), np.random.default_rng(99))
    return gradcheck(f, [xp, u, bu, h0])


def _sum_axis(rng, shape):
    x = rand(rng, *shape)
    return gradcheck(lambda: probe(ad.tsum(x, axis=0), np.random.default_rng(99)), [x])


OP_CASES = {
    "add": _binary_case(ad.add),
    "sub": _binary_case(ad.sub),
    "mul": _binary_case(ad.mul),
    "scalar_affine": _unary_case(lambda x: 3.0 - 2.0 * x),
    "relu": _unary_case(ad.relu, away=True),
    "sigmoid": _unary_case(ad.sigmoid),
    "tanh": _unary_case(ad.tanh),
    "softplus": _unary_case(ad.softplus),
    "log_softmax": _unary_case(ad.log_softmax),
    "reshape": _unary_case(lambda x: ad.reshape(x, (-1,))),
    "getitem": _unary_case(lambda x: x[:, 1:]),
    "matmul": _matmul,
    "add_bias": _add_bias,
    "conv1d": _conv1d,
    "batch_norm_train": _batch_norm,
    "batch_norm_eval": lambda rng, s: _batch_norm(rng, s, train=False),
    "dropout": _dropout,
    "mean_over_time": _mean_over_time,
    "concat": _concat,
    "gather_rows": _gather_rows,
    "pick": _pick,
    "stack": _stack,
    "place_in_time": _place_in_time,
    "cosine_similarity": _cosine,
    "gru_cell": _gru_cell,
    "gru_layer": _gru_layer,
    "gru_layer_reverse": lambda rng, s: _gru_layer(rng, s, reverse=True),
    "sum_axis": _sum_axis,
}


def _encoder(kind, rng):
    from .encoders import EncoderConfig, build_encoder
    cfg = (EncoderConfig(kind="cnn", input_dim=3, cnn_filters=(2, 3, 8), cnn_widths=(2, 2, 2), dropout=0.0)
           if kind == "cnn" else EncoderConfig(kind="bgru", input_dim=3, bgru_hidden=3, dropout=0.0))
    return build_encoder(cfg, rng)


def _frames(rng, shape):
    return [rng.standard_normal((t, 3)) for t in (shape[0] + 1, shape[1] + 2, 2)]


def _detect_loss(rng, shape, kind):
    from .objectives import DetectHead, detect_loss
    enc = _encoder(kind, rng)
    head = DetectHead(enc.embed_dim, shape[1] + 2, rng)
    x = _frames(rng, shape)
    y = rng.integers(0, 2, size=(3, shape[1] + 2))
    return gradcheck(lambda: detect_loss(enc.forward(x, True), y, head),
                     list(enc.params.values()) + list(head.params.values()))


def _word2phones_loss(rng, shape, kind):
    from .objectives import PhoneDecoder, word2phones_loss
    enc = _encoder(kind, rng)
    phones = ["a", "b", "k", "s"]
    dec = PhoneDecoder(phones, enc.embed_dim, rng, hidden=shape[1], emb_dim=2)
    seqs = [list(rng.choice(phones, size=n)) for n in (shape[0], 2, 1)]
    x = _frames(rng, shape)
    return gradcheck(lambda: word2phones_loss(enc.forward(x, True), seqs, dec),
                     list(enc.params.values()) + list(dec.params.values()))


def _triplet_loss(rng, shape, kind):
    from .objectives import triplet_loss
    enc = _encoder(kind, rng)
    x = _frames(rng, shape) + _frames(rng, shape)

    def loss():
        e = enc.forward(x, True)
        return triplet_loss(ad.getitem(e, np.arange(3)), ad.getitem(e, np.arange(3, 6)),
                            ad.getitem(e, np.array([4, 5, 3])), margin=1.5)

    return gradcheck(loss, list(enc.params.values()))


LOSS_CASES = {
    f"{name}_{kind}": (lambda fn, k: lambda rng, s: fn(rng, s, k))(fn, kind)
    for name, fn in [("detect_loss", _detect_loss), ("word2phones_loss", _word2phones_loss),
                     ("triplet_loss", _triplet_loss)]
    for kind in ("cnn", "bgru")
}

ALL_CASES = {**OP_CASES, **LOSS_CASES}


def run_case(name: str, shape) -> float:
    rng = np.random.default_rng(zlib.crc32(f"{name}{tuple(shape)}".encode()))
    with default_dtype(np.float64):
        return ALL_CASES[name](rng, shape)


def run_suite(names=None, shapes=SHAPES) -> dict[str, float]:
    """Max relative error per case over ``shapes``."""
    out = {}
    for name in sorted(names or ALL_CASES):
        out[name] = max(run_case(name, s) for s in shapes)
    return out


def timed_suite(names=None, shapes=SHAPES):
    t0 = time.perf_counter()
    errs = run_suite(names, shapes)
    return errs, time.perf_counter() - t0
