"""Phone feature tables, Levenshtein distance and the phonologically
weighted Levenshtein distance (PWLD).

Phone sequences are plain tuples of phone symbols. Substitution cost
between two phones is the (normalized) Hamming distance between their
ternary feature vectors; insertions and deletions cost a constant.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FEATURE_VALUES = {"+": 1, "-": -1, "0": 0}

BUNDLED_TABLE = "phoible_de_cs.tsv"


class FeatureTableError(ValueError):
    """Malformed or conflicting feature-table input."""


class UnknownPhoneError(KeyError):
    """A phone symbol is missing from the feature table."""

    def __init__(self, symbol: str):
        super().__init__(symbol)
        self.symbol = symbol

    def __str__(self):
        return f"phonology: unknown phone {self.symbol!r}"


@dataclass(frozen=True)
class Phone:
    symbol: str
    index: int

    def __post_init__(self):
        if not self.symbol:
            raise FeatureTableError("phone symbol must be nonempty")
        if self.index < 0:
            raise FeatureTableError("phone index must be non-negative")


@dataclass(frozen=True)
class CostModel:
    """Edit costs for PWLD.

    ``max_sub_cost`` scales the normalized Hamming distance, so a pair of
    phones differing in every feature costs exactly ``max_sub_cost``. With
    ``normalize_hamming`` off the raw count of differing features is
    multiplied by ``max_sub_cost`` instead.
    """

    indel_cost: float = 0.5
    max_sub_cost: float = 1.0
    normalize_hamming: bool = True

    def __post_init__(self):
        if self.indel_cost <= 0 or self.max_sub_cost <= 0:
            raise ValueError("edit costs must be positive")


@dataclass(frozen=True, eq=False)
class FeatureTable:
    feature_names: tuple[str, ...]
    symbols: tuple[str, ...]
    values: np.ndarray  # (n_phones, n_features) int8 in {-1, 0, 1}
    _index: dict = field(init=False, repr=False)
    _hamming: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.int8)
        if values.ndim != 2 or values.shape != (len(self.symbols), len(self.feature_names)):
            raise FeatureTableError(
                f"value matrix shape {values.shape} does not match "
                f"{len(self.symbols)} phones x {len(self.feature_names)} features")
        if not self.feature_names:
            raise FeatureTableError("feature table needs at least one feature")
        index = {}
        for i, sym in enumerate(self.symbols):
            if not sym:
                raise FeatureTableError("phone symbol must be nonempty")
            if sym in index:
                raise FeatureTableError(f"duplicate phone symbol {sym!r}")
            index[sym] = i
        if len(self.symbols) >= 2 and not (values != values[0]).any():
            raise FeatureTableError("degenerate feature table: all rows identical")
        values.setflags(write=False)
        hamming = (values[:, None, :] != values[None, :, :]).sum(axis=2)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_hamming", hamming)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def __len__(self):
        return len(self.symbols)

    def __contains__(self, symbol):
        return symbol in self._index

    def phone(self, symbol: str) -> Phone:
        return Phone(symbol, self.index_of(symbol))

    def index_of(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise UnknownPhoneError(symbol) from None

    def vector(self, symbol: str) -> np.ndarray:
        return self.values[self.index_of(symbol)]

    def hamming(self, a: str, b: str) -> int:
        return int(self._hamming[self.index_of(a), self.index_of(b)])

    def substitution_matrix(self, cm: CostModel) -> np.ndarray:
        """All pairwise substitution costs, indexed like ``symbols``."""
        scale = cm.max_sub_cost / self.n_features if cm.normalize_hamming else cm.max_sub_cost
        return self._hamming * scale

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update("\t".join(self.feature_names).encode())
        for sym, row in zip(self.symbols, self.values):
            h.update(sym.encode())
            h.update(row.tobytes())
        return h.hexdigest()[:16]


def _parse_lines(lines: Iterable[str], origin: str) -> FeatureTable:
    header = None
    symbols, rows = [], []
    seen = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        cells = line.split("\t")
        if header is None:
            if len(cells) < 2:
                raise FeatureTableError(f"{origin}:{lineno}: header must name at least one feature")
            header = tuple(c.strip() for c in cells[1:])
            continue
        if len(cells) != len(header) + 1:
            raise FeatureTableError(
                f"{origin}:{lineno}: expected {len(header)} feature values, got {len(cells) - 1}")
        sym = cells[0].strip()
        if not sym:
            raise FeatureTableError(f"{origin}:{lineno}: empty phone symbol")
        if sym in seen:
            raise FeatureTableError(
                f"{origin}:{lineno}: duplicate phone {sym!r} (first on line {seen[sym]})")
        seen[sym] = lineno
        try:
            rows.append([FEATURE_VALUES[c.strip()] for c in cells[1:]])
        except KeyError as e:
            raise FeatureTableError(
                f"{origin}:{lineno}: feature value {e.args[0]!r} not in {{+,-,0}}") from None
        symbols.append(sym)
    if header is None:
        raise FeatureTableError(f"{origin}: empty feature table")
    if not symbols:
        raise FeatureTableError(f"{origin}: feature table has a header but no phones")
    return FeatureTable(header, tuple(symbols), np.array(rows, dtype=np.int8))


def load_feature_table(source=None) -> FeatureTable:
    """Read a tab-separated feature table; ``None`` loads the bundled one."""
    if source is None:
        text = resources.files("awelab.data").joinpath(BUNDLED_TABLE).read_text(encoding="utf-8")
        return _parse_lines(text.splitlines(), BUNDLED_TABLE)
    path = Path(source)
    with path.open(encoding="utf-8") as f:
        return _parse_lines(f, str(path))


def parse_phones(text: str) -> tuple[str, ...]:
    """Split a space-separated transcription such as ``"z ɪ ç ɐ"``."""
    phones = tuple(text.split())
    if not phones:
        raise ValueError("empty phone sequence")
    return phones


def substitution_cost(a: str, b: str, table: FeatureTable, cm: CostModel = CostModel()) -> float:
    n = table.hamming(a, b)
    if cm.normalize_hamming:
        return cm.max_sub_cost * n / table.n_features
    return cm.max_sub_cost * n


def levenshtein(s1: Sequence[str], s2: Sequence[str]) -> int:
    prev = list(range(len(s2) + 1))
    for i, a in enumerate(s1, start=1):
        cur = [i]
        for j, b in enumerate(s2, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a != b)))
        prev = cur
    return prev[-1]


def _pwld_indices(i1: Sequence[int], i2: Sequence[int], sub: np.ndarray, indel: float) -> float:
    prev = [j * indel for j in range(len(i2) + 1)]
    for i, a in enumerate(i1, start=1):
        row = sub[a]
        cur = [i * indel]
        for j, b in enumerate(i2, start=1):
            cur.append(min(prev[j] + indel, cur[j - 1] + indel, prev[j - 1] + row[b]))
        prev = cur
    return prev[-1]


def pwld(s1: Sequence[str], s2: Sequence[str], table: FeatureTable,
         cm: CostModel = CostModel(), normalize: bool = False) -> float:
    """Minimum alignment cost between two phone sequences.

    ``normalize`` divides by the longer sequence length; this variant is
    for inspection only and is never used for rankings.
    """
    i1 = [table.index_of(p) for p in s1]
    i2 = [table.index_of(p) for p in s2]
    d = _pwld_indices(i1, i2, table.substitution_matrix(cm).tolist(), cm.indel_cost)
    if normalize:
        d /= max(len(s1), len(s2), 1)
    return d


def pwld_matrix(words: Sequence[Sequence[str]], table: FeatureTable,
                cm: CostModel = CostModel()) -> np.ndarray:
    """Symmetric matrix of pairwise PWLD values.

    Distances are computed once per pair of distinct sequences and then
    scattered, so repeated word types cost nothing extra.
    """
    if not words:
        raise ValueError("pwld_matrix needs at least one word")
    keys = [tuple(w) for w in words]
    uniq = sorted(set(keys))
    pos = {k: i for i, k in enumerate(uniq)}
    idx = [[table.index_of(p) for p in k] for k in uniq]
    sub = table.substitution_matrix(cm).tolist()
    u = np.zeros((len(uniq), len(uniq)))
    for i in range(len(uniq)):
        for j in range(i + 1, len(uniq)):
            u[i, j] = u[j, i] = _pwld_indices(idx[i], idx[j], sub, cm.indel_cost)
    sel = np.array([pos[k] for k in keys])
    return u[np.ix_(sel, sel)]
