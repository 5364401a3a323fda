"""Evaluation: word discrimination (mAP) and phonological similarity (Kendall tau).

Similarities are accumulated in float64 on unit-normalized rows, and every
tie is broken by segment id so results never depend on input order.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .phonology import CostModel, FeatureTable, pwld, pwld_matrix

log = logging.getLogger(__name__)

VARIANTS = ("eq5", "tau_b")
TIE_DECIMALS = 12


class DegenerateEmbeddingError(ValueError):
    pass


class UndefinedAPError(ValueError):
    pass


class RankingContractError(ValueError):
    pass


@dataclass(frozen=True)
class Candidate:
    segment_id: str
    word_type: str
    phones: tuple[str, ...]


def _meta(item) -> Candidate:
    if isinstance(item, Candidate):
        return item
    if isinstance(item, (tuple, list)):
        return Candidate(str(item[0]), str(item[1]), tuple(item[2]))
    return Candidate(item.segment_id, item.word_type, tuple(item.phones))


class SearchIndex:
    """Full-scan cosine similarity over a fixed candidate set."""

    def __init__(self, embeddings: np.ndarray, metadata: Sequence):
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] < 1:
            raise ValueError(f"index needs a nonempty 2-D embedding matrix, got {emb.shape}")
        self.meta = [_meta(m) for m in metadata]
        if len(self.meta) != emb.shape[0]:
            raise ValueError(f"{emb.shape[0]} embeddings but {len(self.meta)} metadata rows")
        norms = np.linalg.norm(emb, axis=1)
        bad = np.flatnonzero(norms == 0)
        if bad.size:
            raise DegenerateEmbeddingError(f"zero-norm embedding for segment {self.meta[bad[0]].segment_id}")
        self.unit = emb / norms[:, None]
        self.ids = [m.segment_id for m in self.meta]
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate segment ids in index")
        self.types = np.array([m.word_type for m in self.meta])
        # rank of each row's segment id, used as the tie-breaker
        self.id_rank = np.empty(len(self.ids), dtype=np.intp)
        self.id_rank[np.argsort(np.array(self.ids), kind="stable")] = np.arange(len(self.ids))

    def __len__(self):
        return len(self.meta)

    def similarities(self, query: np.ndarray) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        n = np.linalg.norm(q)
        if n == 0:
            raise DegenerateEmbeddingError("zero-norm query")
        return self.unit @ (q / n)


def build_index(embeddings, metadata) -> SearchIndex:
    return SearchIndex(embeddings, metadata)


@dataclass
class RankedList:
    """Candidate rows in rank order.

    ``scores`` are similarities (descending) or distances (ascending).
    ``groups`` holds a dense tie-group number per ranked position for weak
    orders; ``None`` means the order is strict.
    """

    query_id: str | None
    order: np.ndarray
    scores: np.ndarray
    higher_is_better: bool
    groups: np.ndarray | None = None

    def __len__(self):
        return len(self.order)


def _candidates(index: SearchIndex, exclude) -> np.ndarray:
    rows = np.arange(len(index))
    if exclude is None:
        return rows
    return rows[rows != exclude]


def rank_by_embedding(index: SearchIndex, query: np.ndarray, exclude: int | None = None,
                      query_id: str | None = None) -> RankedList:
    """R_theta: descending cosine similarity, ties by segment id."""
    rows = _candidates(index, exclude)
    sims = index.similarities(query)[rows]
    perm = np.lexsort((index.id_rank[rows], -sims))
    return RankedList(query_id, rows[perm], sims[perm], True)


def rank_by_pwld(query_phones: Sequence[str], index_or_meta, table: FeatureTable,
                 cm: CostModel = CostModel(), exclude: int | None = None, query_id: str | None = None,
                 distances: np.ndarray | None = None) -> RankedList:
    """R_phi: ascending PWLD as a weak order; equal distances share a tie group.

    ``distances`` may supply precomputed PWLD values for all rows.
    """
    index = index_or_meta if isinstance(index_or_meta, SearchIndex) else None
    meta = index.meta if index is not None else [_meta(m) for m in index_or_meta]
    rows = np.arange(len(meta)) if exclude is None else np.array([i for i in range(len(meta)) if i != exclude])
    if distances is None:
        d = np.array([pwld(query_phones, meta[i].phones, table, cm) for i in rows])
    else:
        d = np.asarray(distances, dtype=np.float64)[rows]
    d = np.round(d, TIE_DECIMALS)
    id_rank = np.argsort(np.argsort(np.array([meta[i].segment_id for i in rows]), kind="stable"), kind="stable")
    perm = np.lexsort((id_rank, d))
    ds = d[perm]
    groups = np.concatenate([[0], np.cumsum(ds[1:] != ds[:-1])]) if len(ds) else ds.astype(np.intp)
    return RankedList(query_id, rows[perm], ds, False, groups.astype(np.intp))


# --- average precision -----------------------------------------------------

def average_precision(ranking, relevant) -> float:
    """Mean of precision@r over the ranks r that hold a relevant item.

    ``ranking`` is a RankedList or a sequence of candidate ids; ``relevant``
    is the set of relevant ids, all of which must appear in the ranking.
    """
    order = ranking.order if isinstance(ranking, RankedList) else ranking
    relevant = set(relevant)
    if not relevant:
        raise UndefinedAPError("average precision is undefined without relevant items")
    rel = np.fromiter((o in relevant for o in np.asarray(order).tolist()), dtype=bool, count=len(order))
    if rel.sum() != len(relevant):
        raise UndefinedAPError("relevant items missing from the ranking")
    return _ap_from_mask(rel)


def _ap_from_mask(rel: np.ndarray) -> float:
    hits = np.cumsum(rel)
    ranks = np.flatnonzero(rel) + 1
    return float((hits[rel] / ranks).sum() / rel.sum())


@dataclass
class MapResult:
    map: float
    std: float
    per_query: dict[str, float]
    n_excluded: int


def mean_average_precision(index: SearchIndex, queries: Sequence[int] | None = None,
                           query_embeddings: np.ndarray | None = None) -> MapResult:
    """Self-retrieval mAP: each query row is excluded from its own candidates.

    Queries whose word type has no other segment in the index are skipped
    and counted in ``n_excluded``.
    """
    queries = range(len(index)) if queries is None else queries
    aps: dict[str, float] = {}
    excluded = 0
    for q in queries:
        same = index.types == index.types[q]
        if same.sum() < 2:
            excluded += 1
            continue
        vec = index.unit[q] if query_embeddings is None else query_embeddings[q]
        r = rank_by_embedding(index, vec, exclude=q)
        aps[index.ids[q]] = _ap_from_mask(same[r.order])
    if excluded:
        log.info("mAP: %d singleton queries excluded", excluded)
    if not aps:
        raise UndefinedAPError("no query has a relevant candidate")
    vals = np.array([aps[k] for k in sorted(aps)])
    return MapResult(float(vals.mean()), float(vals.std()), dict(sorted(aps.items())), excluded)


# --- Kendall tau -----------------------------------------------------------

def count_inversions(seq: Sequence) -> int:
    """Number of pairs i < j with seq[i] > seq[j], by merge sort."""
    a = list(seq)
    if len(a) < 2:
        return 0
    buf = a[:]
    inv = 0
    width = 1
    n = len(a)
    while width < n:
        for lo in range(0, n, 2 * width):
            mid, hi = min(lo + width, n), min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if a[j] < a[i]:
                    buf[k] = a[j]
                    inv += mid - i
                    j += 1
                else:
                    buf[k] = a[i]
                    i += 1
                k += 1
            buf[k:k + mid - i] = a[i:mid]
            k += mid - i
            buf[k:k + hi - j] = a[j:hi]
        a, buf = buf, a
        width *= 2
    return inv


def _tie_pairs(values: np.ndarray) -> int:
    _, counts = np.unique(values, return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def _aligned(r_theta: RankedList, r_phi: RankedList):
    if len(r_theta) != len(r_phi) or set(r_theta.order.tolist()) != set(r_phi.order.tolist()):
        raise RankingContractError("rankings are over different candidate sets")
    k = len(r_theta)
    if k < 2:
        raise RankingContractError("Kendall tau needs at least 2 candidates")
    theta_pos = np.empty(k, dtype=np.intp)
    theta_pos_by_cand = dict(zip(r_theta.order.tolist(), range(k)))
    theta_score = dict(zip(r_theta.order.tolist(), r_theta.scores.tolist()))
    groups = r_phi.groups if r_phi.groups is not None else np.arange(k)
    phi_group = np.asarray(groups)
    for p, cand in enumerate(r_phi.order.tolist()):
        theta_pos[p] = theta_pos_by_cand[cand]
    theta_vals = np.array([theta_score[c] for c in r_phi.order.tolist()])
    if r_theta.higher_is_better:
        theta_vals = -theta_vals
    return k, phi_group, theta_pos, theta_vals


def kendall_tau(r_theta: RankedList, r_phi: RankedList, variant: str = "eq5") -> float:
    """Agreement between the embedding ordering and the PWLD weak order.

    ``eq5``: 1 - 2*delta / (k(k-1)/2), where delta counts pairs strictly
    ordered by PWLD that the embedding ranks the other way; pairs tied in
    PWLD never count as discordant but stay in the denominator.
    ``tau_b``: tie-corrected tau using embedding scores and PWLD values.
    """
    k, phi_group, theta_pos, theta_vals = _aligned(r_theta, r_phi)
    n0 = k * (k - 1) // 2
    if variant == "eq5":
        # r_phi.order is sorted by group; sort within groups by theta position
        order = np.lexsort((theta_pos, phi_group))
        delta = count_inversions(theta_pos[order].tolist())
        return 1.0 - 2.0 * delta / n0
    if variant != "tau_b":
        raise ValueError(f"variant must be one of {VARIANTS}")
    x = phi_group.astype(np.float64)
    y = np.asarray(theta_vals, dtype=np.float64)
    order = np.lexsort((y, x))
    x, y = x[order], y[order]
    n1 = _tie_pairs(x)
    n2 = _tie_pairs(y)
    # pairs tied in both
    _, joint = np.unique(np.stack([x, y]), axis=1, return_counts=True)
    n3 = int((joint * (joint - 1) // 2).sum())
    swaps = count_inversions(y.tolist())
    denom = np.sqrt(float(n0 - n1) * float(n0 - n2))
    if denom == 0:
        return float("nan")
    return float((n0 - n1 - n2 + n3 - 2 * swaps) / denom)


# --- reports ---------------------------------------------------------------

@dataclass
class EvalReport:
    variant: str
    map: float | None
    map_std: float | None
    tau_mean: float | None
    tau_std: float | None
    per_query_ap: dict[str, float] = field(default_factory=dict)
    per_query_tau: dict[str, float] = field(default_factory=dict)
    n_queries: int = 0
    n_excluded_map: int = 0
    std_over: str = "queries"
    fingerprint: str | None = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=1)

    def tsv_row(self, label: str) -> str:
        fmt = lambda v: "nan" if v is None else f"{v:.4f}"
        return "\t".join([label, fmt(self.map), fmt(self.map_std), fmt(self.tau_mean), fmt(self.tau_std)])


def _pwld_rows(index: SearchIndex, table: FeatureTable, cm: CostModel) -> np.ndarray:
    return pwld_matrix([m.phones for m in index.meta], table, cm)


def phonological_similarity_eval(index: SearchIndex, queries: Sequence[int] | None, table: FeatureTable,
                                 cm: CostModel = CostModel(), variant: str = "eq5",
                                 with_map: bool = True) -> EvalReport:
    """Per-query Kendall tau between R_theta and R_phi, plus mAP if requested.

    Singleton-type queries are kept here (their PWLD order is defined) but
    excluded from mAP.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    queries = list(range(len(index))) if queries is None else list(queries)
    D = _pwld_rows(index, table, cm)
    taus: dict[str, float] = {}
    for q in queries:
        r_theta = rank_by_embedding(index, index.unit[q], exclude=q, query_id=index.ids[q])
        r_phi = rank_by_pwld(index.meta[q].phones, index, table, cm, exclude=q, distances=D[q])
        taus[index.ids[q]] = kendall_tau(r_theta, r_phi, variant)
    tau_vals = np.array([taus[k] for k in sorted(taus)])
    report = EvalReport(variant, None, None, float(np.nanmean(tau_vals)), float(np.nanstd(tau_vals)),
                        per_query_tau=dict(sorted(taus.items())), n_queries=len(queries))
    if with_map:
        m = mean_average_precision(index, queries)
        report.map, report.map_std = m.map, m.std
        report.per_query_ap = m.per_query
        report.n_excluded_map = m.n_excluded
    return report


def fingerprint(obj) -> str:
    """Short stable hash of a JSON-serializable object."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


# --- Monte-Carlo nulls -----------------------------------------------------

@dataclass(frozen=True)
class NullInterval:
    mean: float
    lo: float
    hi: float
    samples: np.ndarray = field(repr=False, compare=False)

    def contains(self, value: float) -> bool:
        return self.lo <= value <= self.hi


def _interval(samples) -> NullInterval:
    s = np.asarray(samples)
    return NullInterval(float(s.mean()), float(np.quantile(s, 0.025)), float(np.quantile(s, 0.975)), s)


def chance_map(word_types: Sequence[str], rng: np.random.Generator, n_trials: int = 200) -> NullInterval:
    """mAP distribution when every query's candidates are randomly permuted."""
    types = np.asarray(word_types)
    k = len(types)
    qs = [q for q in range(k) if (types == types[q]).sum() >= 2]
    if not qs:
        raise UndefinedAPError("no query has a relevant candidate")
    samples = []
    for _ in range(n_trials):
        aps = []
        for q in qs:
            rel = np.delete(types == types[q], q)
            aps.append(_ap_from_mask(rel[rng.permutation(k - 1)]))
        samples.append(np.mean(aps))
    return _interval(samples)


def _shuffled(index: SearchIndex, rng: np.random.Generator) -> SearchIndex:
    return SearchIndex(index.unit[rng.permutation(len(index))], index.meta)


def null_map(index: SearchIndex, rng: np.random.Generator, n_trials: int = 200) -> NullInterval:
    """mAP distribution with embeddings randomly reassigned to segments.

    Reassigning whole rows keeps the similarity structure shared between
    queries, so it is the right reference for a set of random embeddings.
    """
    return _interval([mean_average_precision(_shuffled(index, rng)).map for _ in range(n_trials)])


def null_tau(index: SearchIndex, table: FeatureTable, rng: np.random.Generator, cm: CostModel = CostModel(),
             variant: str = "eq5", n_trials: int = 200) -> NullInterval:
    """Mean-tau distribution with embeddings randomly reassigned to segments."""
    D = _pwld_rows(index, table, cm)
    phis = [rank_by_pwld(index.meta[q].phones, index, table, cm, exclude=q, distances=D[q])
            for q in range(len(index))]
    samples = []
    for _ in range(n_trials):
        shuffled = _shuffled(index, rng)
        taus = [kendall_tau(rank_by_embedding(shuffled, shuffled.unit[q], exclude=q), phis[q], variant)
                for q in range(len(index))]
        samples.append(np.mean(taus))
    return _interval(samples)
