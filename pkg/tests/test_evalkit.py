import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from awelab.evalkit import (
    Candidate, DegenerateEmbeddingError, RankedList, RankingContractError, UndefinedAPError,
    average_precision, build_index, chance_map, count_inversions, kendall_tau,
    mean_average_precision, null_map, null_tau, phonological_similarity_eval, rank_by_embedding, rank_by_pwld,
)
from awelab.phonology import load_feature_table, parse_phones, pwld_matrix

from oracles import brute_delta, direct_ap, fast_delta, textbook_tau_b

TABLE = load_feature_table()


def meta(n, types=None):
    types = types if types is not None else [f"t{i}" for i in range(n)]
    return [Candidate(f"s{i:03d}", types[i], ("a",)) for i in range(n)]


def strict(order):
    order = np.asarray(order)
    return RankedList(None, order, -np.arange(len(order), dtype=float), True)


def weak(order, groups):
    return RankedList(None, np.asarray(order), np.asarray(groups, dtype=float), False, np.asarray(groups))


class TestIndex:
    def test_single_row(self):
        idx = build_index(np.array([[3.0, 4.0]]), meta(1))
        assert idx.similarities(np.array([3.0, 4.0]))[0] == pytest.approx(1.0)

    def test_orthogonal(self):
        idx = build_index(np.array([[1.0, 0.0]]), meta(1))
        assert idx.similarities(np.array([0.0, 2.0]))[0] == 0.0

    def test_top10_matches_exhaustive(self):
        rng = np.random.default_rng(0)
        emb = rng.standard_normal((50, 16)).astype(np.float32)
        q = rng.standard_normal(16).astype(np.float32)
        idx = build_index(emb, meta(50))
        got = rank_by_embedding(idx, q).order[:10]
        e64, q64 = emb.astype(np.float64), q.astype(np.float64)
        sims = [(e @ q64) / np.linalg.norm(e) / np.linalg.norm(q64) for e in e64]
        assert list(got) == sorted(range(50), key=lambda i: -sims[i])[:10]

    def test_zero_row(self):
        emb = np.ones((3, 2))
        emb[1] = 0
        with pytest.raises(DegenerateEmbeddingError, match="s001"):
            build_index(emb, meta(3))

    def test_zero_query(self):
        with pytest.raises(DegenerateEmbeddingError):
            rank_by_embedding(build_index(np.ones((2, 2)), meta(2)), np.zeros(2))

    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            build_index(np.ones((2, 2)), meta(3))


class TestRankByEmbedding:
    def test_query_equal_to_candidate(self):
        rng = np.random.default_rng(1)
        emb = rng.standard_normal((20, 5))
        assert rank_by_embedding(build_index(emb, meta(20)), emb[13]).order[0] == 13

    def test_identical_candidates_use_id_order(self):
        m = [Candidate(s, "w", ("a",)) for s in ["c", "a", "d", "b"]]
        r = rank_by_embedding(build_index(np.ones((4, 3)), m), np.ones(3))
        assert [m[i].segment_id for i in r.order] == ["a", "b", "c", "d"]

    def test_sort_oracle(self):
        rng = np.random.default_rng(2)
        emb = rng.integers(-2, 3, size=(60, 3)).astype(float)  # many exact ties
        emb[np.all(emb == 0, axis=1)] = 1
        m = meta(60)
        idx = build_index(emb, m)
        q = np.array([1.0, -1.0, 0.5])
        sims = idx.unit @ (q / np.linalg.norm(q))
        want = sorted(range(60), key=lambda i: (-sims[i], m[i].segment_id))
        assert list(rank_by_embedding(idx, q).order) == want

    @settings(max_examples=30, deadline=None)
    @given(st.floats(1e-3, 1e3), st.integers(0, 10_000))
    def test_scale_invariance(self, c, seed):
        rng = np.random.default_rng(seed)
        idx = build_index(rng.standard_normal((25, 4)), meta(25))
        q = rng.standard_normal(4)
        a = rank_by_embedding(idx, q).order
        b = rank_by_embedding(idx, q * c).order
        assert np.array_equal(a, b)

    def test_exclude(self):
        idx = build_index(np.eye(3) + 0.1, meta(3))
        assert 1 not in rank_by_embedding(idx, np.ones(3), exclude=1).order


class TestAveragePrecision:
    def test_all_relevant_on_top(self):
        assert average_precision([4, 2, 0, 1, 3], {4, 2}) == 1.0

    def test_worked_example(self):
        assert average_precision([0, 1, 2, 3, 4], {0, 2}) == pytest.approx(0.8333, abs=1e-4)

    def test_relevant_at_bottom(self):
        assert average_precision([0, 1, 2, 3], {2, 3}) == pytest.approx(5 / 12)

    def test_empty_relevant(self):
        with pytest.raises(UndefinedAPError):
            average_precision([0, 1], set())

    def test_random_vs_direct(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            k = int(rng.integers(1, 40))
            order = rng.permutation(k).tolist()
            rel = set(rng.choice(k, size=int(rng.integers(1, k + 1)), replace=False).tolist())
            assert average_precision(order, rel) == pytest.approx(direct_ap(order, rel), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 30), st.integers(0, 10_000))
    def test_bounds_and_tail_invariance(self, k, seed):
        rng = np.random.default_rng(seed)
        order = rng.permutation(k).tolist()
        rel = set(rng.choice(k, size=int(rng.integers(1, k)), replace=False).tolist())
        ap = average_precision(order, rel)
        assert 0 <= ap <= 1
        assert (ap == 1.0) == (set(order[:len(rel)]) == rel)
        last = max(i for i, c in enumerate(order) if c in rel)
        tail = order[last + 1:]
        shuffled = order[:last + 1] + list(rng.permutation(tail))
        assert average_precision(shuffled, rel) == ap


class TestMeanAveragePrecision:
    def test_perfect_clusters(self):
        rng = np.random.default_rng(4)
        centers = rng.standard_normal((5, 8)) * 10
        emb = np.repeat(centers, 4, axis=0) + rng.standard_normal((20, 8)) * 0.01
        types = [f"w{i // 4}" for i in range(20)]
        res = mean_average_precision(build_index(emb, meta(20, types)))
        assert res.map == 1.0 and res.n_excluded == 0

    def test_two_query_toy(self):
        # q0 retrieves its mate first (AP 1); q3 gets its mate second of two, relevant at rank 2 of 3 -> 0.5
        emb = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.8, 0.2]])
        types = ["a", "a", "x", "b"]
        idx = build_index(emb, meta(4, types))
        m = mean_average_precision(idx, queries=[0, 1])
        assert m.per_query["s000"] == 1.0
        assert m.map == pytest.approx(np.mean(list(m.per_query.values())))
        toy = [average_precision([1, 2, 3], {1}), average_precision([0, 2, 3], {2})]
        assert toy == [1.0, 0.5] and np.mean(toy) == 0.75

    def test_singletons_excluded(self):
        emb = np.random.default_rng(5).standard_normal((4, 3))
        res = mean_average_precision(build_index(emb, meta(4, ["a", "a", "b", "c"])))
        assert res.n_excluded == 2 and len(res.per_query) == 2

    def test_chance_level(self):
        rng = np.random.default_rng(6)
        types = [f"w{i // 10}" for i in range(100)]
        emb = rng.standard_normal((100, 32))
        res = mean_average_precision(build_index(emb, meta(100, types)))
        null = chance_map(types, np.random.default_rng(7), n_trials=200)
        assert null.contains(res.map)
        assert null.mean == pytest.approx(0.14, abs=0.03)
        shuffled = null_map(build_index(emb, meta(100, types)), np.random.default_rng(7), n_trials=50)
        assert shuffled.contains(res.map)
        assert shuffled.mean == pytest.approx(null.mean, abs=0.01)

    def test_input_order_invariance(self):
        rng = np.random.default_rng(8)
        emb = rng.integers(-1, 2, size=(30, 3)).astype(float) + 0.0
        emb[np.all(emb == 0, axis=1)] = [1, 0, 0]
        types = [f"w{i % 6}" for i in range(30)]
        m = meta(30, types)
        perm = rng.permutation(30)
        a = mean_average_precision(build_index(emb, m))
        b = mean_average_precision(build_index(emb[perm], [m[i] for i in perm]))
        assert a.map == b.map and a.per_query == b.per_query


class TestInversions:
    @pytest.mark.parametrize("k", range(0, 7))
    def test_exhaustive(self, k):
        for p in itertools.permutations(range(k)):
            brute = sum(1 for i in range(k) for j in range(i + 1, k) if p[i] > p[j])
            assert count_inversions(p) == brute

    def test_ties_not_counted(self):
        assert count_inversions([1, 1, 1]) == 0
        assert count_inversions([2, 1, 1]) == 2


class TestKendallTau:
    def test_identity(self):
        assert kendall_tau(strict(range(7)), weak(range(7), range(7))) == 1.0

    def test_reverse(self):
        assert kendall_tau(strict(range(7)[::-1]), weak(range(7), range(7))) == -1.0

    def test_one_adjacent_swap(self):
        assert kendall_tau(strict([0, 2, 1, 3]), weak(range(4), range(4))) == pytest.approx(2 / 3)

    @pytest.mark.parametrize("k", range(2, 7))
    def test_exhaustive_vs_brute_force(self, k):
        for p in itertools.permutations(range(k)):
            theta_pos = np.empty(k, dtype=int)
            theta_pos[list(p)] = np.arange(k)
            tau = kendall_tau(strict(p), weak(range(k), range(k)))
            delta = brute_delta(theta_pos, list(range(k)))
            assert tau == pytest.approx(1 - 2 * delta / (k * (k - 1) / 2), abs=1e-12)
            m = (1 - tau) * k * (k - 1) / 4
            assert m == pytest.approx(round(m), abs=1e-9)

    def test_random_with_ties_vs_brute_force(self):
        rng = np.random.default_rng(9)
        for _ in range(1000):
            k = int(rng.integers(2, 201))
            phi = rng.integers(0, max(1, k // 3), size=k)
            order_phi = np.lexsort((np.arange(k), phi))
            groups = np.unique(phi[order_phi], return_inverse=True)[1]
            theta = rng.permutation(k)
            theta_pos = np.empty(k, dtype=int)
            theta_pos[theta] = np.arange(k)
            tau = kendall_tau(strict(theta), weak(order_phi, groups))
            delta = brute_delta(theta_pos, phi) if k <= 60 else fast_delta(theta_pos, phi)
            assert tau == pytest.approx(1 - 2 * delta / (k * (k - 1) / 2), abs=1e-12)

    def test_tau_b_vs_textbook(self):
        rng = np.random.default_rng(10)
        for _ in range(1000):
            k = int(rng.integers(3, 60))
            phi = rng.integers(0, 5, size=k).astype(float)
            sims = rng.integers(0, 6, size=k).astype(float)
            if len(set(phi)) < 2 or len(set(sims)) < 2:
                continue
            order_phi = np.lexsort((np.arange(k), phi))
            groups = np.unique(phi[order_phi], return_inverse=True)[1]
            order_theta = np.lexsort((np.arange(k), -sims))
            r_theta = RankedList(None, order_theta, sims[order_theta], True)
            got = kendall_tau(r_theta, weak(order_phi, groups), "tau_b")
            want = textbook_tau_b(phi, -sims)
            assert got == pytest.approx(want, abs=1e-10)
            assert got == pytest.approx(stats.kendalltau(phi, -sims).statistic, abs=1e-10)

    def test_ties_in_phi_count_zero(self):
        # all PWLD tied: no discordance possible
        assert kendall_tau(strict([3, 1, 0, 2]), weak(range(4), [0, 0, 0, 0])) == 1.0

    def test_mismatched_sets(self):
        with pytest.raises(RankingContractError):
            kendall_tau(strict([0, 1, 2]), weak([0, 1, 5], [0, 1, 2]))

    def test_too_small(self):
        with pytest.raises(RankingContractError):
            kendall_tau(strict([0]), weak([0], [0]))

    def test_bad_variant(self):
        with pytest.raises(ValueError):
            kendall_tau(strict([0, 1]), weak([0, 1], [0, 1]), "spearman")


WORDS = {"sicher": "z ɪ ç ɐ", "Becher": "b ɛ ç ɐ", "Fischer": "f ɪ ʃ ɐ",
         "Lichter": "l ɪ ç t ɐ", "sitzt": "z ɪ ts t"}


class TestRankByPwld:
    def test_sicher_neighbour_order(self):
        cands = [Candidate(w, w, parse_phones(p)) for w, p in WORDS.items() if w != "sicher"]
        r = rank_by_pwld(parse_phones(WORDS["sicher"]), cands, TABLE)
        assert [cands[i].segment_id for i in r.order] == ["Becher", "Fischer", "Lichter", "sitzt"]
        assert list(r.groups) == [0, 1, 2, 3]

    def test_same_type_tied_at_front(self):
        cands = [Candidate("x1", "sicher", parse_phones(WORDS["sicher"])),
                 Candidate("x2", "Becher", parse_phones(WORDS["Becher"])),
                 Candidate("x3", "sicher", parse_phones(WORDS["sicher"]))]
        r = rank_by_pwld(parse_phones(WORDS["sicher"]), cands, TABLE)
        assert list(r.order[:2]) == [0, 2] and r.scores[0] == r.scores[1] == 0
        assert list(r.groups) == [0, 0, 1]

    def test_matrix_oracle(self):
        rng = np.random.default_rng(11)
        symbols = TABLE.symbols[:8]
        words = [tuple(rng.choice(symbols, size=int(rng.integers(1, 4)))) for _ in range(30)]
        cands = [Candidate(f"s{i:02d}", "".join(w), w) for i, w in enumerate(words)]
        D = pwld_matrix(words, TABLE)
        r = rank_by_pwld(words[0], cands, TABLE)
        want = sorted(range(30), key=lambda i: (round(D[0, i], 12), cands[i].segment_id))
        assert list(r.order) == want
        ds = np.round(D[0, want], 12)
        assert list(r.groups) == list(np.unique(ds, return_inverse=True)[1])

    def test_unknown_phone(self):
        with pytest.raises(KeyError):
            rank_by_pwld(("Q",), [Candidate("a", "a", ("a",))], TABLE)


def phon_corpus(rng, n=30):
    symbols = [s for s in TABLE.symbols if len(s) == 1][:12]
    vocab = [tuple(rng.choice(symbols, size=int(rng.integers(2, 5)))) for _ in range(8)]
    picks = rng.integers(0, len(vocab), size=n)
    return [Candidate(f"s{i:03d}", "".join(vocab[p]), vocab[p]) for i, p in enumerate(picks)]


class TestPhonologicalSimilarity:
    def test_monotone_embedding_hits_max(self):
        # embeddings whose cosine to the query falls strictly with PWLD give zero discordance
        cands = phon_corpus(np.random.default_rng(12), 20)
        D = pwld_matrix([c.phones for c in cands], TABLE)
        q = 0
        angles = D[q] / (D[q].max() + 1) * (np.pi / 2)
        emb = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        emb[q] = [1.0, 0.0]
        rep = phonological_similarity_eval(build_index(emb, cands), [q], TABLE, with_map=False)
        assert rep.per_query_tau["s000"] == 1.0

    def test_random_embeddings_within_null(self):
        rng = np.random.default_rng(13)
        cands = phon_corpus(rng, 40)
        idx = build_index(rng.standard_normal((40, 16)), cands)
        rep = phonological_similarity_eval(idx, None, TABLE)
        null = null_tau(idx, TABLE, np.random.default_rng(14), n_trials=100)
        assert null.contains(rep.tau_mean)
        # under eq5 a random order has E[tau] = fraction of candidate pairs tied in PWLD
        D = np.round(pwld_matrix([c.phones for c in cands], TABLE), 12)
        expected = []
        for q in range(40):
            d = np.delete(D[q], q)
            k = len(d)
            ties = sum(c * (c - 1) / 2 for c in np.unique(d, return_counts=True)[1])
            expected.append(ties / (k * (k - 1) / 2))
        assert null.mean == pytest.approx(np.mean(expected), abs=0.01)

    def test_random_embeddings_tau_b_null_centered(self):
        rng = np.random.default_rng(18)
        cands = phon_corpus(rng, 40)
        idx = build_index(rng.standard_normal((40, 16)), cands)
        rep = phonological_similarity_eval(idx, None, TABLE, variant="tau_b")
        null = null_tau(idx, TABLE, np.random.default_rng(19), variant="tau_b", n_trials=100)
        assert null.contains(rep.tau_mean)
        assert abs(null.mean) < 0.02

    def test_mean_of_three(self):
        rng = np.random.default_rng(15)
        cands = phon_corpus(rng, 12)
        idx = build_index(rng.standard_normal((12, 4)), cands)
        rep = phonological_similarity_eval(idx, [0, 5, 9], TABLE, with_map=False)
        assert len(rep.per_query_tau) == 3
        assert rep.tau_mean == pytest.approx(sum(rep.per_query_tau.values()) / 3)
        assert rep.variant == "eq5" and rep.std_over == "queries"

    def test_order_invariance(self):
        rng = np.random.default_rng(16)
        cands = phon_corpus(rng, 25)
        emb = rng.standard_normal((25, 6))
        perm = rng.permutation(25)
        a = phonological_similarity_eval(build_index(emb, cands), None, TABLE, variant="tau_b")
        b = phonological_similarity_eval(build_index(emb[perm], [cands[i] for i in perm]), None, TABLE,
                                         variant="tau_b")
        assert a.per_query_tau == b.per_query_tau and a.map == b.map

    def test_report_json_and_tsv(self):
        rng = np.random.default_rng(17)
        cands = phon_corpus(rng, 10)
        rep = phonological_similarity_eval(build_index(rng.standard_normal((10, 3)), cands), None, TABLE)
        assert '"variant": "eq5"' in rep.to_json()
        assert rep.tsv_row("x").split("\t")[0] == "x"
        assert -1 <= rep.tau_mean <= 1
