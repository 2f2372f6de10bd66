"""Window re-ranking, k-reciprocal re-ranking and pipeline tests.

The k-reciprocal comparison uses a deliberately naive dict/set oracle so the
vectorised implementation is checked against an independent reading of the
procedure.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import random_bundle
from rvrank.reranker import (
    RankedList,
    RankingConfig,
    kreciprocal_rerank,
    read_ranked_csv,
    rerank_pipeline,
    window_rerank,
    write_ranked_csv,
)
from rvrank.retrieval import build_eval_pairs, candidates_from_pairs
from rvrank.verifier import VerifierModel


class TestRankingConfig:
    def test_defaults_are_already_consistent(self):
        cfg = RankingConfig()
        assert cfg.clamped() == cfg

    def test_window_larger_than_depth_is_clamped(self):
        with pytest.warns(UserWarning, match="clamping L"):
            cfg = RankingConfig(L=15, Q=10).clamped()
        assert (cfg.L, cfg.Q) == (10, 10)

    def test_depth_larger_than_candidates_is_clamped(self):
        with pytest.warns(UserWarning, match="clamping Q"):
            cfg = RankingConfig(P=5, L=3, Q=9).clamped()
        assert (cfg.P, cfg.L, cfg.Q) == (5, 3, 5)

    def test_cascade_clamps_both(self):
        with pytest.warns(UserWarning):
            cfg = RankingConfig(P=4, L=8, Q=9).clamped()
        assert (cfg.L, cfg.Q) == (4, 4)

    @pytest.mark.parametrize("bad", [dict(P=0), dict(L=-1), dict(k1=0),
                                     dict(lam=1.5), dict(margin=-0.1)])
    def test_invalid_values_raise(self, bad):
        with pytest.raises(ValueError):
            RankingConfig(**bad).clamped()


class TestWindowRerank:
    def test_four_entry_example(self):
        # Last-ranked entry scores best but the window only reaches it after
        # emitting the first three: [a, b, c, d] -> [b, c, d, a].
        scores = {0: 0.1, 1: 0.9, 2: 0.5, 3: 0.8}
        ranked = window_rerank([0, 1, 2, 3], scores, L=2, Q=4)
        assert ranked.order == [1, 2, 3, 0]
        assert ranked.provenance == "window"

    def test_width_one_is_the_identity(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            n = int(rng.integers(1, 15))
            order = rng.permutation(50)[:n].tolist()
            scores = {g: float(rng.normal()) for g in order}
            assert window_rerank(order, scores, 1, max(1, n)).order == order

    def test_full_width_sorts_the_depth(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            n = int(rng.integers(2, 12))
            order = list(range(n))
            scores = {g: float(rng.normal()) for g in order}
            got = window_rerank(order, scores, n, n).order
            want = sorted(order, key=lambda g: (-scores[g], order.index(g)))
            assert got == want

    def test_suffix_beyond_depth_is_untouched(self):
        rng = np.random.default_rng(7)
        order = rng.permutation(30).tolist()
        scores = {g: float(rng.normal()) for g in order}
        ranked = window_rerank(order, scores, 3, 10)
        assert ranked.order[10:] == order[10:]
        assert sorted(ranked.order[:10]) == sorted(order[:10])

    def test_ties_keep_the_better_retrieval_rank(self):
        ranked = window_rerank([4, 9, 2], {4: 1.0, 9: 1.0, 2: 1.0}, 2, 3)
        assert ranked.order == [4, 9, 2]

    def test_decreasing_scores_change_nothing(self):
        order = list(range(8))
        scores = {g: -float(g) for g in order}
        for width in range(1, 9):
            assert window_rerank(order, scores, width, 8).order == order

    def test_promotion_is_bounded_by_the_window(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            n = int(rng.integers(2, 25))
            width = int(rng.integers(1, n + 1))
            order = list(rng.permutation(100)[:n])
            scores = {int(g): float(rng.normal()) for g in order}
            got = window_rerank([int(g) for g in order], scores, width, n).order
            for new_pos, g in enumerate(got, start=1):
                old_pos = order.index(g) + 1
                assert new_pos >= max(1, old_pos - width + 1)

    def test_top_sets_agree_once_the_window_covers_the_gap(self):
        # With depth Q, every L >= Q - t + 1 puts the same t entries on top.
        rng = np.random.default_rng(9)
        q, t = 20, 10
        for _ in range(30):
            order = list(range(q + 5))
            scores = {g: float(rng.normal()) for g in order}
            tops = [frozenset(window_rerank(order, scores, width, q).order[:t])
                    for width in range(q - t + 1, q + 1)]
            assert len(set(tops)) == 1

    def test_missing_score_raises(self):
        with pytest.raises(ValueError, match="no score"):
            window_rerank([0, 1], {0: 1.0}, 2, 2)

    def test_sequence_and_callable_scorers_match_mapping(self):
        order = [3, 0, 2, 1]
        table = [0.3, 0.1, 0.9, 0.2]
        want = window_rerank(order, {i: table[i] for i in order}, 2, 4).order
        assert window_rerank(order, table, 2, 4).order == want
        assert window_rerank(order, lambda g: table[g], 2, 4).order == want

    def test_invalid_sizes_raise(self):
        with pytest.raises(ValueError, match="L"):
            window_rerank([0], {0: 0.0}, 0, 1)
        with pytest.raises(ValueError, match="Q"):
            window_rerank([0], {0: 0.0}, 3, 2)


def oracle_kreciprocal(dist, num_queries, k1, k2, lam):
    """Plain-python reference: sets and dicts, no vectorisation."""
    n = len(dist)
    d = [[float(dist[i][j]) for j in range(n)] for i in range(n)]
    for i in range(n):
        d[i][i] = 0.0
    k1 = min(k1, n - 1)
    k2 = min(k2, n)

    def head(i, count):
        return sorted(range(n), key=lambda j: (d[i][j], j))[:count]

    def mutual(i, k):
        return [j for j in head(i, k + 1) if i in head(j, k + 1)]

    half = int(np.around(k1 / 2))
    weight_rows = []
    for i in range(n):
        base = mutual(i, k1)
        members = set(base)
        for j in base:
            cand = mutual(j, half)
            if len(set(cand) & set(base)) > (2.0 / 3.0) * len(cand):
                members |= set(cand)
        raw = {j: math.exp(-d[i][j]) for j in members}
        total = sum(raw.values())
        weight_rows.append({j: v / total for j, v in raw.items()})

    if k2 > 1:
        expanded = []
        for i in range(n):
            rows = [weight_rows[r] for r in head(i, k2)]
            keys = set().union(*(r.keys() for r in rows))
            expanded.append({j: sum(r.get(j, 0.0) for r in rows) / len(rows)
                             for j in keys})
        weight_rows = expanded

    out = [[0.0] * (n - num_queries) for _ in range(num_queries)]
    for qi in range(num_queries):
        for col, gi in enumerate(range(num_queries, n)):
            s = sum(min(v, weight_rows[gi].get(j, 0.0))
                    for j, v in weight_rows[qi].items())
            jacc = 1.0 - s / (2.0 - s)
            out[qi][col] = lam * d[qi][gi] + (1.0 - lam) * jacc
    return np.array(out)


def point_cloud_distances(rng, n, dim=3):
    pts = rng.normal(size=(n, dim))
    diff = pts[:, None, :] - pts[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=2))


class TestKReciprocal:
    def test_matches_the_naive_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(25):
            n = int(rng.integers(5, 9))
            nq = int(rng.integers(1, n - 2))
            k1 = int(rng.integers(2, 5))
            k2 = int(rng.integers(1, 4))
            lam = float(rng.uniform(0, 1))
            dist = point_cloud_distances(rng, n)
            got = kreciprocal_rerank(dist, nq, k1=k1, k2=k2, lam=lam)
            want = oracle_kreciprocal(dist, nq, k1, k2, lam)
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_full_blend_returns_the_original_block(self):
        rng = np.random.default_rng(14)
        dist = point_cloud_distances(rng, 10)
        got = kreciprocal_rerank(dist, 4, k1=3, k2=2, lam=1.0)
        np.testing.assert_array_equal(got, dist[:4, 4:])

    def test_cyclic_instance_has_no_reciprocal_pairs(self):
        # d(i, j) = (j - i) mod n: i's nearest other is i+1, but i+1 never
        # reciprocates, so every neighbourhood collapses to the image itself
        # and the overlap distance saturates at 1 for all pairs.
        n = 6
        dist = np.array([[(j - i) % n for j in range(n)] for i in range(n)],
                        dtype=np.float64)
        jacc = kreciprocal_rerank(dist, 2, k1=1, k2=1, lam=0.0)
        np.testing.assert_array_equal(jacc, np.ones((2, 4)))
        blended = kreciprocal_rerank(dist, 2, k1=1, k2=1, lam=0.3)
        for qi in range(2):
            got = np.argsort(blended[qi], kind="stable")
            want = np.argsort(dist[qi, 2:], kind="stable")
            np.testing.assert_array_equal(got, want)

    def test_non_square_matrix_raises(self):
        with pytest.raises(ValueError, match="square"):
            kreciprocal_rerank(np.zeros((3, 4)), 1)

    def test_nonzero_diagonal_raises(self):
        dist = np.ones((4, 4))
        with pytest.raises(ValueError, match="diagonal"):
            kreciprocal_rerank(dist, 1)

    def test_bad_query_count_raises(self):
        rng = np.random.default_rng(15)
        dist = point_cloud_distances(rng, 4)
        for bad in (0, 4, 7):
            with pytest.raises(ValueError, match="num_queries"):
                kreciprocal_rerank(dist, bad)

    def test_oversized_neighbourhoods_warn_and_clamp(self):
        rng = np.random.default_rng(16)
        dist = point_cloud_distances(rng, 5)
        with pytest.warns(UserWarning, match="k1"):
            a = kreciprocal_rerank(dist, 2, k1=50, k2=1)
        b = kreciprocal_rerank(dist, 2, k1=4, k2=1)
        np.testing.assert_array_equal(a, b)
        with pytest.warns(UserWarning, match="k2"):
            kreciprocal_rerank(dist, 2, k1=2, k2=50)


class CountingScorer:
    """Callable scorer that tallies invocations per query index."""

    def __init__(self, rng):
        self.table = {}
        self.rng = rng
        self.calls = {}

    def __call__(self, query, cand):
        self.calls[query.index] = self.calls.get(query.index, 0) + 1
        key = (query.index, cand.index)
        if key not in self.table:
            self.table[key] = float(self.rng.normal())
        return self.table[key]


class TestPipeline:
    def test_no_stages_reproduces_retrieval(self):
        rng = np.random.default_rng(23)
        bundle = random_bundle(rng, n_query=4, n_gallery=15)
        ranked = rerank_pipeline(bundle, None, RankingConfig(), stages=())
        pairs = build_eval_pairs(bundle, "Q", "G", num_candidates=15)
        by_query = {c.query_index: c for c in candidates_from_pairs(pairs)}
        for rl in ranked:
            assert rl.provenance == "retrieval"
            want = [e.gallery_index for e in by_query[rl.query_index].entries]
            assert rl.order == want

    def test_provenance_labels_per_stage_combination(self):
        rng = np.random.default_rng(24)
        bundle = random_bundle(rng, n_query=3, n_gallery=12)
        model = VerifierModel.initialize(bundle.dims, 6, 6, seed=0)
        cfg = RankingConfig(P=12, L=4, Q=8, k1=3, k2=2)
        combos = {(): "retrieval",
                  ("kreciprocal",): "kreciprocal",
                  ("window",): "window",
                  ("kreciprocal", "window"): "composed"}
        for stages, want in combos.items():
            ranked = rerank_pipeline(bundle, model, cfg, stages=stages)
            assert {rl.provenance for rl in ranked} == {want}

    def test_every_order_is_a_permutation_of_the_eligible_gallery(self):
        rng = np.random.default_rng(25)
        bundle = random_bundle(rng, n_query=5, n_gallery=14)
        model = VerifierModel.initialize(bundle.dims, 6, 6, seed=1)
        cfg = RankingConfig(P=14, L=3, Q=9, k1=4, k2=2)
        ranked = rerank_pipeline(bundle, model, cfg)
        for rl, query in zip(ranked, bundle.splits["Q"]):
            eligible = [g.index for g in bundle.splits["G"]
                        if not (g.identity == query.identity
                                and g.cloth == query.cloth)]
            assert sorted(rl.order) == sorted(eligible)

    def test_unknown_stage_raises(self):
        rng = np.random.default_rng(26)
        bundle = random_bundle(rng)
        with pytest.raises(ValueError, match="stage"):
            rerank_pipeline(bundle, None, RankingConfig(), stages=("polish",))

    def test_window_without_scorer_raises(self):
        rng = np.random.default_rng(27)
        bundle = random_bundle(rng)
        with pytest.raises(ValueError, match="scorer"):
            rerank_pipeline(bundle, None, RankingConfig(), stages=("window",))

    def test_scorer_calls_equal_window_depth_per_query(self):
        rng = np.random.default_rng(28)
        bundle = random_bundle(rng, n_query=5, n_gallery=30, n_identities=6)
        scorer = CountingScorer(np.random.default_rng(1))
        cfg = RankingConfig(P=30, L=5, Q=12)
        rerank_pipeline(bundle, scorer, cfg, stages=("window",))
        for query in bundle.splits["Q"]:
            eligible = sum(1 for g in bundle.splits["G"]
                           if not (g.identity == query.identity
                                   and g.cloth == query.cloth))
            assert scorer.calls[query.index] == min(12, eligible)

    def test_stale_candidates_name_the_query(self):
        rng = np.random.default_rng(29)
        bundle = random_bundle(rng, n_query=3, n_gallery=10)
        pairs = build_eval_pairs(bundle, "Q", "G", num_candidates=5)
        cands = candidates_from_pairs(pairs)
        entries = cands[1].entries
        entries[0], entries[1] = entries[1], entries[0]
        with pytest.raises(ValueError, match="query 1"):
            rerank_pipeline(bundle, None, RankingConfig(P=5, L=2, Q=4),
                            stages=(), candidates=cands)

    def test_matching_candidates_pass_the_cross_check(self):
        rng = np.random.default_rng(30)
        bundle = random_bundle(rng, n_query=3, n_gallery=10)
        pairs = build_eval_pairs(bundle, "Q", "G", num_candidates=5)
        cands = candidates_from_pairs(pairs)
        ranked = rerank_pipeline(bundle, None, RankingConfig(P=5, L=2, Q=4),
                                 stages=(), candidates=cands)
        assert len(ranked) == 3

    def test_scorer_failure_names_the_query(self):
        rng = np.random.default_rng(31)
        bundle = random_bundle(rng, n_query=3, n_gallery=8)

        def flaky(query, cand):
            if query.index == 2:
                raise KeyError("boom")
            return 0.0

        with pytest.raises(RuntimeError, match="query 2"):
            rerank_pipeline(bundle, flaky, RankingConfig(P=8, L=2, Q=4),
                            stages=("window",))

    def test_thread_count_does_not_change_results(self, monkeypatch):
        rng = np.random.default_rng(32)
        bundle = random_bundle(rng, n_query=6, n_gallery=18)
        model = VerifierModel.initialize(bundle.dims, 6, 6, seed=2)
        cfg = RankingConfig(P=18, L=4, Q=10, k1=4, k2=2)
        monkeypatch.delenv("RVRANK_THREADS", raising=False)
        serial = rerank_pipeline(bundle, model, cfg)
        monkeypatch.setenv("RVRANK_THREADS", "4")
        threaded = rerank_pipeline(bundle, model, cfg)
        assert [rl.order for rl in serial] == [rl.order for rl in threaded]

    def test_invalid_thread_setting_warns_and_runs(self, monkeypatch):
        rng = np.random.default_rng(33)
        bundle = random_bundle(rng, n_query=2, n_gallery=8)
        model = VerifierModel.initialize(bundle.dims, 6, 6, seed=3)
        monkeypatch.setenv("RVRANK_THREADS", "many")
        with pytest.warns(UserWarning, match="RVRANK_THREADS"):
            ranked = rerank_pipeline(bundle, model,
                                     RankingConfig(P=8, L=2, Q=4),
                                     stages=("window",))
        assert len(ranked) == 2

    def test_model_and_equivalent_callable_agree(self):
        rng = np.random.default_rng(34)
        bundle = random_bundle(rng, n_query=4, n_gallery=12)
        model = VerifierModel.initialize(bundle.dims, 6, 6, seed=4)
        from rvrank.verifier import pair_score
        cfg = RankingConfig(P=12, L=3, Q=8)
        via_model = rerank_pipeline(bundle, model, cfg, stages=("window",))
        via_callable = rerank_pipeline(
            bundle, lambda q, g: pair_score(model, q, g), cfg,
            stages=("window",))
        assert [rl.order for rl in via_model] == \
               [rl.order for rl in via_callable]


class TestRankedCsv:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(43)
        bundle = random_bundle(rng, n_query=3, n_gallery=9)
        model = VerifierModel.initialize(bundle.dims, 6, 6, seed=5)
        ranked = rerank_pipeline(bundle, model,
                                 RankingConfig(P=9, L=3, Q=6, k1=3, k2=2))
        path = tmp_path / "ranked.csv"
        write_ranked_csv(path, ranked, config_comment="config: {}")
        back = read_ranked_csv(path)
        assert [(rl.query_index, rl.order, rl.provenance) for rl in back] == \
               [(rl.query_index, rl.order, rl.provenance) for rl in ranked]

    def test_sparse_ranks_raise(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("query_index,rank,gallery_index,stage_provenance\n"
                        "0,1,5,window\n0,3,6,window\n")
        with pytest.raises(ValueError, match="dense"):
            read_ranked_csv(path)

    def test_mixed_provenance_raises(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("query_index,rank,gallery_index,stage_provenance\n"
                        "0,1,5,window\n0,2,6,retrieval\n")
        with pytest.raises(ValueError):
            read_ranked_csv(path)

    def test_missing_header_raises(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("0,1,5,window\n")
        with pytest.raises(ValueError, match="header"):
            read_ranked_csv(path)
