import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gatn import retrieval

from oracles import average_precision_exhaustive, first_hit_scan


def random_instance(seed, nq=6, ng=15, ids=4):
    rng = np.random.default_rng(seed)
    gl = rng.integers(0, ids, ng)
    gl[:ids] = np.arange(ids)  # every identity present in the gallery
    ql = rng.integers(0, ids, nq)
    dist = np.round(rng.random((nq, ng)), 2)  # coarse values create ties
    return dist, ql, gl


class TestFuse:
    def grid(self, seed=0):
        return np.random.default_rng(seed).normal(size=(8, 4, 24))

    def test_k0_is_global(self):
        g = self.grid()
        out = retrieval.fuse_features(g, [], None)
        np.testing.assert_array_equal(out, g.reshape(-1) / np.linalg.norm(g.reshape(-1)))

    def test_replaced_cells(self):
        g = self.grid()
        feats = np.random.default_rng(1).normal(size=(2, 24))
        out = retrieval.fuse_features(g, [(0, 0), (7, 3)], feats)
        ref = g.copy()
        ref[0, 0], ref[7, 3] = feats
        np.testing.assert_allclose(out, ref.reshape(-1) / np.linalg.norm(ref), atol=1e-12)
        assert abs(np.linalg.norm(out) - 1) <= 1e-12

    def test_input_not_mutated(self):
        g = self.grid()
        before = g.copy()
        retrieval.fuse_features(g, [(1, 1)], np.ones((1, 24)))
        np.testing.assert_array_equal(g, before)

    def test_match_norm_preserves_cell_norm(self):
        g = self.grid()
        out = retrieval.fuse_features(g, [(2, 1)], np.full((1, 24), 5.0), match_norm=True)
        cells = out.reshape(8, 4, 24) * np.linalg.norm(g)
        assert np.linalg.norm(cells[2, 1]) == pytest.approx(np.linalg.norm(g[2, 1]))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            retrieval.fuse_features(self.grid(), [(0, 0)], np.ones((1, 23)))

    def test_out_of_grid(self):
        with pytest.raises(ValueError):
            retrieval.fuse_features(self.grid(), [(8, 0)], np.ones((1, 24)))


class TestRanking:
    def test_stable_ties(self):
        r = retrieval.rank_gallery(np.array([[0.5, 0.1, 0.5, 0.1]]))[0]
        assert r.order.tolist() == [1, 3, 0, 2]

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            retrieval.rank_gallery(np.array([[0.1, np.nan]]))

    @given(st.integers(0, 2**32 - 1), st.sampled_from([np.exp, np.sqrt, lambda d: 7 * d + 2, np.log1p]))
    def test_monotone_invariance(self, seed, fn):
        dist, _, _ = random_instance(seed)
        for a, b in zip(retrieval.rank_gallery(dist), retrieval.rank_gallery(fn(dist))):
            assert np.array_equal(a.order, b.order)

    def test_pairwise_distances(self):
        rng = np.random.default_rng(0)
        q, g = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
        ref = np.array([[np.linalg.norm(a - b) for b in g] for a in q])
        np.testing.assert_allclose(retrieval.pairwise_distances(q, g), ref, atol=1e-12)


class TestCMC:
    def test_fig2_rank4(self):
        dist = np.array([[0.1, 0.2, 0.3, 0.4, 0.5]])
        c = retrieval.cmc(retrieval.rank_gallery(dist), [1], [0, 2, 3, 1, 4], max_rank=5)
        assert c[0] == 0.0 and c[2] == 0.0 and c[3] == 1.0

    def test_perfect(self):
        dist = np.array([[0.0, 1.0], [1.0, 0.0]])
        c = retrieval.cmc(retrieval.rank_gallery(dist), [0, 1], [0, 1], max_rank=2)
        assert c.tolist() == [1.0, 1.0]

    def test_missing_identity(self):
        with pytest.raises(retrieval.ProtocolError):
            retrieval.cmc(retrieval.rank_gallery(np.zeros((1, 2))), [5], [0, 1])

    @pytest.mark.parametrize("seed", range(25))
    def test_matches_scan(self, seed):
        dist, ql, gl = random_instance(seed)
        ranked = retrieval.rank_gallery(dist)
        first = np.array([first_hit_scan(dist[i], ql[i], gl) for i in range(len(ql))])
        assert np.array_equal(retrieval.first_hit_ranks(ranked, ql, gl), first)
        c = retrieval.cmc(ranked, ql, gl, max_rank=15)
        assert np.all(np.diff(c) >= 0) and c[-1] == 1.0
        assert c[0] == np.mean(first == 1)


class TestMAP:
    def test_two_relevant(self):
        dist = np.array([[0.1, 0.2, 0.3]])
        ap = retrieval.average_precisions(retrieval.rank_gallery(dist), [1], [1, 0, 1])
        assert ap[0] == pytest.approx((1 + 2 / 3) / 2, abs=1e-12)

    @pytest.mark.parametrize("seed", range(25))
    def test_matches_exhaustive(self, seed):
        dist, ql, gl = random_instance(seed)
        aps = retrieval.average_precisions(retrieval.rank_gallery(dist), ql, gl)
        ref = [average_precision_exhaustive(dist[i], ql[i], gl) for i in range(len(ql))]
        np.testing.assert_allclose(aps, ref, atol=1e-12)

    def test_one_iff_relevant_first(self):
        dist = np.array([[0.1, 0.2, 0.3, 0.4]])
        assert retrieval.mean_average_precision(retrieval.rank_gallery(dist), [1], [1, 1, 0, 0]) == 1.0
        assert retrieval.mean_average_precision(retrieval.rank_gallery(dist), [1], [1, 0, 1, 0]) < 1.0

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1))
    def test_bounds(self, seed):
        dist, ql, gl = random_instance(seed)
        m = retrieval.mean_average_precision(retrieval.rank_gallery(dist), ql, gl)
        assert 0.0 < m <= 1.0


class TestReport:
    def test_text_and_csv(self):
        rng = np.random.default_rng(0)
        q = rng.normal(size=(3, 4))
        g = np.concatenate([q + 0.01, rng.normal(size=(2, 4))])
        rep = retrieval.evaluate(q, g, [0, 1, 2], [0, 1, 2, 3, 4], query_ids=["a", "b", "c"])
        assert rep.rank(1) == 1.0 and rep.mAP == 1.0
        text = rep.text()
        for key in ("rank1", "rank5", "rank10", "rank20", "mAP", "queries = 3", "gallery = 5"):
            assert key in text
        assert rep.csv_rows() == [("a", 1, 1.0), ("b", 1, 1.0), ("c", 1, 1.0)]
