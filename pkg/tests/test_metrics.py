"""Scalar metrics, distance matrices, aggregation, ranking math, and PCA."""

import csv

import numpy as np
import pytest
import torch

from ayce.errors import (
    DimensionMismatchError,
    MissingTruthError,
    ShapeError,
    TooFewTracksError,
    ZeroVectorError,
)
from ayce.metrics import (
    RankingTable,
    aggregate,
    cosine_metric,
    distance_matrix,
    euclidean,
    get_metric,
    intra_inter_report,
    mrr,
    pair_distance_torch,
    pca_2d,
    write_pca_csv,
)


# ---------------------------------------------------------------------------
# scalar metrics


class TestCosineMetric:
    def test_identical_is_zero(self):
        v = np.array([1.0, 2.0, 3.0])
        assert cosine_metric(v, v) == 0.0
        assert cosine_metric(v, 2.5 * v) == 0.0

    def test_orthogonal_is_one(self):
        assert cosine_metric([1.0, 0.0], [0.0, 1.0]) == 1.0

    def test_antipodal_is_two(self):
        v = np.array([0.3, -0.7, 2.0])
        assert cosine_metric(v, -v) == 2.0

    def test_range(self):
        rng = np.random.default_rng(11)
        for _ in range(500):
            u = rng.normal(size=8)
            v = rng.normal(size=8)
            d = cosine_metric(u, v)
            assert 0.0 <= d <= 2.0

    def test_symmetry_and_scale_invariance(self):
        rng = np.random.default_rng(12)
        for _ in range(500):
            u = rng.normal(size=16)
            v = rng.normal(size=16)
            s = rng.uniform(0.1, 10.0)
            assert abs(cosine_metric(u, v) - cosine_metric(v, u)) < 1e-12
            assert abs(cosine_metric(s * u, v) - cosine_metric(u, v)) < 1e-12

    def test_zero_vector_raises(self):
        with pytest.raises(ZeroVectorError):
            cosine_metric(np.zeros(4), np.ones(4))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            cosine_metric(np.ones(3), np.ones(4))


class TestEuclidean:
    def test_hand_values(self):
        assert euclidean([0.0, 0.0], [3.0, 4.0]) == 5.0
        assert euclidean([1.0, 1.0], [1.0, 1.0]) == 0.0

    def test_single_coordinate_is_exact(self):
        u = np.zeros(256)
        v = np.zeros(256)
        v[17] = 0.2
        assert euclidean(u, v) == 0.2

    def test_symmetry_nonnegative(self):
        rng = np.random.default_rng(13)
        for _ in range(300):
            u = rng.normal(size=10)
            v = rng.normal(size=10)
            assert euclidean(u, v) == euclidean(v, u)
            assert euclidean(u, v) >= 0.0


def test_get_metric_resolution():
    assert get_metric("cosine") is cosine_metric
    assert get_metric("cosine_metric") is cosine_metric
    assert get_metric("euclidean") is euclidean
    assert get_metric(euclidean) is euclidean
    with pytest.raises(KeyError):
        get_metric("manhattan")


def test_pair_distance_torch_matches_numpy():
    rng = np.random.default_rng(14)
    for _ in range(200):
        u = rng.normal(size=12)
        v = rng.normal(size=12)
        ut = torch.tensor(u, dtype=torch.float64)
        vt = torch.tensor(v, dtype=torch.float64)
        for name, fn in (("cosine", cosine_metric), ("euclidean", euclidean)):
            got = float(pair_distance_torch(ut, vt, name))
            assert got == pytest.approx(fn(u, v), abs=1e-12)


def test_pair_distance_torch_differentiable():
    u = torch.tensor([0.3, -0.2, 1.1], dtype=torch.float64, requires_grad=True)
    v = torch.tensor([1.0, 0.5, -0.4], dtype=torch.float64)
    for name in ("cosine", "euclidean"):
        d = pair_distance_torch(u, v, name)
        (g,) = torch.autograd.grad(d, u, retain_graph=False)
        assert torch.isfinite(g).all()
        assert g.abs().sum() > 0


# ---------------------------------------------------------------------------
# distance matrix + aggregation


def test_distance_matrix_equals_scalar_enumeration():
    rng = np.random.default_rng(15)
    for _ in range(100):
        r = rng.choice([1, 3])
        c = rng.choice([1, 3])
        V = rng.normal(size=(r, 8))
        T = rng.normal(size=(c, 8))
        for name, fn in (("cosine", cosine_metric), ("euclidean", euclidean)):
            D = distance_matrix(V, T, name)
            assert D.shape == (r, c)
            for m in range(r):
                for n in range(c):
                    assert D[m, n] == fn(V[m], T[n])


def test_distance_matrix_accepts_1d():
    D = distance_matrix([0.0, 0.0], [3.0, 4.0], "euclidean")
    assert D.shape == (1, 1)
    assert D[0, 0] == 5.0


def test_distance_matrix_rejects_bad_arity():
    V = np.zeros((2, 4))
    T = np.ones((3, 4))
    with pytest.raises(ShapeError):
        distance_matrix(V, T, "euclidean")


def test_distance_matrix_rejects_width_mismatch():
    with pytest.raises(DimensionMismatchError):
        distance_matrix(np.ones((3, 4)), np.ones((3, 5)), "euclidean")


def test_aggregate_exact():
    D = np.array([[4.0, 2.0, 9.0], [1.0, 8.0, 6.0], [3.0, 5.0, 7.0]])
    assert aggregate(D, "min") == 1.0
    assert aggregate(D, "mean") == 5.0
    assert aggregate(D, "mean") == np.mean(D)


def test_aggregate_errors():
    with pytest.raises(ShapeError):
        aggregate(np.zeros((0, 3)), "min")
    with pytest.raises(ValueError):
        aggregate(np.ones((2, 2)), "median")


# ---------------------------------------------------------------------------
# intra/inter separation report


def test_intra_inter_exact_fixture():
    # two tracks, three captions each, on parallel lines 5 apart (euclidean)
    embs = np.array([
        [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]],
        [[0.0, 5.0], [1.0, 5.0], [2.0, 5.0]],
    ])
    rep = intra_inter_report(embs, metric="euclidean")
    # within each track the pair distances are 1, 2, 1
    assert rep.d_intra_mean == np.mean([(1.0 + 2.0 + 1.0) / 3] * 2)
    inter = [euclidean(embs[0, a], embs[1, b]) for a in range(3) for b in range(3)]
    assert rep.d_inter_mean == np.mean(inter)
    assert rep.d_intra_var == np.var([1.0, 2.0, 1.0] * 2)
    assert rep.d_inter_var == np.var(inter)
    assert rep.metric == "euclidean"


def test_intra_inter_needs_two_tracks():
    with pytest.raises(TooFewTracksError):
        intra_inter_report(np.zeros((1, 3, 4)) + np.eye(3, 4), metric="euclidean")


def test_intra_inter_shape_check():
    with pytest.raises(ShapeError):
        intra_inter_report(np.zeros((2, 4, 8)), metric="euclidean")


# ---------------------------------------------------------------------------
# ranking table + MRR


def test_ranking_table_identity_truth():
    orders = {"a": ["b", "a", "c"], "b": ["b", "c", "a"], "c": ["a", "b", "c"]}
    table = RankingTable.from_orders(orders)
    assert table.rank_of_truth == {"a": 2, "b": 1, "c": 3}


def test_ranking_table_explicit_truth():
    orders = {"q1": ["x", "y"], "q2": ["y", "x"]}
    table = RankingTable.from_orders(orders, truth={"q1": "y", "q2": "y"})
    assert table.rank_of_truth == {"q1": 2, "q2": 1}


def test_ranking_table_rejects_duplicates():
    with pytest.raises(ShapeError):
        RankingTable.from_orders({"a": ["x", "x"]})


def test_ranking_table_rejects_differing_candidate_sets():
    with pytest.raises(ShapeError):
        RankingTable.from_orders({"a": ["a", "b"], "b": ["a", "c"]})


def test_ranking_table_missing_truth():
    with pytest.raises(MissingTruthError):
        RankingTable.from_orders({"q": ["x", "y"]})


def test_mrr_hand_values():
    table = RankingTable(orders={"a": [], "b": [], "c": []},
                         rank_of_truth={"a": 1, "b": 2, "c": 4})
    assert mrr(table) == (1.0 + 0.5 + 0.25) / 3


def test_mrr_perfect():
    orders = {str(i): [str(i)] + [str(j) for j in range(5) if j != i]
              for i in range(5)}
    assert mrr(RankingTable.from_orders(orders)) == 1.0


def test_mrr_empty_table():
    with pytest.raises(MissingTruthError):
        mrr(RankingTable(orders={}, rank_of_truth={}))


# ---------------------------------------------------------------------------
# PCA


def test_pca_axis_aligned_fixture():
    pts = np.array([[3.0, 1.0], [-3.0, -1.0], [3.0, -1.0], [-3.0, 1.0]])
    res = pca_2d(pts)
    assert not res.degenerate
    # principal directions are the coordinate axes; sign fix keeps +x/+y
    np.testing.assert_allclose(res.coords, pts, atol=1e-12)
    np.testing.assert_allclose(res.explained_variance, [9.0, 1.0], atol=1e-12)


def test_pca_collinear_is_degenerate():
    pts = np.array([[-2.0, 0.0], [0.0, 0.0], [2.0, 0.0], [4.0, 0.0]])
    res = pca_2d(pts)
    assert res.degenerate
    np.testing.assert_allclose(res.coords[:, 0], [-3.0, -1.0, 1.0, 3.0], atol=1e-12)
    np.testing.assert_array_equal(res.coords[:, 1], np.zeros(4))
    assert res.explained_variance[1] == 0.0


def test_pca_centering_and_order():
    rng = np.random.default_rng(16)
    pts = rng.normal(size=(40, 6)) * np.array([5.0, 2.0, 1.0, 1.0, 0.5, 0.1])
    res = pca_2d(pts)
    np.testing.assert_allclose(res.coords.mean(axis=0), [0.0, 0.0], atol=1e-10)
    assert res.explained_variance[0] >= res.explained_variance[1]


def test_pca_shape_checks():
    with pytest.raises(ShapeError):
        pca_2d(np.zeros((2, 5)))
    with pytest.raises(ShapeError):
        pca_2d(np.zeros((5, 1)))


def test_pca_csv_roundtrip(tmp_path):
    ids = ["t0", "t1", "t2"]
    coords = np.array([[0.125, -2.5], [1.0 / 3.0, 0.0], [7.77, 1e-17]])
    path = tmp_path / "pca.csv"
    write_pca_csv(ids, coords, path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["id", "pc1", "pc2"]
    for (tid, p1, p2), want_id, want in zip(rows[1:], ids, coords):
        assert tid == want_id
        assert float(p1) == want[0]
        assert float(p2) == want[1]
