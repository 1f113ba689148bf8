"""Distance, aggregation, ranking, and analysis primitives.

Everything here is pure numpy on CPU, except a small torch twin of the
scalar metrics that the trainers differentiate through. The distance matrix
is built entry by entry with the scalar metric so its values match the
scalar functions exactly (no vectorized reassociation), which the training
losses and the tests rely on.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import (
    DimensionMismatchError,
    MissingTruthError,
    ShapeError,
    TooFewTracksError,
    ZeroVectorError,
)


# ---------------------------------------------------------------------------
# scalar metrics


def cosine_metric(u, v):
    """One minus cosine similarity, shifted into [0, 2].

    Identical directions give 0, orthogonal 1, opposite 2. Undefined (raises)
    for zero-norm inputs.
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise DimensionMismatchError(f"{u.shape} vs {v.shape}")
    nu = float(np.sqrt(u @ u))
    nv = float(np.sqrt(v @ v))
    if nu == 0.0 or nv == 0.0:
        raise ZeroVectorError("cosine metric is undefined for zero vectors")
    sim = float(u @ v) / (nu * nv)
    # rounding can push |sim| a hair past 1; clamp so the range contract holds
    sim = max(-1.0, min(1.0, sim))
    return 1.0 + (-sim)


def euclidean(u, v):
    """Plain L2 distance."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise DimensionMismatchError(f"{u.shape} vs {v.shape}")
    diff = u - v
    return float(np.sqrt(diff @ diff))


METRICS = {
    "cosine": cosine_metric,
    "cosine_metric": cosine_metric,
    "euclidean": euclidean,
}


def get_metric(metric):
    """Resolve a metric name to its function; callables pass through."""
    if callable(metric):
        return metric
    try:
        return METRICS[metric]
    except KeyError:
        raise KeyError(f"unknown metric {metric!r}; choose from {sorted(set(METRICS))}")


def pair_distance_torch(u, v, metric="cosine"):
    """Differentiable scalar distance between two 1-d tensors.

    Mirrors the numpy metrics above operation for operation so values agree
    to rounding; gradients flow through torch.
    """
    if metric in ("cosine", "cosine_metric") or metric is cosine_metric:
        nu = torch.sqrt(u @ u)
        nv = torch.sqrt(v @ v)
        sim = (u @ v) / (nu * nv)
        sim = torch.clamp(sim, -1.0, 1.0)
        return 1.0 + (-sim)
    if metric == "euclidean" or metric is euclidean:
        diff = u - v
        return torch.sqrt(diff @ diff)
    raise KeyError(f"unknown metric {metric!r}; choose from {sorted(set(METRICS))}")


# ---------------------------------------------------------------------------
# distance matrix and aggregation


def distance_matrix(V, T, metric):
    """Pairwise distances between a visual embedding set and a text embedding
    set: entry (m, n) = metric(V_m, T_n).

    V is (r, E) and T is (c, E) with r, c in {1, 3} (the scalar/triple output
    arities of the two branches).
    """
    fn = get_metric(metric)
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    T = np.atleast_2d(np.asarray(T, dtype=np.float64))
    r, c = V.shape[0], T.shape[0]
    if r not in (1, 3) or c not in (1, 3):
        raise ShapeError(f"arities must be 1 or 3, got {r}x{c}")
    if V.shape[1] != T.shape[1]:
        raise DimensionMismatchError(f"{V.shape} vs {T.shape}")
    out = np.empty((r, c), dtype=np.float64)
    for m in range(r):
        for n in range(c):
            out[m, n] = fn(V[m], T[n])
    return out


def aggregate(D, mode):
    """Collapse a distance matrix to a scalar: its minimum or its mean."""
    D = np.asarray(D, dtype=np.float64)
    if D.size == 0:
        raise ShapeError("cannot aggregate an empty matrix")
    if mode == "min":
        return float(np.min(D))
    if mode == "mean":
        return float(np.mean(D))
    raise ValueError(f"unknown aggregation {mode!r}")


# ---------------------------------------------------------------------------
# intra/inter tuple statistics


@dataclass
class IntraInterReport:
    d_intra_mean: float
    d_intra_var: float
    d_inter_mean: float
    d_inter_var: float
    metric: str = "cosine_metric"


def intra_inter_report(text_embeddings, metric=cosine_metric):
    """Average distance between captions of the same track vs. captions of
    different tracks.

    text_embeddings is (N, 3, E): per track, its 3 caption embeddings. The
    intra mean averages the 3 within-track pairs per track, then over tracks;
    the inter population is all 9 cross-caption pairs for every unordered
    track pair. Variances are population variances over the flat pair
    populations.
    """
    fn = get_metric(metric)
    embs = np.asarray(text_embeddings, dtype=np.float64)
    if embs.ndim != 3 or embs.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, E), got {embs.shape}")
    n = embs.shape[0]
    if n < 2:
        raise TooFewTracksError("need at least 2 tracks for inter-tuple stats")
    intra_pairs = []
    intra_track_means = []
    for i in range(n):
        pairs = [fn(embs[i, a], embs[i, b]) for a in range(3) for b in range(a + 1, 3)]
        intra_pairs.extend(pairs)
        intra_track_means.append(sum(pairs) / len(pairs))
    inter_pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            for a in range(3):
                for b in range(3):
                    inter_pairs.append(fn(embs[i, a], embs[j, b]))
    metric_name = getattr(fn, "__name__", str(metric))
    return IntraInterReport(
        d_intra_mean=float(np.mean(intra_track_means)),
        d_intra_var=float(np.var(intra_pairs)),
        d_inter_mean=float(np.mean(inter_pairs)),
        d_inter_var=float(np.var(inter_pairs)),
        metric=metric_name,
    )


# ---------------------------------------------------------------------------
# ranking


@dataclass
class RankingTable:
    """Per query: full candidate ordering (best first) and the 1-based rank
    of the true candidate."""

    orders: dict = field(default_factory=dict)  # query id -> [candidate ids]
    rank_of_truth: dict = field(default_factory=dict)  # query id -> int

    @classmethod
    def from_orders(cls, orders, truth=None):
        """Build a table from raw orderings.

        truth maps query id -> true candidate id; by default the query id
        itself is the true candidate (identity pairing).
        """
        candidate_sets = {frozenset(lst) for lst in orders.values()}
        if len(candidate_sets) > 1:
            raise ShapeError("every query must rank the same candidate set")
        for qid, lst in orders.items():
            if len(lst) != len(set(lst)):
                raise ShapeError(f"query {qid!r}: duplicate candidates")
        ranks = {}
        for qid, lst in orders.items():
            true_id = qid if truth is None else truth.get(qid)
            if true_id is None or true_id not in lst:
                raise MissingTruthError(f"query {qid!r}: true candidate not ranked")
            ranks[qid] = lst.index(true_id) + 1
        return cls(orders=dict(orders), rank_of_truth=ranks)


def mrr(table):
    """Mean reciprocal rank of the true candidates."""
    if not table.rank_of_truth:
        raise MissingTruthError("empty ranking table")
    total = 0.0
    for qid in table.orders:
        rank = table.rank_of_truth.get(qid)
        if rank is None or rank < 1:
            raise MissingTruthError(f"query {qid!r}: no rank of truth")
        total += 1.0 / rank
    return total / len(table.orders)


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PcaResult:
    coords: np.ndarray  # (n, 2)
    explained_variance: np.ndarray  # (2,)
    degenerate: bool = False


def pca_2d(points):
    """Project mean-centered points onto the top-2 principal directions.

    Components are ordered by explained variance (descending) with a fixed
    sign convention: the first nonzero loading of each component is positive.
    If the centered cloud has rank < 2 the second column is zeroed and the
    result is flagged degenerate instead of raising.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3 or X.shape[1] < 2:
        raise ShapeError(f"expected (n>=3, d>=2) points, got {X.shape}")
    n = X.shape[0]
    centered = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    tol = s[0] * max(X.shape) * np.finfo(np.float64).eps if s[0] > 0 else 0.0
    rank = int(np.sum(s > tol))
    components = vt[:2].copy()
    variances = (s[:2] ** 2) / n
    degenerate = rank < 2
    if degenerate:
        components[1] = 0.0
        variances = np.array([variances[0], 0.0])
    for k in range(2):
        row = components[k]
        nonzero = np.nonzero(np.abs(row) > tol)[0]
        if nonzero.size and row[nonzero[0]] < 0:
            components[k] = -row
    coords = centered @ components.T
    if degenerate:
        coords[:, 1] = 0.0
    return PcaResult(coords=coords, explained_variance=variances, degenerate=degenerate)


def write_pca_csv(ids, coords, path):
    """Export 2-D coordinates as "id,pc1,pc2" rows for external plotting."""
    coords = np.asarray(coords)
    if len(ids) != coords.shape[0]:
        raise ShapeError("ids and coordinates disagree in length")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "pc1", "pc2"])
        for track_id, row in zip(ids, coords):
            writer.writerow([track_id, repr(float(row[0])), repr(float(row[1]))])
