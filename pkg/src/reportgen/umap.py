"""UMAP dimension reduction: exact kNN, fuzzy simplicial set, SGD layout."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp
from scipy.optimize import curve_fit

SMOOTH_K_ITERS = 64
MIN_K_DIST_SCALE = 1e-3
MIN_SIGMA = 1e-8


@dataclass(frozen=True)
class UmapConfig:
    n_neighbors: int = 15
    min_dist: float = 0.0
    output_dim: int = 2
    spread: float = 1.0
    n_epochs: int = 200
    initial_learning_rate: float = 1.0
    negative_sample_rate: int = 5
    seed: int = 0

    def validate(self, n_points: int | None = None) -> None:
        if self.n_neighbors < 2:
            raise ValueError("n_neighbors must be at least 2")
        if n_points is not None and self.n_neighbors >= n_points:
            raise ValueError(f"n_neighbors={self.n_neighbors} needs more than {n_points} points")
        if self.min_dist < 0:
            raise ValueError("min_dist must be non-negative")
        if self.output_dim < 1:
            raise ValueError("output_dim must be at least 1")
        if self.spread <= 0:
            raise ValueError("spread must be positive")


@dataclass
class FuzzyGraph:
    weights: sp.csr_matrix
    rho: np.ndarray
    sigma: np.ndarray


def pairwise_distances(x: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Exact Euclidean distance matrix (no Gram-matrix cancellation)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    out = np.empty((n, n))
    for s in range(0, n, chunk):
        diff = x[s:s + chunk, None, :] - x[None, :, :]
        out[s:s + chunk] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return out


def knn_graph(x: np.ndarray, k: int, distances: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force k nearest neighbours, self excluded, ties to the lower index.

    Returns ``(indices, distances)``, both (n, k), sorted by distance.
    """
    n = len(x) if distances is None else distances.shape[0]
    if n < k + 1:
        raise ValueError(f"knn_graph: need at least {k + 1} points for k={k}, got {n}")
    d = pairwise_distances(x) if distances is None else np.array(distances, dtype=np.float64)
    np.fill_diagonal(d, np.inf)
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(d, idx, axis=1)


def membership_sum(dists: np.ndarray, rho: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Row sums of ``exp(-max(0, d - rho) / sigma)``."""
    return np.exp(-np.maximum(dists - rho[:, None], 0.0) / sigma[:, None]).sum(axis=1)


def smooth_knn(dists: np.ndarray, k: int | None = None, n_iter: int = SMOOTH_K_ITERS) -> tuple[np.ndarray, np.ndarray]:
    """Per-point (rho, sigma) so that the membership sum hits log2(k).

    ``rho`` is the smallest positive neighbour distance.  ``sigma`` comes from
    a bisection and is floored at ``1e-3 * mean neighbour distance`` (and
    1e-8), which is what degenerate rows such as all-equal distances end up at.
    """
    dists = np.asarray(dists, dtype=np.float64)
    n, kk = dists.shape
    k = kk if k is None else k
    target = np.log2(k)
    pos = np.where(dists > 0, dists, np.inf)
    rho = pos.min(axis=1)
    rho[~np.isfinite(rho)] = 0.0

    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    mid = np.ones(n)
    for _ in range(n_iter):
        psum = membership_sum(dists, rho, mid)
        too_big = psum > target
        hi = np.where(too_big, mid, hi)
        lo = np.where(too_big, lo, mid)
        mid = np.where(np.isinf(hi), mid * 2.0, (lo + hi) / 2.0)

    # rows whose sum already reaches the target as sigma -> 0 have no root
    ones = (dists - rho[:, None] <= 0).sum(axis=1)
    mid = np.where(ones >= target, 0.0, mid)

    row_mean = dists.mean(axis=1)
    floor = np.where(rho > 0, row_mean, dists.mean()) * MIN_K_DIST_SCALE
    sigma = np.maximum(np.maximum(mid, floor), MIN_SIGMA)
    return rho, sigma


def directed_weights(indices: np.ndarray, dists: np.ndarray, rho: np.ndarray, sigma: np.ndarray) -> sp.csr_matrix:
    n, k = indices.shape
    vals = np.exp(-np.maximum(dists - rho[:, None], 0.0) / sigma[:, None])
    rows = np.repeat(np.arange(n), k)
    mat = sp.csr_matrix((vals.ravel(), (rows, indices.ravel())), shape=(n, n))
    mat.eliminate_zeros()
    return mat


def fuzzy_union(directed) -> sp.csr_matrix:
    """Probabilistic t-conorm ``a + b - a*b`` of a directed graph and its transpose."""
    p = sp.csr_matrix(directed, dtype=np.float64)
    pt = p.T.tocsr()
    out = (p + pt - p.multiply(pt)).tocsr()
    out.setdiag(0.0)
    out.eliminate_zeros()
    out.sort_indices()
    return out


def fuzzy_simplicial_set(x: np.ndarray, n_neighbors: int, distances: np.ndarray | None = None) -> FuzzyGraph:
    idx, d = knn_graph(x, n_neighbors, distances)
    rho, sigma = smooth_knn(d, n_neighbors)
    return FuzzyGraph(fuzzy_union(directed_weights(idx, d, rho, sigma)), rho, sigma)


def _curve(x, a, b):
    return 1.0 / (1.0 + a * x ** (2 * b))


def curve_targets(min_dist: float, spread: float, n: int = 300) -> tuple[np.ndarray, np.ndarray]:
    xv = np.linspace(0.0, 3.0 * spread, n)
    yv = np.where(xv <= min_dist, 1.0, np.exp(-(xv - min_dist) / spread))
    return xv, yv


def fit_curve_params(min_dist: float, spread: float) -> tuple[float, float]:
    """Least-squares (a, b) for ``1 / (1 + a x^(2b))``: log grid search, then local refinement."""
    if spread <= 0:
        raise ValueError("spread must be positive")
    xv, yv = curve_targets(min_dist, spread)
    a_grid = np.exp(np.linspace(np.log(1e-3), np.log(1e3), 121))
    b_grid = np.linspace(0.1, 3.0, 59)
    best, best_ab = np.inf, (1.0, 1.0)
    for b in b_grid:
        pred = 1.0 / (1.0 + a_grid[:, None] * xv[None, :] ** (2 * b))
        err = ((pred - yv) ** 2).sum(axis=1)
        i = int(np.argmin(err))
        if err[i] < best:
            best, best_ab = err[i], (a_grid[i], b)
    try:
        (a, b), _ = curve_fit(_curve, xv, yv, p0=best_ab, bounds=([1e-6, 1e-3], [1e4, 10.0]))
    except RuntimeError:
        a, b = best_ab
    if ((_curve(xv, a, b) - yv) ** 2).sum() > best:
        a, b = best_ab
    return float(a), float(b)


# ---------------------------------------------------------------------------
# layout optimisation
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def attract_coeff(d2, a, b):
    """Scale on (y_i - y_j) of the step that descends ``-log q(d)``."""
    if d2 <= 0.0:
        return 0.0
    return -2.0 * a * b * d2 ** (b - 1.0) / (a * d2 ** b + 1.0)


@numba.njit(cache=True)
def repulse_coeff(d2, a, b, eps):
    """Scale on (y_i - y_j) of the step that descends ``-log(1 - q(d))``."""
    if d2 <= 0.0:
        return 0.0
    return 2.0 * b / ((eps + d2) * (a * d2 ** b + 1.0))


@numba.njit(cache=True)
def _clip(v):
    if v > 4.0:
        return 4.0
    if v < -4.0:
        return -4.0
    return v


@numba.njit(cache=True)
def _xorshift(state):
    x = state[0]
    x ^= (x << np.uint64(13))
    x ^= (x >> np.uint64(7))
    x ^= (x << np.uint64(17))
    state[0] = x
    return x


@numba.njit(cache=True)
def _sgd_epochs(emb, head, tail, epochs_per_sample, a, b, n_epochs, lr0, neg_rate, rng_state):
    n_vertices = emb.shape[0]
    dim = emb.shape[1]
    n_edges = head.shape[0]
    epochs_per_neg = epochs_per_sample / neg_rate
    next_sample = epochs_per_sample.copy()
    next_neg = epochs_per_neg.copy()
    for n in range(n_epochs):
        alpha = lr0 * (1.0 - n / n_epochs)
        for i in range(n_edges):
            if next_sample[i] > n:
                continue
            j = head[i]
            k = tail[i]
            d2 = 0.0
            for d in range(dim):
                diff = emb[j, d] - emb[k, d]
                d2 += diff * diff
            gc = attract_coeff(d2, a, b)
            for d in range(dim):
                g = _clip(gc * (emb[j, d] - emb[k, d]))
                emb[j, d] += g * alpha
                emb[k, d] -= g * alpha
            next_sample[i] += epochs_per_sample[i]

            n_neg = int((n - next_neg[i]) / epochs_per_neg[i])
            for _ in range(n_neg):
                k = int(_xorshift(rng_state) % np.uint64(n_vertices))
                if k == j:
                    continue
                d2 = 0.0
                for d in range(dim):
                    diff = emb[j, d] - emb[k, d]
                    d2 += diff * diff
                gc = repulse_coeff(d2, a, b, 0.001)
                for d in range(dim):
                    if gc > 0.0:
                        g = _clip(gc * (emb[j, d] - emb[k, d]))
                    else:
                        g = 4.0
                    emb[j, d] += g * alpha
            next_neg[i] += n_neg * epochs_per_neg[i]
    return emb


def initial_layout(n: int, dim: int, seed: int) -> np.ndarray:
    """Seeded Gaussian, rescaled so the largest coordinate magnitude is 10."""
    y = np.random.default_rng(seed).normal(size=(n, dim))
    return y * (10.0 / np.abs(y).max())


def optimize_layout(graph: FuzzyGraph | sp.spmatrix, config: UmapConfig, init: np.ndarray | None = None) -> np.ndarray:
    """Edge-sampled SGD with negative sampling and linearly decaying step size."""
    w = graph.weights if isinstance(graph, FuzzyGraph) else sp.csr_matrix(graph)
    n = w.shape[0]
    a, b = fit_curve_params(config.min_dist, config.spread)
    coo = w.tocoo()
    keep = coo.data >= coo.data.max() / config.n_epochs if coo.nnz else np.zeros(0, bool)
    head = coo.row[keep].astype(np.int64)
    tail = coo.col[keep].astype(np.int64)
    weights = coo.data[keep]
    emb = (initial_layout(n, config.output_dim, config.seed) if init is None
           else np.array(init, dtype=np.float64))
    if head.size == 0:
        return emb
    epochs_per_sample = config.n_epochs / (config.n_epochs * weights / weights.max())
    seed_words = np.random.default_rng(config.seed).integers(1, 2**63 - 1, size=1, dtype=np.int64)
    rng_state = seed_words.astype(np.uint64)
    return _sgd_epochs(emb, head, tail, epochs_per_sample.astype(np.float64), float(a), float(b),
                       int(config.n_epochs), float(config.initial_learning_rate),
                       float(config.negative_sample_rate), rng_state)


def ce_objective(y: np.ndarray, w: np.ndarray, a: float, b: float) -> float:
    """Fuzzy cross-entropy over unordered pairs (constant terms dropped)."""
    total = 0.0
    n = len(y)
    for i in range(n):
        for j in range(i + 1, n):
            d2 = float(((y[i] - y[j]) ** 2).sum())
            q = 1.0 / (1.0 + a * d2 ** b)
            total += -w[i, j] * np.log(q) - (1.0 - w[i, j]) * np.log(1.0 - q)
    return total


def ce_gradient(y: np.ndarray, w: np.ndarray, a: float, b: float) -> np.ndarray:
    """Gradient of :func:`ce_objective` assembled from the SGD step coefficients."""
    g = np.zeros_like(y, dtype=np.float64)
    n = len(y)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            diff = y[i] - y[j]
            d2 = float((diff ** 2).sum())
            step = w[i, j] * attract_coeff(d2, a, b) + (1.0 - w[i, j]) * repulse_coeff(d2, a, b, 0.0)
            g[i] -= step * diff
    return g


def umap_embed(x: np.ndarray, config: UmapConfig = UmapConfig()) -> tuple[np.ndarray, FuzzyGraph]:
    config.validate(len(x))
    graph = fuzzy_simplicial_set(x, config.n_neighbors)
    return optimize_layout(graph, config), graph


def write_umap_csv(path, ids, coords: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"y{i}" for i in range(coords.shape[1])])
        for rid, row in zip(ids, coords):
            w.writerow([rid] + [repr(float(v)) for v in row])
