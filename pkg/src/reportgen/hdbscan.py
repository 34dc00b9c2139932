"""HDBSCAN clustering and the topic similarity matrix.

Pipeline: core distances -> mutual reachability -> Prim MST -> single-linkage
merge tree -> condensed tree -> excess-of-mass cluster selection.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass

import numpy as np

from .umap import pairwise_distances


@dataclass(frozen=True)
class HdbscanConfig:
    min_cluster_size: int = 15
    min_samples: int | None = None
    metric: str = "euclidean"

    def __post_init__(self):
        if self.min_cluster_size < 2:
            raise ValueError("min_cluster_size must be at least 2")
        if self.min_samples is not None and self.min_samples < 1:
            raise ValueError("min_samples must be at least 1")
        if self.metric != "euclidean":
            raise ValueError("only the euclidean metric is supported")

    @property
    def effective_min_samples(self) -> int:
        return self.min_cluster_size if self.min_samples is None else self.min_samples


@dataclass
class CondensedTree:
    parent: np.ndarray
    child: np.ndarray
    lambda_val: np.ndarray
    child_size: np.ndarray
    n_points: int

    @property
    def root(self) -> int:
        return self.n_points

    def cluster_ids(self) -> np.ndarray:
        ids = np.unique(np.concatenate([[self.root], self.child[self.child_size > 1]]))
        return ids.astype(np.int64)

    def birth_lambdas(self) -> dict[int, float]:
        births = {self.root: 0.0}
        for c, lam, size in zip(self.child, self.lambda_val, self.child_size):
            if size > 1:
                births[int(c)] = float(lam)
        return births

    def children(self, cluster: int) -> list[int]:
        mask = (self.parent == cluster) & (self.child_size > 1)
        return [int(c) for c in self.child[mask]]


@dataclass
class TopicAssignment:
    labels: np.ndarray
    strengths: np.ndarray
    k: int
    stabilities: dict[int, float] | None = None
    selected: tuple[int, ...] = ()


def core_distances(points: np.ndarray | None, min_samples: int, distances: np.ndarray | None = None) -> np.ndarray:
    """Distance to the ``min_samples``-th nearest neighbour, the point itself excluded."""
    d = pairwise_distances(points) if distances is None else np.array(distances, dtype=np.float64)
    n = d.shape[0]
    if n < min_samples + 1:
        raise ValueError(f"core_distances: need at least {min_samples + 1} points, got {n}")
    np.fill_diagonal(d, np.inf)
    return np.partition(d, min_samples - 1, axis=1)[:, min_samples - 1]


def mutual_reachability(d, core_a, core_b):
    return np.maximum(np.maximum(core_a, core_b), d)


def mutual_reachability_matrix(distances: np.ndarray, core: np.ndarray) -> np.ndarray:
    m = mutual_reachability(distances, core[:, None], core[None, :])
    np.fill_diagonal(m, 0.0)
    return m


def minimum_spanning_tree(mreach: np.ndarray) -> np.ndarray:
    """Dense Prim's algorithm.

    Returns (n-1, 3) rows ``(u, v, weight)`` with ``u < v``, in insertion order.
    Ties go to the lexicographically smallest ``(weight, u, v)``.
    """
    m = np.asarray(mreach, dtype=np.float64)
    n = m.shape[0]
    if n < 2:
        raise ValueError("minimum_spanning_tree needs at least 2 points")
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best = m[0].copy()
    src = np.zeros(n, dtype=np.int64)
    edges = np.empty((n - 1, 3))
    idx = np.arange(n)
    for step in range(n - 1):
        cand = np.where(in_tree, np.inf, best)
        wmin = cand.min()
        tied = np.flatnonzero(cand == wmin)
        lo = np.minimum(src[tied], tied)
        hi = np.maximum(src[tied], tied)
        pick = tied[np.lexsort((hi, lo))[0]]
        u, v = sorted((int(src[pick]), int(pick)))
        edges[step] = (u, v, wmin)
        in_tree[pick] = True
        row = m[pick]
        # replace when strictly cheaper, or equally cheap with a smaller index pair
        new_lo = np.minimum(idx, pick)
        new_hi = np.maximum(idx, pick)
        old_lo = np.minimum(idx, src)
        old_hi = np.maximum(idx, src)
        better = (row < best) | ((row == best) & ((new_lo < old_lo) | ((new_lo == old_lo) & (new_hi < old_hi))))
        better &= ~in_tree
        best = np.where(better, row, best)
        src = np.where(better, pick, src)
    return edges


def single_linkage(mst: np.ndarray, n: int) -> np.ndarray:
    """Merge tree rows ``(left, right, distance, size)``; merged node ``i`` gets id ``n + i``."""
    order = np.lexsort((mst[:, 1], mst[:, 0], mst[:, 2]))
    parent = np.arange(2 * n - 1)
    size = np.ones(2 * n - 1, dtype=np.int64)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    out = np.empty((n - 1, 4))
    for i, e in enumerate(order):
        a, b, w = int(mst[e, 0]), int(mst[e, 1]), mst[e, 2]
        ra, rb = find(a), find(b)
        node = n + i
        parent[ra] = parent[rb] = node
        size[node] = size[ra] + size[rb]
        out[i] = (min(ra, rb), max(ra, rb), w, size[node])
    return out


def _leaves(hierarchy: np.ndarray, node: int, n: int) -> list[int]:
    out, queue = [], deque([node])
    while queue:
        x = queue.popleft()
        if x < n:
            out.append(x)
        else:
            row = hierarchy[x - n]
            queue.append(int(row[0]))
            queue.append(int(row[1]))
    return out


def condense_tree(hierarchy: np.ndarray, min_cluster_size: int) -> CondensedTree:
    """Walk the merge tree top-down; a split only creates clusters when both sides are big enough."""
    n = hierarchy.shape[0] + 1
    root = 2 * n - 2
    relabel = {root: n}
    next_label = n + 1
    rows: list[tuple[int, int, float, int]] = []
    queue = deque([root])

    def size_of(node):
        return 1 if node < n else int(hierarchy[node - n][3])

    while queue:
        node = queue.popleft()
        left, right, dist, _ = hierarchy[node - n]
        left, right = int(left), int(right)
        lam = 1.0 / dist if dist > 0 else np.inf
        lsize, rsize = size_of(left), size_of(right)
        parent = relabel[node]
        if lsize >= min_cluster_size and rsize >= min_cluster_size:
            for side, s in ((left, lsize), (right, rsize)):
                relabel[side] = next_label
                rows.append((parent, next_label, lam, s))
                next_label += 1
                queue.append(side)
        else:
            for side, s in ((left, lsize), (right, rsize)):
                if s >= min_cluster_size:
                    relabel[side] = parent
                    queue.append(side)
                else:
                    for leaf in _leaves(hierarchy, side, n):
                        rows.append((parent, leaf, lam, 1))
    return CondensedTree(
        parent=np.array([r[0] for r in rows], dtype=np.int64),
        child=np.array([r[1] for r in rows], dtype=np.int64),
        lambda_val=np.array([r[2] for r in rows], dtype=np.float64),
        child_size=np.array([r[3] for r in rows], dtype=np.int64),
        n_points=n,
    )


def compute_stability(tree: CondensedTree) -> dict[int, float]:
    """Stability of cluster C: sum over its rows of ``(lambda - birth(C)) * child_size``."""
    births = tree.birth_lambdas()
    stability = {c: 0.0 for c in births}
    for p, lam, size in zip(tree.parent, tree.lambda_val, tree.child_size):
        stability[int(p)] += (lam - births[int(p)]) * size
    return stability


def select_clusters_eom(tree: CondensedTree, stability: dict[int, float]) -> list[int]:
    """Excess of mass: keep a cluster unless its children's best selections are more stable."""
    stab = dict(stability)
    nodes = sorted((c for c in stab if c != tree.root), reverse=True)
    is_cluster = {c: True for c in nodes}
    for node in nodes:
        kids = tree.children(node)
        subtree = sum(stab[c] for c in kids)
        if kids and subtree > stab[node]:
            is_cluster[node] = False
            stab[node] = subtree
        else:
            stack = list(kids)
            while stack:
                d = stack.pop()
                is_cluster[d] = False
                stack.extend(tree.children(d))
    return sorted(c for c, keep in is_cluster.items() if keep)


def label_points(tree: CondensedTree, selected: list[int]) -> tuple[np.ndarray, np.ndarray]:
    """Label each point with the selected cluster above it (or -1) and its membership strength."""
    n = tree.n_points
    cluster_parent = {int(c): int(p) for p, c, s in zip(tree.parent, tree.child, tree.child_size) if s > 1}
    point_rows = tree.child_size == 1
    point_parent = dict(zip(tree.child[point_rows].tolist(), tree.parent[point_rows].tolist()))
    point_lambda = dict(zip(tree.child[point_rows].tolist(), tree.lambda_val[point_rows].tolist()))
    label_of = {c: i for i, c in enumerate(selected)}

    def owner(c):
        while c is not None:
            if c in label_of:
                return c
            c = cluster_parent.get(c)
        return None

    labels = np.full(n, -1, dtype=np.int64)
    strengths = np.zeros(n)
    owners = {}
    for p in range(n):
        c = owner(point_parent.get(p, tree.root))
        if c is not None:
            labels[p] = label_of[c]
            owners[p] = c
    for c in selected:
        members = [p for p, o in owners.items() if o == c]
        lam = np.array([point_lambda[p] for p in members])
        lam_max = lam.max()
        for p, lp in zip(members, lam):
            if not np.isfinite(lp) or lam_max == 0.0:
                strengths[p] = 1.0
            else:
                strengths[p] = lp / lam_max
    return labels, strengths


def condense_and_extract(mst: np.ndarray, n: int, config: HdbscanConfig) -> tuple[TopicAssignment, CondensedTree]:
    hierarchy = single_linkage(mst, n)
    tree = condense_tree(hierarchy, config.min_cluster_size)
    stability = compute_stability(tree)
    selected = select_clusters_eom(tree, stability)
    labels, strengths = label_points(tree, selected)
    return TopicAssignment(labels, strengths, len(selected), stability, tuple(selected)), tree


def hdbscan(points: np.ndarray, config: HdbscanConfig = HdbscanConfig()) -> tuple[TopicAssignment, CondensedTree]:
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    ms = config.effective_min_samples
    if n < 2 or n <= ms or n < config.min_cluster_size:
        # too small for a single cluster
        return TopicAssignment(np.full(n, -1, dtype=np.int64), np.zeros(n), 0, {}, ()), CondensedTree(
            np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int64), n)
    d = pairwise_distances(points)
    core = core_distances(None, ms, distances=d)
    mst = minimum_spanning_tree(mutual_reachability_matrix(d, core))
    return condense_and_extract(mst, n, config)


def topic_similarity_matrix(labels: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    """Cosine similarity between normalized cluster centroids of the member embeddings."""
    labels = np.asarray(labels)
    k = int(labels.max()) + 1 if labels.size and labels.max() >= 0 else 0
    if k < 1:
        raise ValueError("topic_similarity_matrix needs at least one cluster")
    cents = np.stack([embeddings[labels == c].mean(axis=0) for c in range(k)])
    cents /= np.linalg.norm(cents, axis=1, keepdims=True)
    sim = cents @ cents.T
    sim = (sim + sim.T) / 2.0
    np.fill_diagonal(sim, 1.0)
    return sim


def write_topics_csv(path, ids, assignment: TopicAssignment) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label", "strength"])
        for rid, lab, s in zip(ids, assignment.labels, assignment.strengths):
            w.writerow([rid, int(lab), repr(float(s))])


def read_topics_csv(path) -> dict[str, int]:
    with open(path, newline="") as fh:
        return {row["id"]: int(row["label"]) for row in csv.DictReader(fh)}


def write_matrix_csv(path, matrix: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in matrix:
            w.writerow([repr(float(v)) for v in row])
