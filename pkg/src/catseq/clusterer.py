"""Density-based clustering of event representations, with noise rescue.

Implements the published hierarchical density clustering pipeline: core
distances (k-th nearest including self), mutual reachability distances,
an exact Prim minimum spanning tree, single-linkage dendrogram, condensed
tree at the minimum cluster size, and excess-of-mass cluster extraction.
The root is never selected, so a dataset forming one undivided density
mode comes back as all noise, matching the reference implementation.

Distances are exact O(n^2); below `DENSE_MAX` points the full matrix is
materialized, above it rows are recomputed on the fly so memory stays
O(n).

`phc` reassigns noise points to the modal label of their k nearest
labeled neighbors (single pass over the original labels, so it is
idempotent and never touches non-noise points).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .dataio import NOISE_LABEL

__all__ = [
    "DENSE_MAX",
    "CondensedTree",
    "hdbscan",
    "phc",
    "core_distances",
    "core_distances_from_matrix",
    "mutual_reachability",
    "prim_mst",
    "single_linkage",
    "condense_tree",
    "compute_stability",
    "extract_clusters",
]

DENSE_MAX = 8192


def _check_points(points: np.ndarray) -> np.ndarray:
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] < 1:
        raise ValueError("points must be a 2-D array")
    if not np.all(np.isfinite(points)):
        raise ValueError("points must be finite")
    return points


def _pairwise_sq(points: np.ndarray) -> np.ndarray:
    sq = (points * points).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (points @ points.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def _distance_rows(points: np.ndarray, sq: np.ndarray, idx) -> np.ndarray:
    """Euclidean distances from points[idx] to every point."""
    d2 = sq[idx][:, None] + sq[None, :] - 2.0 * (points[idx] @ points.T)
    np.maximum(d2, 0.0, out=d2)
    return np.sqrt(d2)


def _check_distance_matrix(dist: np.ndarray) -> np.ndarray:
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ValueError("distance matrix must be square")
    if not np.all(np.isfinite(dist)):
        raise ValueError("distances must be finite")
    return dist


def core_distances(points: np.ndarray, min_samples: int) -> np.ndarray:
    """Distance to the min_samples-th nearest neighbor, counting the point itself."""
    points = _check_points(points)
    n = len(points)
    if not 1 <= min_samples <= n:
        raise ValueError("min_samples must lie in [1, n]")
    sq = (points * points).sum(axis=1)
    out = np.empty(n)
    block = max(1, int(2_000_000 // max(n, 1)))
    for start in range(0, n, block):
        rows = _distance_rows(points, sq, slice(start, start + block))
        out[start:start + block] = np.partition(rows, min_samples - 1, axis=1)[:, min_samples - 1]
    return out


def core_distances_from_matrix(dist: np.ndarray, min_samples: int) -> np.ndarray:
    """Core distances read off a full distance matrix (row order statistics)."""
    dist = _check_distance_matrix(dist)
    if not 1 <= min_samples <= len(dist):
        raise ValueError("min_samples must lie in [1, n]")
    return np.partition(dist, min_samples - 1, axis=1)[:, min_samples - 1]


def mutual_reachability(dist: np.ndarray, core: np.ndarray) -> np.ndarray:
    """max(core_i, core_j, d_ij) for a full distance matrix."""
    return np.maximum(np.maximum(core[:, None], core[None, :]), dist)


def _prim_edges(n: int, mreach_row) -> np.ndarray:
    """Prim sweep recording edges as (last inserted node, new node, weight).

    The left endpoint follows the reference formulation of the published
    algorithm: it is the node inserted on the previous step, not the tree
    node realizing the minimum.  The weight sequence is exactly the MST
    weight multiset either way, and the downstream single-linkage merge
    consumes components, so the dendrogram matches the reference.
    """
    edges = np.empty((n - 1, 3))
    current = 0
    remaining = np.arange(n)
    best = np.full(n, np.inf)
    for i in range(n - 1):
        keep = remaining != current
        remaining = remaining[keep]
        best = np.minimum(best[keep], mreach_row(current)[remaining])
        idx = int(np.argmin(best))
        new = int(remaining[idx])
        edges[i] = (current, new, best[idx])
        current = new
    return edges


def _prim_dense(mreach: np.ndarray) -> np.ndarray:
    return _prim_edges(len(mreach), lambda u: mreach[u])


def prim_mst(points: np.ndarray, core: np.ndarray) -> np.ndarray:
    """MST of the mutual reachability graph; rows (a, b, weight).

    O(n^2) time; the distance matrix is only materialized for small n,
    above DENSE_MAX rows are recomputed on demand to keep memory O(n).
    """
    points = _check_points(points)
    n = len(points)
    if n < 2:
        raise ValueError("need at least two points")
    if n <= DENSE_MAX:
        return _prim_dense(mutual_reachability(np.sqrt(_pairwise_sq(points)), core))

    sq = (points * points).sum(axis=1)

    def mreach_row(u: int) -> np.ndarray:
        row = _distance_rows(points, sq, [u])[0]
        return np.maximum(np.maximum(core, core[u]), row)

    return _prim_edges(n, mreach_row)


def single_linkage(edges: np.ndarray, n_points: int) -> np.ndarray:
    """Merge MST edges by ascending weight into dendrogram rows
    (cluster_a, cluster_b, distance, size); merge i creates cluster n+i."""
    order = np.argsort(edges[:, 2])
    parent = np.arange(2 * n_points - 1, dtype=np.int64)
    size = np.ones(2 * n_points - 1, dtype=np.int64)

    def find(x: int) -> int:
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    linkage = np.empty((n_points - 1, 4))
    for i, e in enumerate(order):
        a, b, w = edges[e]
        ra, rb = find(int(a)), find(int(b))
        new = n_points + i
        linkage[i] = (ra, rb, w, size[ra] + size[rb])
        size[new] = size[ra] + size[rb]
        parent[ra] = new
        parent[rb] = new
    return linkage


@dataclass
class CondensedTree:
    """Simplified hierarchy: clusters persist until they shed points or
    split into two children at least min_cluster_size large.

    Rows are (parent, child, lambda, child_size); lambda = 1/distance is
    the density level at which the child departs the parent.  Points are
    ids < n_points, clusters are ids >= n_points (root is n_points).
    """

    parent: np.ndarray
    child: np.ndarray
    lam: np.ndarray
    child_size: np.ndarray
    n_points: int


def _bfs(linkage: np.ndarray, n_points: int, start: int) -> list[int]:
    out = []
    frontier = [start]
    while frontier:
        out.extend(frontier)
        frontier = [
            int(c)
            for node in frontier
            if node >= n_points
            for c in linkage[node - n_points, :2]
        ]
    return out


def condense_tree(linkage: np.ndarray, min_cluster_size: int) -> CondensedTree:
    if min_cluster_size < 2:
        raise ValueError("min_cluster_size must be >= 2")
    n_points = len(linkage) + 1
    root = 2 * n_points - 2
    relabel = np.empty(root + 1, dtype=np.int64)
    relabel[root] = n_points
    next_label = n_points + 1
    ignore = np.zeros(root + 1, dtype=bool)
    rows: list[tuple[int, int, float, int]] = []

    def shed_leaves(node: int, parent_label: int, lam: float) -> None:
        for sub in _bfs(linkage, n_points, node):
            if sub < n_points:
                rows.append((parent_label, sub, lam, 1))
            ignore[sub] = True

    for node in _bfs(linkage, n_points, root):
        if node < n_points or ignore[node]:
            continue
        left, right, dist, _ = linkage[node - n_points]
        left, right = int(left), int(right)
        lam = 1.0 / dist if dist > 0.0 else np.inf
        left_count = int(linkage[left - n_points, 3]) if left >= n_points else 1
        right_count = int(linkage[right - n_points, 3]) if right >= n_points else 1
        label = relabel[node]
        if left_count >= min_cluster_size and right_count >= min_cluster_size:
            relabel[left] = next_label
            rows.append((label, next_label, lam, left_count))
            next_label += 1
            relabel[right] = next_label
            rows.append((label, next_label, lam, right_count))
            next_label += 1
        elif left_count < min_cluster_size and right_count < min_cluster_size:
            shed_leaves(left, label, lam)
            shed_leaves(right, label, lam)
        elif left_count < min_cluster_size:
            relabel[right] = label
            shed_leaves(left, label, lam)
        else:
            relabel[left] = label
            shed_leaves(right, label, lam)

    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 4)
    return CondensedTree(
        parent=arr[:, 0].astype(np.int64),
        child=arr[:, 1].astype(np.int64),
        lam=arr[:, 2],
        child_size=arr[:, 3].astype(np.int64),
        n_points=n_points,
    )


def compute_stability(tree: CondensedTree) -> dict[int, float]:
    """Sum over members of (departure lambda - birth lambda), per cluster."""
    births: dict[int, float] = {tree.n_points: 0.0}
    for child, lam, size in zip(tree.child, tree.lam, tree.child_size):
        if size > 1:
            births[int(child)] = float(lam)
    stability: dict[int, float] = {}
    for parent, lam, size in zip(tree.parent, tree.lam, tree.child_size):
        parent = int(parent)
        birth = births[parent]
        contribution = (float(lam) - birth) * int(size)
        if not np.isfinite(contribution):
            # identical points depart at infinite density from a cluster
            # born at infinite density; their persistence is zero
            contribution = 0.0 if not np.isfinite(birth) else np.inf
        stability[parent] = stability.get(parent, 0.0) + contribution
    return stability


def _cluster_children(tree: CondensedTree) -> dict[int, list[int]]:
    children: dict[int, list[int]] = {}
    for parent, child, size in zip(tree.parent, tree.child, tree.child_size):
        if size > 1:
            children.setdefault(int(parent), []).append(int(child))
    return children


def extract_clusters(tree: CondensedTree, stability: dict[int, float] | None = None) -> np.ndarray:
    """Excess-of-mass selection (root excluded) and point labeling.

    A cluster is kept when its stability strictly exceeds the sum of its
    children's; otherwise the children win and the parent inherits their
    mass.  Each point gets the label of its nearest selected ancestor, or
    noise when none of its ancestors was selected.
    """
    if stability is None:
        stability = compute_stability(tree)
    stability = dict(stability)
    children = _cluster_children(tree)
    candidates = sorted(stability.keys(), reverse=True)
    if candidates and candidates[-1] == tree.n_points:
        candidates = candidates[:-1]  # never select the root
    is_cluster = {c: True for c in candidates}
    for node in candidates:  # descending: children settled before parents
        subtree = sum(stability.get(c, 0.0) for c in children.get(node, []))
        if subtree > stability.get(node, 0.0):
            is_cluster[node] = False
            stability[node] = subtree
        else:
            frontier = list(children.get(node, []))
            while frontier:
                c = frontier.pop()
                is_cluster[c] = False
                frontier.extend(children.get(c, []))
    selected = sorted(c for c, keep in is_cluster.items() if keep)
    label_of = {c: i for i, c in enumerate(selected)}

    cluster_parent: dict[int, int] = {}
    for parent, child, size in zip(tree.parent, tree.child, tree.child_size):
        if size > 1:
            cluster_parent[int(child)] = int(parent)

    ancestor_label: dict[int, int] = {}

    def resolve(cluster: int) -> int:
        """Label of the nearest selected ancestor (including itself)."""
        chain = []
        node = cluster
        while True:
            if node in ancestor_label:
                result = ancestor_label[node]
                break
            if node in label_of:
                result = label_of[node]
                break
            if node not in cluster_parent:
                result = NOISE_LABEL
                break
            chain.append(node)
            node = cluster_parent[node]
        chain.append(cluster)
        for c in chain:
            ancestor_label[c] = result
        return result

    labels = np.full(tree.n_points, NOISE_LABEL, dtype=np.int64)
    for parent, child, size in zip(tree.parent, tree.child, tree.child_size):
        if size == 1:
            labels[int(child)] = resolve(int(parent))
    return labels


def hdbscan(points, min_cluster_size: int = 5, min_samples: int = 5,
            metric: str = "euclidean") -> np.ndarray:
    """Full pipeline; returns per-point labels with -1 for noise.

    `metric="precomputed"` accepts a full distance matrix instead of
    coordinates; the dense euclidean path materializes the matrix once so
    every stage reads the same values.
    """
    if metric == "precomputed":
        dist = _check_distance_matrix(points)
        n = len(dist)
    elif metric == "euclidean":
        points = _check_points(points)
        n = len(points)
        dist = None
    else:
        raise ValueError(f"unsupported metric: {metric!r}")
    if min_cluster_size < 2:
        raise ValueError("min_cluster_size must be >= 2")
    if n < min_cluster_size:
        raise ValueError("need at least min_cluster_size points")
    if dist is None and n <= DENSE_MAX:
        dist = np.sqrt(_pairwise_sq(points))
    if dist is not None:
        core = core_distances_from_matrix(dist, min_samples)
        edges = _prim_dense(mutual_reachability(dist, core))
    else:
        core = core_distances(points, min_samples)
        edges = prim_mst(points, core)
    linkage = single_linkage(edges, n)
    tree = condense_tree(linkage, min_cluster_size)
    return extract_clusters(tree)


def phc(labels: np.ndarray, points: np.ndarray, k: int = 20) -> np.ndarray:
    """Relabel noise points by local consensus of labeled neighbors.

    Each noise point takes the modal label among its k nearest non-noise
    points (Euclidean); on a modal tie, the tied label with the nearest
    member wins.  Non-noise labels are never changed, and the consensus
    reads only the original labels, so a second pass is a no-op.
    """
    labels = np.asarray(labels, dtype=np.int64)
    points = _check_points(points)
    if len(labels) != len(points):
        raise ValueError("labels and points must align")
    if k < 1:
        raise ValueError("k must be >= 1")
    noise = labels == NOISE_LABEL
    out = labels.copy()
    if not noise.any():
        return out
    if noise.all():
        warnings.warn("all points are noise; consensus relabeling skipped")
        return out
    anchors = points[~noise]
    anchor_labels = labels[~noise]
    kk = min(k, len(anchors))
    sq = (anchors * anchors).sum(axis=1)
    for i in np.nonzero(noise)[0]:
        d2 = sq - 2.0 * (anchors @ points[i]) + points[i] @ points[i]
        nearest = np.argpartition(d2, kk - 1)[:kk]
        votes = np.bincount(anchor_labels[nearest])
        top = votes.max()
        tied = np.nonzero(votes == top)[0]
        if len(tied) == 1:
            out[i] = tied[0]
        else:
            in_tie = np.isin(anchor_labels[nearest], tied)
            winner_idx = nearest[in_tie][np.argmin(d2[nearest[in_tie]])]
            out[i] = anchor_labels[winner_idx]
    return out
