"""Hierarchical k-means tree with best-bin-first nearest neighbour search.

The tree follows the FLANN recipe: recursively split the data with k-means
(k = branching factor) until clusters are small, then answer queries by
descending into the closest child first and keeping the remaining branches in a
priority queue. A leaf-visit budget (``checks``) trades recall for speed;
``checks=None`` runs an exact branch-and-bound search over the same tree.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from trinoloc.errors import ValidationError

LLOYD_TOL = 1e-4
LLOYD_MAX_ITER = 25


def lloyd_kmeans(
    X: np.ndarray,
    k: int,
    rng: np.random.Generator,
    tol: float = LLOYD_TOL,
    max_iter: int = LLOYD_MAX_ITER,
) -> tuple[np.ndarray, np.ndarray]:
    """Plain Lloyd iterations from ``k`` distinct random seeds.

    Stops once no center moves more than ``tol`` or after ``max_iter``
    iterations. Empty clusters keep their previous center.

    Returns:
        (centers, labels) with centers of shape (k', d), k' = min(k, n).
    """
    n = X.shape[0]
    k = min(k, n)
    centers = X[np.sort(rng.choice(n, size=k, replace=False))].astype(np.float64)
    x_sq = np.einsum("ij,ij->i", X, X)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = x_sq[:, None] - 2.0 * X @ centers.T + np.einsum("ij,ij->i", centers, centers)[None, :]
        labels = np.argmin(d2, axis=1)
        new = centers.copy()
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, X)
        nz = counts > 0
        new[nz] = sums[nz] / counts[nz, None]
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    d2 = x_sq[:, None] - 2.0 * X @ centers.T + np.einsum("ij,ij->i", centers, centers)[None, :]
    labels = np.argmin(d2, axis=1)
    return centers, labels


@dataclass(eq=False)
class TreeNode:
    center: np.ndarray
    radius: float
    children: list[TreeNode] = field(default_factory=list)
    ids: np.ndarray | None = None  # set on leaves only

    @property
    def is_leaf(self) -> bool:
        return self.ids is not None


@dataclass(eq=False)
class KMeansTree:
    """Index over id-tagged vectors.

    ``vectors[i]`` belongs to ``ids[i]``; leaves store positions into these
    arrays so that search can gather candidate rows directly.
    """

    root: TreeNode
    vectors: np.ndarray
    ids: np.ndarray
    branching: int
    leaf_max: int
    seed: int

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def leaves(self):
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                yield node
            else:
                stack.extend(reversed(node.children))

    def depth(self) -> int:
        def _d(node):
            return 1 if node.is_leaf else 1 + max(_d(c) for c in node.children)

        return _d(self.root)

    def leaf_ids(self) -> list[int]:
        """Entry ids in leaf order (each id appears once)."""
        return [int(self.ids[p]) for leaf in self.leaves() for p in leaf.ids]

    def structure_equal(self, other: KMeansTree) -> bool:
        if (self.branching, self.leaf_max, self.seed) != (other.branching, other.leaf_max, other.seed):
            return False
        if not (np.array_equal(self.ids, other.ids) and np.array_equal(self.vectors, other.vectors)):
            return False
        stack = [(self.root, other.root)]
        while stack:
            a, b = stack.pop()
            if a.is_leaf != b.is_leaf or a.radius != b.radius or not np.array_equal(a.center, b.center):
                return False
            if a.is_leaf:
                if not np.array_equal(a.ids, b.ids):
                    return False
            else:
                if len(a.children) != len(b.children):
                    return False
                stack.extend(zip(a.children, b.children))
        return True


def _leaf(X: np.ndarray, positions: np.ndarray) -> TreeNode:
    pts = X[positions]
    center = pts.mean(axis=0)
    radius = float(np.sqrt(((pts - center) ** 2).sum(axis=1)).max())
    return TreeNode(center=center, radius=radius, ids=positions.astype(np.int64))


def _build(X, positions, b, leaf_max, rng) -> TreeNode:
    if len(positions) <= leaf_max:
        return _leaf(X, positions)
    pts = X[positions]
    _, labels = lloyd_kmeans(pts, b, rng)
    groups = [positions[labels == j] for j in np.unique(labels)]
    if len(groups) < 2:
        # all points coincide; nothing to split
        return _leaf(X, positions)
    children = []
    for g in groups:
        if len(g) < b:
            children.append(_leaf(X, g))
        else:
            children.append(_build(X, g, b, leaf_max, rng))
    center = pts.mean(axis=0)
    radius = float(np.sqrt(((pts - center) ** 2).sum(axis=1)).max())
    return TreeNode(center=center, radius=radius, children=children)


def build_kmeans_tree(
    vectors,
    ids=None,
    branching: int = 8,
    leaf_max: int = 16,
    seed: int = 0,
) -> KMeansTree:
    """Build a hierarchical k-means tree.

    Args:
        vectors: (N, D) array of descriptor vectors.
        ids: Entry id for each row; defaults to ``range(N)``.
        branching: Number of children per split (k of each k-means).
        leaf_max: Nodes with at most this many points are not split further.
        seed: Seed for center initialization; identical inputs and seed give an
            identical tree.
    """
    X = np.asarray(vectors)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValidationError(f"need a non-empty (N, D) array, got shape {X.shape}", field="vectors")
    if branching < 2:
        raise ValidationError(f"branching must be >= 2, got {branching}", field="branching")
    if leaf_max < 1:
        raise ValidationError(f"leaf_max must be >= 1, got {leaf_max}", field="leaf_max")
    if ids is None:
        ids = np.arange(X.shape[0], dtype=np.int64)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != (X.shape[0],):
        raise ValidationError(f"{len(ids)} ids for {X.shape[0]} vectors", field="ids")
    if len(np.unique(ids)) != len(ids):
        raise ValidationError("ids must be unique", field="ids")
    rng = np.random.default_rng(seed)
    root = _build(X.astype(np.float64), np.arange(X.shape[0]), branching, leaf_max, rng)
    return KMeansTree(root=root, vectors=X, ids=ids, branching=branching, leaf_max=leaf_max, seed=seed)


def knn_search(
    tree: KMeansTree,
    q,
    n: int,
    checks: int | None = 32,
    return_distances: bool = False,
):
    """Rank up to ``n`` entry ids by Euclidean distance to ``q``.

    Branches are explored closest-center first. With an integer ``checks`` the
    search stops after that many leaves; the set of visited leaves does not
    depend on ``n``. With ``checks=None`` subtrees are pruned only when the
    bound ``|q - center| - radius`` proves they cannot hold one of the ``n``
    nearest entries, so the result is exact.

    Ties in distance are broken by smaller id.
    """
    q = np.asarray(q, dtype=np.float64).ravel()
    if q.shape[0] != tree.dim:
        raise ValidationError(f"query dimension {q.shape[0]} does not match tree dimension {tree.dim}", field="q")
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}", field="n")
    if checks is not None and checks < 1:
        raise ValidationError(f"checks must be >= 1 or None, got {checks}", field="checks")

    exact = checks is None
    X = tree.vectors
    # max-heap of the best n as (-dist, -id)
    best: list[tuple[float, int]] = []
    counter = 0
    frontier = [(0.0, counter, tree.root)]
    visited = 0
    while frontier:
        _, _, node = heapq.heappop(frontier)
        if exact and len(best) == n:
            bound = float(np.linalg.norm(q - node.center)) - node.radius
            # slack guards against rounding in the stored radius
            if bound - 1e-9 > -best[0][0]:
                continue
        while not node.is_leaf:
            centers = np.stack([c.center for c in node.children])
            d = np.sqrt(((centers - q) ** 2).sum(axis=1))
            order = np.argsort(d, kind="stable")
            for j in order[1:]:
                counter += 1
                heapq.heappush(frontier, (float(d[j]), counter, node.children[j]))
            node = node.children[order[0]]
        pos = node.ids
        dist = np.sqrt(((X[pos] - q) ** 2).sum(axis=1))
        for p, dv in zip(pos, dist):
            key = (-float(dv), -int(tree.ids[p]))
            if len(best) < n:
                heapq.heappush(best, key)
            elif key > best[0]:
                heapq.heapreplace(best, key)
        visited += 1
        if not exact and visited >= checks:
            break

    ranked = sorted(((-nd, -ni) for nd, ni in best))
    if return_distances:
        return [i for _, i in ranked], [d for d, _ in ranked]
    return [i for _, i in ranked]
