"""Exact nearest-neighbour kd-tree with subtree-rebuild deletion.

Trees are persistent values: :meth:`KdTree.remove` returns a new tree that
shares every untouched branch with the old one and rebuilds only the subtree
that was rooted at the deleted node.
"""

from dataclasses import dataclass

import numpy as np


def squared_distances(P, v):
    """Squared Euclidean distance from each row of ``P`` to ``v``.

    Accumulated coordinate by coordinate so a single row and a stacked
    matrix give bit-identical values.
    """
    P = np.asarray(P, dtype=float)
    v = np.asarray(v, dtype=float)
    acc = np.zeros(P.shape[:-1])
    for i in range(P.shape[-1]):
        diff = P[..., i] - v[i]
        acc = acc + diff * diff
    return acc


@dataclass(frozen=True)
class _Node:
    point: np.ndarray
    index: int
    axis: int
    left: "_Node | None"
    right: "_Node | None"

    @property
    def split(self):
        return self.point[self.axis]


def _build(points, indices):
    if len(indices) == 0:
        return None
    sub = points[indices]
    spread = sub.max(axis=0) - sub.min(axis=0)
    axis = int(np.argmax(spread))
    order = np.lexsort((indices, sub[:, axis]))
    indices = indices[order]
    coords = points[indices, axis]
    mid = len(indices) // 2
    # points equal to the split value must stay on the left
    while mid + 1 < len(indices) and coords[mid + 1] == coords[mid]:
        mid += 1
    return _Node(
        point=points[indices[mid]],
        index=int(indices[mid]),
        axis=axis,
        left=_build(points, indices[:mid]),
        right=_build(points, indices[mid + 1:]),
    )


def _collect(node, out):
    if node is None:
        return
    out.append(node.index)
    _collect(node.left, out)
    _collect(node.right, out)


class KdTree:
    """kd-tree over a fixed point set, addressed by row index.

    Splits on the axis of largest spread with the median point stored at
    the node. Queries return the lowest index among equidistant points.
    """

    def __init__(self, points, _root=None, _size=None):
        self.points = np.asarray(points, dtype=float)
        if self.points.ndim != 2:
            raise ValueError("points must be a 2-D array")
        if _root is None and _size is None:
            _root = _build(self.points, np.arange(len(self.points)))
            _size = len(self.points)
        self.root = _root
        self.size = _size

    def __len__(self):
        return self.size

    def indices(self):
        out = []
        _collect(self.root, out)
        return sorted(out)

    def query(self, v):
        """Return ``(point, index)`` of the nearest stored point to ``v``."""
        if self.root is None:
            raise ValueError("query on an empty kd-tree")
        v = np.asarray(v, dtype=float)
        if v.shape != (self.points.shape[1],):
            raise ValueError(f"query has shape {v.shape}, expected ({self.points.shape[1]},)")
        best = [np.inf, -1]

        def visit(node):
            if node is None:
                return
            d = float(squared_distances(node.point, v))
            if d < best[0] or (d == best[0] and node.index < best[1]):
                best[0], best[1] = d, node.index
            gap = v[node.axis] - node.split
            near, far = (node.left, node.right) if gap <= 0 else (node.right, node.left)
            visit(near)
            if gap * gap <= best[0]:
                visit(far)

        visit(self.root)
        idx = best[1]
        return self.points[idx], idx

    def remove(self, index):
        """Return a new tree without ``index``; only its subtree is rebuilt."""
        index = int(index)
        if not 0 <= index < len(self.points):
            raise KeyError(f"index {index} not in tree")
        p = self.points[index]
        path = []
        node = self.root
        while node is not None and node.index != index:
            path.append(node)
            node = node.left if p[node.axis] <= node.split else node.right
        if node is None:
            raise KeyError(f"index {index} not in tree")
        rest = []
        _collect(node.left, rest)
        _collect(node.right, rest)
        new = _build(self.points, np.array(sorted(rest), dtype=int))
        for parent in reversed(path):
            if p[parent.axis] <= parent.split:
                new = _Node(parent.point, parent.index, parent.axis, new, parent.right)
            else:
                new = _Node(parent.point, parent.index, parent.axis, parent.left, new)
        return KdTree(self.points, _root=new, _size=self.size - 1)

    def check_invariants(self):
        """Raise AssertionError if a split invariant is violated."""

        def walk(node, lo, hi):
            if node is None:
                return 0
            for axis, bound in lo:
                assert node.point[axis] > bound
            for axis, bound in hi:
                assert node.point[axis] <= bound
            return (
                1
                + walk(node.left, lo, hi + [(node.axis, node.split)])
                + walk(node.right, lo + [(node.axis, node.split)], hi)
            )

        assert walk(self.root, [], []) == self.size
