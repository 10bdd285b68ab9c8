"""Activation patterns, the direction alphabet, channel dropout and the
nearest-direction mapping rule."""

import csv
import io
import itertools
from dataclasses import dataclass

import numpy as np

from .kdtree import KdTree, squared_distances

PATTERN_CAP = 3 ** 15
DEDUP_TOL = 1e-9


def enumerate_patterns(m, free=None):
    """Yield every pattern in ``{-1, 0, 1}^m`` in base-3 counting order.

    Channel 0 is the most significant digit; digit values 0, 1, 2 map to
    -1, 0, 1. When ``free`` is given, only those channels vary and the
    others are held at 0.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    if free is None:
        for u in itertools.product((-1, 0, 1), repeat=m):
            yield np.array(u, dtype=np.int8)
        return
    free = list(free)
    for vals in itertools.product((-1, 0, 1), repeat=len(free)):
        u = np.zeros(m, dtype=np.int8)
        u[free] = vals
        yield u


@dataclass(frozen=True)
class DropoutMask:
    dropped: frozenset
    m: int

    def __init__(self, dropped=(), m=None):
        dropped = tuple(int(i) for i in dropped)
        if len(set(dropped)) != len(dropped):
            raise ValueError(f"duplicate channels in dropout mask {dropped}")
        if m is not None and any(not 0 <= i < m for i in dropped):
            raise ValueError(f"dropout channels {dropped} out of range for m={m}")
        object.__setattr__(self, "dropped", frozenset(dropped))
        object.__setattr__(self, "m", m)

    @classmethod
    def none(cls, m=None):
        return cls((), m)

    def free_channels(self, m):
        return [i for i in range(m) if i not in self.dropped]

    def __len__(self):
        return len(self.dropped)

    def __str__(self):
        return ";".join(str(i) for i in sorted(self.dropped))


def apply_dropout(pattern, mask):
    u = np.array(pattern, copy=True)
    if mask is not None and mask.dropped:
        u[sorted(mask.dropped)] = 0
    return u


def _key(d, tol):
    return tuple(np.round(np.asarray(d) / tol).astype(np.int64).tolist())


def _rep_order(u):
    return (int(np.count_nonzero(u)), tuple(int(x) for x in u))


class DirectionAlphabet:
    """Distinct one-step increments ``B_d u`` with a representative pattern each.

    Canonical order is the order of first appearance while enumerating
    patterns. The representative of a direction is the pattern with the
    fewest active channels, ties broken lexicographically; the stored
    direction is ``B_d`` applied to that representative.
    """

    def __init__(self, B_d, directions, representatives, dedup_tol=DEDUP_TOL, mask=None):
        self.B_d = np.asarray(B_d, dtype=float)
        self.directions = np.asarray(directions, dtype=float)
        self.representatives = np.asarray(representatives, dtype=np.int8)
        self.dedup_tol = dedup_tol
        self.mask = mask if mask is not None else DropoutMask.none(self.m)
        self.directions.flags.writeable = False
        self.representatives.flags.writeable = False
        self._lookup = {_key(d, dedup_tol): i for i, d in enumerate(self.directions)}
        self._avail_cache = {}
        self._tree = None

    @property
    def n(self):
        return self.B_d.shape[0]

    @property
    def m(self):
        return self.B_d.shape[1]

    def __len__(self):
        return len(self.directions)

    @property
    def zero_index(self):
        return self._lookup.get(_key(np.zeros(self.n), self.dedup_tol))

    def index_of(self, d):
        """Canonical index of direction ``d``, or None if absent."""
        return self._lookup.get(_key(d, self.dedup_tol))

    def available(self, mask):
        """Boolean vector of the directions still reachable under ``mask``."""
        if mask is None or not mask.dropped:
            return np.ones(len(self), dtype=bool)
        key = frozenset(mask.dropped)
        hit = self._avail_cache.get(key)
        if hit is None:
            sub = build_alphabet(self.B_d, mask, self.dedup_tol)
            hit = np.zeros(len(self), dtype=bool)
            for d in sub.directions:
                i = self.index_of(d)
                if i is not None:
                    hit[i] = True
            hit.flags.writeable = False
            self._avail_cache[key] = hit
        return hit

    def restrict(self, mask):
        """Directions available under ``mask`` as ``(canonical_indices, sub_alphabet)``."""
        sub = build_alphabet(self.B_d, mask, self.dedup_tol)
        idx = np.array([self.index_of(d) for d in sub.directions])
        return idx, sub

    def kdtree(self):
        if self._tree is None:
            self._tree = KdTree(self.directions)
        return self._tree

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            ["index"] + [f"d_{i}" for i in range(self.n)] + [f"rep_u_{j}" for j in range(self.m)]
        )
        for i, (d, u) in enumerate(zip(self.directions, self.representatives)):
            w.writerow([i] + [repr(float(v)) for v in d] + [int(x) for x in u])
        if path is None:
            return buf.getvalue()
        with open(path, "w") as fh:
            fh.write(buf.getvalue())


def build_alphabet(B_d, mask=None, dedup_tol=DEDUP_TOL, cap=PATTERN_CAP):
    B_d = np.asarray(B_d, dtype=float)
    n, m = B_d.shape
    mask = mask if mask is not None else DropoutMask.none(m)
    free = mask.free_channels(m)
    if 3 ** len(free) > cap:
        raise ValueError(
            f"{3 ** len(free)} patterns over {len(free)} channels exceeds the cap of {cap}"
        )
    order = []
    reps = {}
    if not free:
        patterns = [np.zeros(m, dtype=np.int8)]
    else:
        patterns = enumerate_patterns(m, free=free)
    for u in patterns:
        k = _key(B_d @ u, dedup_tol)
        best = reps.get(k)
        if best is None:
            order.append(k)
            reps[k] = u
        elif _rep_order(u) < _rep_order(best):
            reps[k] = u
    representatives = np.array([reps[k] for k in order], dtype=np.int8)
    # same matrix-vector product as the plant update, so values match bit for bit
    directions = np.array([B_d @ u.astype(float) for u in representatives])
    return DirectionAlphabet(B_d, directions, representatives, dedup_tol, mask)


def nearest_direction(alphabet, v, exclude_zero=False, available=None, backend="brute"):
    """Mapping rule: the Euclidean-nearest direction to ``v``.

    Returns ``(direction, canonical_index)``; equidistant candidates resolve
    to the lowest index. ``available`` optionally restricts the candidates.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (alphabet.n,):
        raise ValueError(f"vector has shape {v.shape}, expected ({alphabet.n},)")
    keep = np.ones(len(alphabet), dtype=bool) if available is None else np.array(available)
    z = alphabet.zero_index
    if exclude_zero and z is not None:
        keep[z] = False
    if not keep.any():
        raise ValueError("no candidate directions left")
    if backend == "kdtree":
        tree = alphabet.kdtree()
        for i in np.flatnonzero(~keep):
            tree = tree.remove(i)
        _, idx = tree.query(v)
    elif backend == "brute":
        d2 = squared_distances(alphabet.directions, v)
        d2[~keep] = np.inf
        idx = int(np.argmin(d2))
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return alphabet.directions[idx], idx


class MappingRule:
    """Nearest-direction map over a fixed candidate set backed by a kd-tree."""

    def __init__(self, alphabet, exclude_zero=True, available=None):
        self.alphabet = alphabet
        keep = np.ones(len(alphabet), dtype=bool) if available is None else np.array(available)
        if exclude_zero and alphabet.zero_index is not None:
            keep[alphabet.zero_index] = False
        if not keep.any():
            raise ValueError("no candidate directions left")
        tree = alphabet.kdtree()
        for i in np.flatnonzero(~keep):
            tree = tree.remove(i)
        self.tree = tree
        self.keep = keep

    def __call__(self, v):
        return self.tree.query(v)


class DropoutPolicy:
    """Per-step dropout masks: ``none``, a ``fixed`` channel set, or ``random``
    (``k`` distinct channels drawn uniformly each step from a seeded RNG)."""

    def __init__(self, mode="none", m=None, k=1, channels=(), seed=0):
        if mode not in ("none", "fixed", "random"):
            raise ValueError(f"unknown dropout mode {mode!r}")
        if mode == "random" and m is None:
            raise ValueError("random dropout needs the channel count m")
        if mode == "random" and not 0 <= k <= m:
            raise ValueError(f"cannot drop {k} of {m} channels")
        self.mode = mode
        self.m = m
        self.k = k
        self.fixed = DropoutMask(channels, m)
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def reset(self):
        self.rng = np.random.default_rng(self.seed)

    def next_mask(self):
        if self.mode == "none":
            return DropoutMask.none(self.m)
        if self.mode == "fixed":
            return self.fixed
        chosen = self.rng.choice(self.m, size=self.k, replace=False)
        return DropoutMask(sorted(int(c) for c in chosen), self.m)
