"""Loop clusters under epsilon-proximity, with sphere-crossing queries.

Two loops are adjacent when some vertex of one lies within ``epsilon`` of a
vertex of the other.  Distances are Euclidean, or measured after the
log-polar embedding ``x -> (log|x|, x/|x|)``, which is conformal with
``|de| = |dx|/|x|`` and therefore treats all scales alike.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import io as lio
from .harmonic import DomainError

METRICS = ("euclidean", "logpolar")


def logpolar(points, center=None) -> np.ndarray:
    """Embed points as ``(log|x|, x/|x|)``; the origin has no image."""
    p = np.asarray(points, dtype=float)
    if center is not None:
        p = p - np.asarray(center, dtype=float)
    r = np.linalg.norm(p, axis=-1, keepdims=True)
    return np.concatenate([np.log(r), p / r], axis=-1)


class UnionFind:
    """Disjoint sets over ``0..n-1`` with union by size and path compression."""

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, i: int) -> int:
        parent = self.parent
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    def union(self, i: int, j: int) -> int:
        a, b = self.find(i), self.find(j)
        if a == b:
            return a
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        return a

    def canonical(self) -> np.ndarray:
        """Label of each element: the smallest element of its set."""
        n = len(self.parent)
        roots = np.fromiter((self.find(i) for i in range(n)), dtype=np.int64, count=n)
        smallest = np.full(n, n, dtype=np.int64)
        np.minimum.at(smallest, roots, np.arange(n))
        return smallest[roots]


@dataclass
class CrossingQuery:
    """Event that one cluster touches both spheres ``inner`` and ``outer`` around ``center``."""

    inner: float
    outer: float = 1.0
    tol: float | None = None
    center: tuple | None = None

    def __post_init__(self):
        if not 0 < self.inner < self.outer:
            raise DomainError("need 0 < inner < outer")
        if self.tol is not None and self.tol <= 0:
            raise DomainError("surface tolerance must be positive")


@dataclass
class ClusterIndex:
    """Adjacency between loops and the resulting cluster labels.

    ``pairs`` lists adjacent loop pairs (i < j) and ``gap`` their smallest
    vertex distance, so coarser-to-finer tolerances and loop subsets can be
    relabelled without another neighbour search.
    """

    loops: list
    epsilon: float
    metric: str
    center: np.ndarray
    pairs: np.ndarray
    gap: np.ndarray
    labels: np.ndarray
    active: np.ndarray
    owner: np.ndarray = field(repr=False)
    radii: np.ndarray = field(repr=False)
    window: tuple | None = None

    @property
    def n_loops(self) -> int:
        return len(self.loops)

    def relabel(self, epsilon: float | None = None, keep=None) -> "ClusterIndex":
        """Labels at a smaller tolerance and/or for a subset of loops (inactive loops get -1)."""
        eps = self.epsilon if epsilon is None else float(epsilon)
        if eps > self.epsilon * (1 + 1e-12):
            raise DomainError("can only tighten the tolerance of an index")
        active = self.active.copy() if keep is None else self.active & np.asarray(keep, dtype=bool)
        if len(self.pairs):
            sel = (self.gap <= eps) & active[self.pairs[:, 0]] & active[self.pairs[:, 1]]
        else:
            sel = np.zeros(0, bool)
        labels = _label(self.n_loops, self.pairs[sel], active)
        return ClusterIndex(self.loops, eps, self.metric, self.center, self.pairs[sel], self.gap[sel], labels,
                            active, self.owner, self.radii, self.window)

    def touching(self, radius: float, tol: float | None = None) -> np.ndarray:
        """Per loop: a vertex within ``tol`` of the sphere, or consecutive vertices on opposite sides."""
        tol = self.epsilon if tol is None else tol
        if self.metric == "logpolar":
            dist = np.abs(np.log(self.radii) - np.log(radius))
        else:
            dist = np.abs(self.radii - radius)
        near = dist <= tol
        side = self.radii <= radius
        flip = (side[1:] != side[:-1]) & (self.owner[1:] == self.owner[:-1])
        hit = np.zeros(self.n_loops, dtype=bool)
        hit[self.owner[near]] = True
        hit[self.owner[1:][flip]] = True
        return hit & self.active

    def members(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)


def _label(n, pairs, active) -> np.ndarray:
    uf = UnionFind(n)
    for i, j in pairs.tolist():
        uf.union(i, j)
    lab = uf.canonical()
    return np.where(active, lab, -1)


def _coords(loops, metric, center):
    pts = [np.asarray(getattr(lp, "points", lp), dtype=float) for lp in loops]
    owner = np.concatenate([np.full(len(p), i) for i, p in enumerate(pts)]) if pts else np.zeros(0, int)
    allp = np.concatenate(pts) if pts else np.zeros((0, 3))
    radii = np.linalg.norm(allp - center, axis=1)
    if metric == "logpolar":
        if np.any(radii == 0):
            raise DomainError("log-polar metric is undefined at the center")
        emb = logpolar(allp, center)
    else:
        emb = allp
    return emb, owner, radii


def build_index(soup, epsilon: float, metric: str = "euclidean", center=None, window=None) -> ClusterIndex:
    """Cluster labels of the loops in ``soup`` (a LoopSoup or a list of loops / vertex arrays).

    Candidate vertex pairs come from a k-d tree neighbour search; only pairs
    between distinct loops are kept and reduced to one entry per loop pair.
    """
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    if metric not in METRICS:
        raise DomainError(f"metric must be one of {METRICS}")
    loops = list(getattr(soup, "loops", soup))
    center = np.zeros(3) if center is None else np.asarray(center, dtype=float)
    emb, owner, radii = _coords(loops, metric, center)
    n = len(loops)
    pairs = np.zeros((0, 2), dtype=np.int64)
    gap = np.zeros(0)
    if n > 1:
        tree = cKDTree(emb)
        vp = tree.query_pairs(epsilon, output_type="ndarray")
        if len(vp):
            a, b = owner[vp[:, 0]], owner[vp[:, 1]]
            diff = a != b
            vp, a, b = vp[diff], a[diff], b[diff]
            if len(vp):
                lo, hi = np.minimum(a, b), np.maximum(a, b)
                dist = np.linalg.norm(emb[vp[:, 0]] - emb[vp[:, 1]], axis=1)
                key = lo * n + hi
                order = np.lexsort((dist, key))
                key, dist = key[order], dist[order]
                first = np.concatenate([[True], key[1:] != key[:-1]])
                pairs = np.column_stack([key[first] // n, key[first] % n])
                gap = dist[first]
    active = np.ones(n, dtype=bool)
    labels = _label(n, pairs, active)
    return ClusterIndex(loops, float(epsilon), metric, center, pairs, gap, labels, active, owner, radii, window)


def crossing_event(index: ClusterIndex, q: CrossingQuery) -> bool:
    """True when some cluster touches both spheres of the query."""
    if q.center is not None and not np.allclose(q.center, index.center):
        raise DomainError("query center differs from the index center")
    if index.window is not None:
        lo, hi = (np.asarray(a) for a in index.window)
        c = index.center
        if np.any(c - q.outer < lo) or np.any(c + q.outer > hi):
            raise DomainError("query sphere leaves the soup window")
    t_in = index.touching(q.inner, q.tol)
    t_out = index.touching(q.outer, q.tol)
    if not (t_in.any() and t_out.any()):
        return False
    return bool(np.intersect1d(index.labels[t_in], index.labels[t_out]).size)


def crossing_events(index: ClusterIndex, inner_radii, outer: float = 1.0, tol=None) -> np.ndarray:
    """:func:`crossing_event` for several inner radii sharing the outer sphere."""
    t_out = index.touching(outer, tol)
    lab_out = np.unique(index.labels[t_out])
    out = []
    for r in inner_radii:
        t_in = index.touching(r, tol)
        out.append(bool(t_in.any() and np.intersect1d(index.labels[t_in], lab_out).size))
    return np.array(out, dtype=bool)


def connected(index: ClusterIndex, a, b) -> bool:
    """True when some loop of ``a`` shares a cluster with some loop of ``b``."""
    a = np.asarray(list(a), dtype=int)
    b = np.asarray(list(b), dtype=int)
    for ids in (a, b):
        if ids.size and (ids.min() < 0 or ids.max() >= index.n_loops or not index.active[ids].all()):
            raise DomainError("unknown loop id")
    return bool(np.intersect1d(index.labels[a], index.labels[b]).size)


def cluster_table(index: ClusterIndex, q: CrossingQuery | None = None) -> list[dict]:
    t_in = index.touching(q.inner, q.tol) if q else np.zeros(index.n_loops, bool)
    t_out = index.touching(q.outer, q.tol) if q else np.zeros(index.n_loops, bool)
    rows = []
    for i, lp in enumerate(index.loops):
        if not index.active[i]:
            continue
        rows.append({
            "loop_id": i,
            "cluster_label": int(index.labels[i]),
            "n_vertices": len(getattr(lp, "points", lp)),
            "diameter": float(getattr(lp, "diameter", np.nan)),
            "touches_inner": bool(t_in[i]),
            "touches_outer": bool(t_out[i]),
        })
    return rows


CLUSTER_COLUMNS = ["loop_id", "cluster_label", "n_vertices", "diameter", "touches_inner", "touches_outer"]


def dump_clusters(index: ClusterIndex, path, q: CrossingQuery | None = None):
    return lio.write_csv(path, CLUSTER_COLUMNS, cluster_table(index, q))


def brute_force_labels(loops, epsilon: float, metric: str = "euclidean", center=None) -> np.ndarray:
    """Reference labelling by breadth-first search over all loop pairs."""
    center = np.zeros(3) if center is None else np.asarray(center, dtype=float)
    pts = [np.asarray(getattr(lp, "points", lp), dtype=float) for lp in loops]
    if metric == "logpolar":
        pts = [logpolar(p, center) for p in pts]
    n = len(pts)
    adj = [[] for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            d2 = np.sum((pts[i][:, None, :] - pts[j][None, :, :]) ** 2, axis=-1)
            if d2.min() <= epsilon * epsilon:
                adj[i].append(j)
                adj[j].append(i)
    labels = np.full(n, -1)
    for s in range(n):
        if labels[s] >= 0:
            continue
        labels[s] = s
        stack = [s]
        while stack:
            v = stack.pop()
            for w in adj[v]:
                if labels[w] < 0:
                    labels[w] = s
                    stack.append(w)
    return labels
