"""Samplers for Brownian bridges, loops, excursions, and the inversion map.

Paths are stored as a time grid plus an array of vertices.  Samplers take a
``numpy.random.Generator``; use :func:`make_rng` to build one from a
``(seed, stream)`` pair so that every worker owns an independent stream.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import special
from scipy.spatial import ConvexHull, QhullError

from .harmonic import DomainError


class InversionRejected(RuntimeError):
    """The path came too close to the origin to be inverted."""


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Generator for the pair ``(seed, stream)``; identical pairs give identical draws."""
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=(int(stream) & (2**64 - 1),))
    return np.random.Generator(np.random.PCG64(ss))


def stream_id(name: str, index: int) -> int:
    """64-bit stream id derived from an experiment name and a replicate index."""
    digest = hashlib.blake2b(f"{name}\x00{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def polyline_diameter(points: np.ndarray) -> float:
    """Largest vertex-to-vertex distance.

    The farthest pair lies on the convex hull, so only hull vertices are
    scanned; inputs too flat for a hull fall back to a pruned full scan.
    """
    p = np.asarray(points, dtype=float)
    if len(p) < 2:
        return 0.0
    if len(p) > 64:
        try:
            p = p[ConvexHull(p).vertices]
        except (QhullError, ValueError):
            pass
    lo, hi = p.min(axis=0), p.max(axis=0)
    best = float(np.max(hi - lo))
    # a point whose farthest possible partner (a box corner) is nearer than the box side cannot matter
    reach = np.sqrt(np.sum(np.maximum(np.abs(p - lo), np.abs(hi - p)) ** 2, axis=1))
    cand = p[reach >= best]
    best2 = best * best
    chunk = max(1, 4_000_000 // max(len(cand), 1))
    for i in range(0, len(cand), chunk):
        block = cand[i : i + chunk]
        d2 = np.sum((block[:, None, :] - cand[None, :, :]) ** 2, axis=-1)
        best2 = max(best2, float(d2.max()))
    return math.sqrt(best2)


@dataclass
class OpenPath:
    """A discretized path: strictly increasing times and one vertex per time."""

    times: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or len(self.points) != len(self.times):
            raise ValueError("points must be (m+1, d) matching times")

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    @cached_property
    def diameter(self) -> float:
        """Vertex diameter; a lower bound for the diameter of the continuous path."""
        return polyline_diameter(self.points)

    @cached_property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points.min(axis=0), self.points.max(axis=0)

    def radii(self, center=None) -> np.ndarray:
        c = 0.0 if center is None else np.asarray(center, dtype=float)
        return np.linalg.norm(self.points - c, axis=1)

    def _replace(self, times, points):
        return type(self)(times, points)


@dataclass
class Loop(OpenPath):
    """A closed path; ``points[0]`` and ``points[-1]`` are the same vertex."""

    def __post_init__(self):
        super().__post_init__()
        if not np.array_equal(self.points[0], self.points[-1]):
            raise ValueError("loop is not closed")

    @property
    def root(self) -> np.ndarray:
        return self.points[0]


# -- bridges -----------------------------------------------------------------


def bridge_vertices(x, y, t, steps, rng) -> np.ndarray:
    """Brownian bridge vertices on uniform grids, batched.

    ``x``, ``y`` have shape (n, d) and ``t`` shape (n,); every bridge uses the
    same number of steps.  Returns (n, steps+1, d) with exact endpoints.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    n, d = x.shape
    dt = t / steps
    inc = rng.standard_normal((n, steps, d)) * np.sqrt(dt)[:, None, None]
    w = np.concatenate([np.zeros((n, 1, d)), np.cumsum(inc, axis=1)], axis=1)
    frac = (np.arange(steps + 1) / steps)[None, :, None]
    pts = x[:, None, :] + frac * (y - x)[:, None, :] + w - frac * w[:, -1:, :]
    pts[:, 0, :] = x
    pts[:, -1, :] = y
    return pts


def sample_bridge(x, y, t: float, steps: int, rng) -> OpenPath:
    """Brownian bridge from ``x`` to ``y`` of duration ``t`` on ``steps`` intervals."""
    if not t > 0 or steps < 1:
        raise DomainError("need t > 0 and steps >= 1")
    x = np.asarray(x, dtype=float)
    pts = bridge_vertices(x[None], np.asarray(y, dtype=float)[None], [t], steps, rng)[0]
    return OpenPath(np.linspace(0.0, t, steps + 1), pts)


# -- loop measure in duration bands ------------------------------------------


def band_mass(t_min: float, t_max: float, d: int = 3) -> float:
    """Loop-measure mass per unit root volume of durations in ``[t_min, t_max]``."""
    tail = 0.0 if math.isinf(t_max) else t_max ** (-d / 2)
    return (2 * math.pi) ** (-d / 2) * (2.0 / d) * (t_min ** (-d / 2) - tail)


def band_cdf(t, t_min, t_max, d=3):
    t = np.asarray(t, dtype=float)
    hi = 0.0 if math.isinf(t_max) else t_max ** (-d / 2)
    return (t_min ** (-d / 2) - t ** (-d / 2)) / (t_min ** (-d / 2) - hi)


def sample_band_durations(t_min, t_max, size, rng, d=3) -> np.ndarray:
    """Inverse-CDF draws from the density proportional to ``t^{-1-d/2}`` on the band."""
    if not 0 < t_min < t_max:
        raise DomainError("need 0 < t_min < t_max")
    hi = 0.0 if math.isinf(t_max) else t_max ** (-d / 2)
    u = rng.random(size)
    return (t_min ** (-d / 2) - u * (t_min ** (-d / 2) - hi)) ** (-2.0 / d)


def steps_for(duration, dt_max, minimum=2):
    return np.maximum(minimum, np.ceil(np.asarray(duration) / dt_max - 1e-9).astype(int))


def sample_loop_duration_band(t_min, t_max, window, steps_per_unit, rng) -> Loop:
    """One loop from the loop measure restricted to root in ``window`` and T in the band.

    ``window`` is ``(lo, hi)`` corner arrays.  The number of steps is
    ``ceil(steps_per_unit * T)`` (at least two).
    """
    lo, hi = (np.asarray(a, dtype=float) for a in window)
    if np.any(hi <= lo):
        raise DomainError("empty window")
    root = lo + (hi - lo) * rng.random(lo.shape)
    t = float(sample_band_durations(t_min, t_max, 1, rng, d=len(lo))[0])
    m = int(steps_for(t, 1.0 / steps_per_unit))
    pts = bridge_vertices(root[None], root[None], [t], m, rng)[0]
    return Loop(np.linspace(0.0, t, m + 1), pts)


def loops_from_roots(roots, durations, dt_max, rng, min_steps=2) -> list[Loop]:
    """Root-to-root bridges; loops sharing a step count are sampled as one batch."""
    roots = np.asarray(roots, dtype=float)
    durations = np.asarray(durations, dtype=float)
    m = steps_for(durations, dt_max, min_steps)
    out: list[Loop | None] = [None] * len(roots)
    for steps in np.unique(m):
        idx = np.flatnonzero(m == steps)
        pts = bridge_vertices(roots[idx], roots[idx], durations[idx], int(steps), rng)
        for k, i in enumerate(idx):
            out[i] = Loop(np.linspace(0.0, durations[i], steps + 1), pts[k])
    return out


# -- excursions ----------------------------------------------------------------


def excursion_duration_cdf(t, distance, d=3):
    """CDF of the hitting duration of the excursion measure between points at ``distance``."""
    t = np.asarray(t, dtype=float)
    return special.gammaincc(d / 2 - 1, distance**2 / (2.0 * t))


def sample_excursion_duration(x, y, rng, size=None, d=None):
    """Hitting duration of the excursion from ``x`` to ``y``.

    The duration density is proportional to the heat kernel ``p_t(x, y)``,
    i.e. ``|x-y|^2 / (2G)`` with ``G ~ Gamma(d/2 - 1)``; for d=3 this is the
    Levy first-passage law.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    a = float(np.linalg.norm(x - y))
    if a == 0:
        raise DomainError("excursion endpoints must differ")
    d = d or x.shape[-1]
    g = rng.standard_gamma(d / 2 - 1, size)
    return a * a / (2.0 * g)


def sample_excursion(x, y, steps_per_unit, rng) -> OpenPath:
    """Excursion path: a bridge of the sampled hitting duration."""
    t = float(sample_excursion_duration(x, y, rng))
    m = int(steps_for(t, 1.0 / steps_per_unit))
    return sample_bridge(x, y, t, m, rng)


# -- inversion -------------------------------------------------------------------


def invert_points(points):
    p = np.asarray(points, dtype=float)
    return -p / np.sum(p * p, axis=-1, keepdims=True)


def invert_path(path: OpenPath, guard: float | None = None) -> OpenPath:
    """Image under ``x -> -x/|x|^2`` with the matching time change.

    New time increments are ``dt_i`` times the trapezoid average of
    ``|p|^{-4}`` at the segment ends.  Paths with a vertex inside the guard
    ball around the origin raise :class:`InversionRejected`.
    """
    r2 = np.sum(path.points**2, axis=1)
    if guard is None:
        guard = 1e-6 * float(np.sqrt(r2.max()))
    if np.any(r2 <= guard * guard):
        raise InversionRejected("path enters the origin guard ball")
    w = r2**-2
    dt = np.diff(path.times) * 0.5 * (w[:-1] + w[1:])
    times = np.concatenate([[0.0], np.cumsum(dt)])
    pts = invert_points(path.points)
    if isinstance(path, Loop):
        pts[-1] = pts[0]
    return path._replace(times, pts)


# -- adaptive refinement ----------------------------------------------------


def refine(path: OpenPath, needs, rng, max_rounds: int = 64) -> OpenPath:
    """Insert bridge midpoints on flagged segments until none is flagged.

    ``needs(p0, p1, dt)`` returns a boolean mask over segments.  Each inserted
    midpoint is drawn from the bridge law given its two neighbours, so the
    refined path has the same law at the old vertices.
    """
    t, p = path.times, path.points
    # work only on the segments still in play; new vertices are merged at the end by
    # (segment, dyadic offset), since times can tie in floating point on long paths
    t0, dt = t[:-1], np.diff(t)
    p0, p1 = p[:-1], p[1:]
    seg = np.arange(len(dt))
    off = np.zeros(len(dt), dtype=np.uint64)
    new_t, new_p, new_seg, new_off = [], [], [], []
    for k in range(min(max_rounds, 64)):
        if not len(dt):
            break
        mask = needs(p0, p1, dt)
        if not mask.any():
            break
        t0, dt, p0, p1 = t0[mask], dt[mask] / 2.0, p0[mask], p1[mask]
        seg, off = seg[mask], off[mask]
        mid = 0.5 * (p0 + p1) + rng.standard_normal(p0.shape) * np.sqrt(dt / 2.0)[:, None]
        half = off + np.uint64(1 << (63 - k))
        new_t.append(t0 + dt)
        new_p.append(mid)
        new_seg.append(seg)
        new_off.append(half)
        t0 = np.concatenate([t0, t0 + dt])
        dt = np.concatenate([dt, dt])
        p0, p1 = np.concatenate([p0, mid]), np.concatenate([mid, p1])
        seg, off = np.concatenate([seg, seg]), np.concatenate([off, half])
    if not new_t:
        return path
    t = np.concatenate([t, *new_t])
    p = np.concatenate([p, *new_p])
    keys_seg = np.concatenate([np.arange(len(path.times)), *new_seg])
    keys_off = np.concatenate([np.zeros(len(path.times), dtype=np.uint64), *new_off])
    order = np.lexsort((keys_off, keys_seg))
    return path._replace(t[order], p[order])


def _norm(v):
    return np.sqrt(np.einsum("ij,ij->i", v, v))


def near_sphere_rule(radius, center=None, rel=1.0 / 32, width=4.0, dt_floor=0.0):
    """Refinement rule: segments possibly touching the sphere, until ``sqrt(dt) <= rel * radius``."""
    c = 0.0 if center is None else np.asarray(center, dtype=float)
    target = (rel * radius) ** 2

    def needs(p0, p1, dt):
        d0 = np.abs(_norm(p0 - c) - radius)
        d1 = np.abs(_norm(p1 - c) - radius)
        return (dt > max(target, dt_floor)) & (np.minimum(d0, d1) < width * np.sqrt(dt))

    return needs


def near_spheres_rule(radii, center=None, rel=1.0 / 32, width=4.0):
    """:func:`near_sphere_rule` for several concentric spheres, with one norm evaluation per round."""
    c = 0.0 if center is None else np.asarray(center, dtype=float)
    radii = np.asarray(radii, dtype=float)
    targets = (rel * radii) ** 2

    def needs(p0, p1, dt):
        n0, n1 = _norm(p0 - c), _norm(p1 - c)
        reach = width * np.sqrt(dt)
        out = np.zeros(len(dt), dtype=bool)
        for radius, target in zip(radii, targets):
            out |= (dt > target) & (np.minimum(np.abs(n0 - radius), np.abs(n1 - radius)) < reach)
        return out

    return needs


def relative_rule(h, floor, reach=None, width=3.0, center=None):
    """Conformal resolution: ``sqrt(dt) <= h * max(|p|, floor)`` on segments within ``reach``."""
    c = 0.0 if center is None else np.asarray(center, dtype=float)

    def needs(p0, p1, dt):
        s = np.sqrt(dt)
        near = np.minimum(_norm(p0 - c), _norm(p1 - c)) - width * s
        scale = np.maximum(near, floor)
        mask = s > h * scale
        if reach is not None:
            mask &= near <= reach
        return mask

    return needs


def any_rule(*rules):
    def needs(p0, p1, dt):
        out = rules[0](p0, p1, dt)
        for r in rules[1:]:
            out = out | r(p0, p1, dt)
        return out

    return needs


def _gap_probability(d0, d1, dt):
    """Chance that a bridge segment crosses a flat wall at distances d0, d1 >= 0."""
    with np.errstate(over="ignore", divide="ignore"):
        return np.exp(-2.0 * d0 * d1 / dt)


def sphere_hit_probability(path: OpenPath, radius, center=None) -> float:
    """Probability that the continuous path meets the sphere, given its vertices.

    Vertices on both sides give 1.  Otherwise segments are treated as
    independent bridges facing a locally flat wall.
    """
    rho = path.radii(center)
    inside = rho <= radius
    if inside.any() and (~inside).any():
        return 1.0
    gap = np.abs(rho - radius)
    p = _gap_probability(gap[:-1], gap[1:], np.diff(path.times))
    return float(-np.expm1(np.sum(np.log1p(-np.minimum(p, 1.0)))))


def segment_crossing_draws(path: OpenPath, radius, rng, center=None) -> np.ndarray:
    """Random indicators, one per segment, of a sub-grid visit across the sphere."""
    rho = path.radii(center)
    gap = np.abs(rho - radius)
    side = rho <= radius
    p = _gap_probability(gap[:-1], gap[1:], np.diff(path.times))
    p = np.where(side[:-1] == side[1:], p, 0.0)
    return rng.random(len(p)) < p


def count_crossings(loop: Loop, r_in: float, r_out: float, rng, center=None) -> int:
    """Number of traversals of the shell ``r_in < |x - c| < r_out`` by a loop.

    Vertex labels mark the outer region (``|x| >= r_out``) and the inner
    region (``|x| <= r_in``); sub-grid visits are added by random draws.  The
    count is the number of inner runs in the cyclic label sequence.
    """
    rho = loop.radii(center)
    lab = np.where(rho >= r_out, 1, np.where(rho <= r_in, -1, 0))
    out_hits = segment_crossing_draws(loop, r_out, rng, center) & (lab[:-1] != 1) & (lab[1:] != 1)
    in_hits = segment_crossing_draws(loop, r_in, rng, center) & (lab[:-1] != -1) & (lab[1:] != -1)
    seq = []
    for i in range(len(lab) - 1):
        if lab[i]:
            seq.append(lab[i])
        if out_hits[i]:
            seq.append(1)
        if in_hits[i]:
            seq.append(-1)
    if not seq or min(seq) == max(seq):
        return 0
    runs = [seq[0]]
    for s in seq[1:]:
        if s != runs[-1]:
            runs.append(s)
    if len(runs) > 1 and runs[0] == runs[-1]:
        runs.pop()
    return runs.count(-1)


def bridge_deviation_tail(a, t, d=3):
    """Upper bound on P(sup_s |bridge(s) - root| >= a) for a duration-t bridge."""
    a = np.asarray(a, dtype=float)
    return np.minimum(1.0, 2.0 * d * np.exp(-2.0 * a * a / (d * np.asarray(t, dtype=float))))
