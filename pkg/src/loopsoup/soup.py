"""Poisson loop soups: windowed generation with a diameter band, and targeted cell plans.

Two generators live here.  :func:`generate_soup` realizes the soup in a box,
proposing durations from a band that covers the diameter band and thinning
by vertex diameter.  :class:`CellPlan` stratifies roots into shells around a
target and durations into geometric bands, and drops cells whose loops
provably (up to a tiny tail bound) cannot realize the event of interest.
Both produce exact Poisson counts per proposal region.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, optimize, stats

from . import io as lio
from .harmonic import DomainError
from .paths import (
    Loop,
    band_mass,
    bridge_vertices,
    count_crossings,
    loops_from_roots,
    make_rng,
    near_spheres_rule,
    refine,
    sample_band_durations,
    stream_id,
)
from .results import Estimate


class ConfigError(ValueError):
    """A soup configuration that cannot be realized as requested."""


# -- tail bounds for bridges ------------------------------------------------------

# (number of directions, cosine of the covering angle) for Fibonacci point sets
_DIRECTIONS = ((6, 0.5773), (24, 0.845), (48, 0.918), (96, 0.956), (192, 0.975), (384, 0.985))


def sup_tail(a, t):
    """Upper bound on P(max_s |B_s - B_0| >= a) for a 3d bridge of duration t."""
    x = 2.0 * np.square(a) / np.asarray(t, dtype=float)
    best = np.ones(np.broadcast(x).shape)
    for n, c in _DIRECTIONS:
        best = np.minimum(best, n * np.exp(-x * c * c))
    return best


def kuiper_sf(x):
    """Tail of the range of a standard Brownian bridge."""
    x = np.asarray(x, dtype=float)
    xs = np.maximum(x, 0.4)[..., None] ** 2
    k2 = np.arange(1, 13) ** 2.0
    out = np.sum(2.0 * (4.0 * k2 * xs - 1.0) * np.exp(-2.0 * k2 * xs), axis=-1)
    return np.clip(np.where(x < 0.4, 1.0, out), 0.0, 1.0)


def range_tail(D, t):
    """Upper bound on P(diameter >= D) for a 3d bridge of duration t."""
    s = np.asarray(D, dtype=float) / np.sqrt(np.asarray(t, dtype=float))
    best = np.ones(np.broadcast(s).shape)
    for n, c in _DIRECTIONS:
        best = np.minimum(best, n * kuiper_sf(s * c))
    return best


def small_diameter_prob(D, t):
    """Upper bound on P(diameter <= D): the bridge midpoint must stay within D of the root."""
    return stats.chi2.cdf(4.0 * np.square(D) / np.asarray(t, dtype=float), 3)


# -- cell bounds -------------------------------------------------------------


@dataclass(frozen=True)
class Reach:
    """The loop meets the closed ball of ``radius`` (inward) or leaves it (outward)."""

    radius: float
    inward: bool = True

    def __call__(self, ra, rb, ta, tb):
        if self.inward:
            gap = np.maximum(ra - self.radius, 0.0)
            with np.errstate(divide="ignore"):
                harm = np.where(ra > self.radius, 2**2.5 * self.radius / np.maximum(ra, 1e-300), 1.0)
            return np.minimum(sup_tail(gap, tb), np.minimum(harm, 1.0))
        gap = np.maximum(self.radius - rb, 0.0)
        return sup_tail(gap, tb)


@dataclass(frozen=True)
class MinDiameter:
    diameter: float

    def __call__(self, ra, rb, ta, tb):
        return range_tail(self.diameter, tb)


@dataclass(frozen=True)
class RelativeSize:
    """Log-polar diameter at least ``delta`` (the loop must be large compared with its distance to the center)."""

    delta: float

    def __call__(self, ra, rb, ta, tb):
        s = self.delta / (1.0 + self.delta)
        return np.minimum(1.0, sup_tail(s * ra, tb) + range_tail(self.delta * (1 - s) * ra, tb))


@dataclass(frozen=True)
class Confined:
    """The loop stays inside the ball of ``radius``."""

    radius: float

    def __call__(self, ra, rb, ta, tb):
        big = 2.0 * self.radius
        b = 2**2.5 * np.exp(-(math.pi**2) * (np.asarray(ta) / 2.0) / (2.0 * big * big))
        return np.where(np.asarray(ra) >= self.radius, 0.0, np.minimum(1.0, b))


@dataclass(frozen=True)
class AllOf:
    parts: tuple

    def __call__(self, ra, rb, ta, tb):
        out = 1.0
        for p in self.parts:
            out = np.minimum(out, p(ra, rb, ta, tb))
        return out


def geometric_edges(lo: float, hi: float, ratio: float = 2.0) -> np.ndarray:
    n = max(1, int(math.ceil(math.log(hi / lo) / math.log(ratio) - 1e-12)))
    return lo * ratio ** np.arange(n + 1)


@dataclass
class CellPlan:
    """Root shells around ``center`` crossed with duration bands, with loop-measure weights."""

    center: np.ndarray
    ra: np.ndarray
    rb: np.ndarray
    ta: np.ndarray
    tb: np.ndarray
    weight: np.ndarray  # alpha * shell volume * band mass
    bound: np.ndarray  # upper bound on the event probability per loop
    dropped: float = 0.0  # sum of weight*bound over discarded cells

    def __len__(self):
        return len(self.ra)

    @property
    def total_weight(self) -> float:
        return float(self.weight.sum())

    def scaled(self, lam: float) -> "CellPlan":
        """The same plan after scaling space by ``lam`` (durations by ``lam**2``)."""
        return CellPlan(
            self.center * lam, self.ra * lam, self.rb * lam, self.ta * lam**2, self.tb * lam**2,
            self.weight.copy(), self.bound.copy(), self.dropped,
        )


def plan_cells(center, radial_edges, time_edges, bound, alpha: float = 1.0, tol: float = 1e-7) -> CellPlan:
    """Build the cells and discard those whose bounded contribution is below ``tol``.

    ``radial_edges`` starts at 0 (a ball around the center), then shells.
    """
    center = np.asarray(center, dtype=float)
    re = np.asarray(radial_edges, dtype=float)
    te = np.asarray(time_edges, dtype=float)
    ra, ta = np.meshgrid(re[:-1], te[:-1], indexing="ij")
    rb, tb = np.meshgrid(re[1:], te[1:], indexing="ij")
    ra, rb, ta, tb = (a.ravel() for a in (ra, rb, ta, tb))
    vol = 4.0 / 3.0 * math.pi * (rb**3 - ra**3)
    w = alpha * vol * np.array([band_mass(a, b) for a, b in zip(ta, tb)])
    u = np.broadcast_to(bound(ra, rb, ta, tb), ra.shape).astype(float)
    keep = w * u > tol
    return CellPlan(center, ra[keep], rb[keep], ta[keep], tb[keep], w[keep], u[keep], float(np.sum((w * u)[~keep])))


def sample_cell(plan: CellPlan, i: int, n: int, rng, steps: int = 32):
    """``n`` loops from cell ``i``: roots, durations and (n, steps+1, 3) vertices."""
    d = len(plan.center)
    u = rng.random(n)
    rad = (plan.ra[i] ** 3 + u * (plan.rb[i] ** 3 - plan.ra[i] ** 3)) ** (1.0 / 3.0)
    dirs = rng.standard_normal((n, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    roots = plan.center + rad[:, None] * dirs
    t = sample_band_durations(plan.ta[i], plan.tb[i], n, rng)
    pts = bridge_vertices(roots, roots, t, steps, rng) if n else np.zeros((0, steps + 1, d))
    return roots, t, pts


def batch_to_loops(t, pts) -> list[Loop]:
    steps = pts.shape[1] - 1
    grid = np.linspace(0.0, 1.0, steps + 1)
    return [Loop(grid * ti, p) for ti, p in zip(t, pts)]


def ball_hit_bound(pts, t, radius, center=None):
    """Upper bound, per loop, on the chance that the path between vertices enters the ball.

    Each segment is compared with the half-space tangent to the ball in the
    direction of the segment midpoint; the union bound is summed over segments.
    ``pts`` has shape (n, m+1, d) on uniform grids of duration ``t``.
    """
    c = 0.0 if center is None else np.asarray(center, dtype=float)
    p = pts - c
    dt = np.asarray(t, dtype=float)[:, None] / (pts.shape[1] - 1)
    mid = 0.5 * (p[:, :-1] + p[:, 1:])
    nm = np.linalg.norm(mid, axis=-1, keepdims=True)
    u = mid / np.maximum(nm, 1e-300)
    g0 = np.sum(p[:, :-1] * u, axis=-1) - radius
    g1 = np.sum(p[:, 1:] * u, axis=-1) - radius
    pos = (g0 > 0) & (g1 > 0)
    seg = np.where(pos, np.exp(-2.0 * np.maximum(g0, 0) * np.maximum(g1, 0) / dt), 1.0)
    return np.minimum(1.0, seg.sum(axis=1))


# -- windowed soups ----------------------------------------------------------------


@dataclass
class SoupConfig:
    """Parameters of a windowed soup restricted to a diameter band."""

    alpha: float
    window: tuple  # (lo corner, hi corner)
    diam_band: tuple  # (delta_min, delta_max)
    steps_per_unit: float = 64.0
    seed: int = 0
    duration_band: tuple | None = None
    mode: str = "intersect"  # or "confine"
    coverage_tol: float = 1e-3

    def __post_init__(self):
        lo, hi = (np.asarray(a, dtype=float) for a in self.window)
        self.window = (tuple(lo.tolist()), tuple(hi.tolist()))
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ConfigError("window must be a nonempty box")
        dmin, dmax = self.diam_band = tuple(float(x) for x in self.diam_band)
        if not 0 < dmin < dmax:
            raise ConfigError("diameter band must satisfy 0 < delta_min < delta_max")
        if self.mode not in ("intersect", "confine"):
            raise ConfigError("mode is 'intersect' or 'confine'")
        if self.steps_per_unit <= 0:
            raise ConfigError("steps_per_unit must be positive")
        if self.duration_band is not None:
            a, b = self.duration_band
            if not 0 < a < b:
                raise ConfigError("duration band must satisfy 0 < t_lo < t_hi")
            self.duration_band = (float(a), float(b))

    @property
    def dim(self) -> int:
        return len(self.window[0])

    def proposal_band(self) -> tuple[float, float]:
        return self.duration_band or duration_band_for(self.diam_band, self.coverage_tol)

    def to_dict(self) -> dict:
        return asdict(self)


def _loop_density(t):
    return (2 * math.pi) ** -1.5 * t**-2.5


def _band_proxy(diam_band) -> float:
    # typical bridge diameter is about 1.4 sqrt(t)
    dmin, dmax = diam_band
    return band_mass((dmin / 1.4) ** 2, (dmax / 1.4) ** 2)


def _short_defect(dmin, t_lo):
    f = lambda t: 0.0 if t < 1e-6 * dmin**2 else _loop_density(t) * float(range_tail(dmin, t))
    return integrate.quad(f, 0.0, t_lo, limit=200)[0]


def _long_defect(dmax, t_hi):
    if not math.isfinite(t_hi):
        return 0.0
    f = lambda t: _loop_density(t) * float(small_diameter_prob(dmax, t))
    return integrate.quad(f, t_hi, np.inf, limit=200)[0]


def coverage_defect(diam_band, t_lo, t_hi) -> tuple[float, float]:
    """Bounded loop-measure mass (per unit volume) in the diameter band but outside the duration band."""
    return _coverage_defect(float(diam_band[0]), float(diam_band[1]), float(t_lo), float(t_hi))


@functools.lru_cache(maxsize=64)
def _coverage_defect(dmin, dmax, t_lo, t_hi):
    return _short_defect(dmin, t_lo), _long_defect(dmax, t_hi)


@functools.lru_cache(maxsize=64)
def _band_for(dmin: float, dmax: float, tol: float) -> tuple[float, float]:
    diam_band = (dmin, dmax)
    target = 0.5 * tol * _band_proxy(diam_band)
    f_lo = lambda lt: _short_defect(dmin, math.exp(lt)) - target
    f_hi = lambda lt: _long_defect(dmax, math.exp(lt)) - target
    t_lo = math.exp(optimize.brentq(f_lo, math.log(dmin**2 * 1e-4), math.log(dmin**2 * 4)))
    t_hi = math.exp(optimize.brentq(f_hi, math.log(dmax**2 * 1e-2), math.log(dmax**2 * 1e8)))
    return t_lo, t_hi


def duration_band_for(diam_band, tol: float = 1e-3) -> tuple[float, float]:
    """Narrowest duration band whose bounded coverage defect is below ``tol`` of the band mass."""
    return _band_for(float(diam_band[0]), float(diam_band[1]), float(tol))


@dataclass
class LoopSoup:
    loops: list
    config: SoupConfig
    proposal_count: int = 0
    proposal_mass: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def realized_count(self) -> int:
        return len(self.loops)

    @property
    def thinning_acceptance(self) -> float:
        return self.realized_count / self.proposal_count if self.proposal_count else float("nan")

    def __len__(self):
        return len(self.loops)

    def subset(self, keep) -> "LoopSoup":
        return LoopSoup([lp for lp, k in zip(self.loops, keep) if k], self.config, self.proposal_count,
                        self.proposal_mass, dict(self.diagnostics))

    def __add__(self, other: "LoopSoup") -> "LoopSoup":
        return LoopSoup(self.loops + other.loops, self.config, self.proposal_count + other.proposal_count,
                        self.proposal_mass + other.proposal_mass, {})


def generate_soup(config: SoupConfig, rng=None) -> LoopSoup:
    """One realization of the windowed soup with diameters in the band.

    Roots are proposed in the window enlarged by ``delta_max`` on every side
    with durations from the proposal band; loops outside the diameter band,
    or missing the window (``confine`` mode: not contained in it), are thinned.
    """
    rng = rng if rng is not None else make_rng(config.seed)
    t_lo, t_hi = config.proposal_band()
    lo_def, hi_def = coverage_defect(config.diam_band, t_lo, t_hi)
    proxy = _band_proxy(config.diam_band)
    if (lo_def + hi_def) > config.coverage_tol * proxy * 1.0001:
        raise ConfigError(
            f"duration band [{t_lo:g}, {t_hi:g}] leaves a bounded defect of {(lo_def + hi_def) / proxy:.2e} "
            f"of the band mass (tolerance {config.coverage_tol:g})"
        )
    dmin, dmax = config.diam_band
    lo, hi = (np.asarray(a) for a in config.window)
    elo, ehi = lo - dmax, hi + dmax
    vol = float(np.prod(ehi - elo))
    mass = config.alpha * vol * band_mass(t_lo, t_hi, config.dim)
    n = int(rng.poisson(mass))
    roots = elo + (ehi - elo) * rng.random((n, config.dim))
    t = sample_band_durations(t_lo, t_hi, n, rng, d=config.dim)
    kept = []
    for lp in loops_from_roots(roots, t, 1.0 / config.steps_per_unit, rng):
        if not dmin <= lp.diameter <= dmax:
            continue
        blo, bhi = lp.bbox
        if config.mode == "confine":
            ok = np.all(blo >= lo) and np.all(bhi <= hi)
        else:
            ok = np.all(bhi >= lo) and np.all(blo <= hi)
        if ok:
            kept.append(lp)
    diag = {"duration_band": [t_lo, t_hi], "coverage_defect": (lo_def + hi_def) / proxy,
            "enlarged_window": [elo.tolist(), ehi.tolist()]}
    return LoopSoup(kept, config, n, mass, diag)


def soup_from_plan(plan: CellPlan, rng, steps: int = 32, keep=None) -> tuple[list, dict]:
    """Poisson soup over a cell plan; ``keep(t, pts)`` may thin each cell's batch."""
    out, proposed = [], 0
    for i in range(len(plan)):
        n = int(rng.poisson(plan.weight[i]))
        if n == 0:
            continue
        proposed += n
        _, t, pts = sample_cell(plan, i, n, rng, steps)
        if keep is not None:
            mask = keep(t, pts)
            t, pts = t[mask], pts[mask]
        out.extend(batch_to_loops(t, pts))
    return out, {"proposed": proposed, "proposal_mass": plan.total_weight, "dropped_bound": plan.dropped}


# -- shell crossings -----------------------------------------------------------------


def crossing_plan(r: float, alpha: float = 1.0, t_max: float = 1e4, tol: float = 1e-7) -> CellPlan:
    """Cells for loops that meet ``B(r)`` and leave ``B(1)``."""
    radial = np.concatenate([[0.0], geometric_edges(r, 4.0 * math.sqrt(t_max) + 2.0)])
    times = geometric_edges(1e-3, t_max)
    bound = AllOf((Reach(r, True), Reach(1.0, False), MinDiameter(1.0 - r)))
    return plan_cells(np.zeros(3), radial, times, bound, alpha, tol)


def refine_for_spheres(loop: Loop, radii, rng, rel: float = 1.0 / 64) -> Loop:
    return refine(loop, near_spheres_rule(radii, rel=rel), rng)


def crossing_counts_in_soup(plan: CellPlan, r: float, rng, steps: int = 32, prefilter: float = 1e-10):
    """Crossing multiplicities of the loops of one soup realization that cross the shell."""
    counts = []
    for i in range(len(plan)):
        n = int(rng.poisson(plan.weight[i]))
        if n == 0:
            continue
        _, t, pts = sample_cell(plan, i, n, rng, steps)
        cand = ball_hit_bound(pts, t, r) > prefilter
        for ti, p in zip(t[cand], pts[cand]):
            lp = Loop(np.linspace(0.0, ti, steps + 1), p)
            lp = refine_for_spheres(lp, (r, 1.0), rng)
            k = count_crossings(lp, r, 1.0, rng)
            if k:
                counts.append(k)
    return counts


def shell_crossing_count(alpha: float, r: float, n: int, replicates: int, seed: int = 0,
                         t_max: float = 1e4, name: str = "shell-crossing", return_counts: bool = False):
    """Mean number of soup loops crossing ``B(1) minus B(r)`` exactly ``n`` times.

    Each replicate is an independent soup realization; the per-soup counts are
    returned as well when ``return_counts`` is set (``n`` may then be a tuple).
    """
    if not 0 < r < 1:
        raise DomainError("need 0 < r < 1")
    ns = (n,) if np.isscalar(n) else tuple(n)
    if min(ns) < 1:
        raise DomainError("crossing multiplicity must be positive")
    plan = crossing_plan(r, alpha, t_max)
    per = np.zeros((replicates, len(ns)), dtype=int)
    for k in range(replicates):
        rng = make_rng(seed, stream_id(name, k))
        c = crossing_counts_in_soup(plan, r, rng)
        for j, nn in enumerate(ns):
            per[k, j] = sum(1 for x in c if x == nn)
    ests = [Estimate.from_replicates(per[:, j], seed, r=r, n=nn, alpha=alpha, t_max=t_max) for j, nn in enumerate(ns)]
    out = ests[0] if np.isscalar(n) else ests
    return (out, per) if return_counts else out


# -- persistence ------------------------------------------------------------------


def save_soup(soup: LoopSoup, directory) -> Path:
    """Loop records (one binary file) plus a versioned manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lio.save_loops(directory / "loops.bin", soup.loops)
    manifest = {
        "schema": lio.SOUP_SCHEMA,
        "config": soup.config.to_dict() if hasattr(soup.config, "to_dict") else soup.config,
        "counts": {"proposed": soup.proposal_count, "realized": soup.realized_count},
        "proposal_mass": soup.proposal_mass,
        "acceptance": soup.thinning_acceptance,
        "seed": getattr(soup.config, "seed", None),
        "diagnostics": soup.diagnostics,
        "loops": [lio.path_sidecar(lp) for lp in soup.loops],
    }
    lio.write_json(directory / "manifest.json", manifest)
    return directory


def load_soup(directory) -> LoopSoup:
    directory = Path(directory)
    man = json.loads((directory / "manifest.json").read_text())
    if man.get("schema") != lio.SOUP_SCHEMA:
        raise ValueError(f"unsupported soup schema {man.get('schema')!r}")
    cfg = man["config"]
    config = SoupConfig(**cfg) if isinstance(cfg, dict) and "alpha" in cfg else cfg
    dim = config.dim if isinstance(config, SoupConfig) else 3
    loops = lio.load_loops(directory / "loops.bin", dim)
    return LoopSoup(loops, config, man["counts"]["proposed"], man["proposal_mass"], man.get("diagnostics", {}))
