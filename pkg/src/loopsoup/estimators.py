"""Monte Carlo estimators for loop-measure masses, cluster crossings and related exponents.

Every estimator is a deterministic function of its arguments and ``seed``:
replicate ``k`` of an experiment named ``name`` draws from the stream
``stream_id(name, k)``.  Replicates are independent, and standard errors are
computed across them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial

import numpy as np
from scipy import integrate, stats
from scipy.spatial import cKDTree

from . import harmonic
from .clusters import CrossingQuery, build_index, crossing_event, logpolar
from .harmonic import DomainError
from .paths import (
    Loop,
    any_rule,
    bridge_deviation_tail,
    bridge_vertices,
    sample_band_durations,
    invert_path,
    make_rng,
    near_sphere_rule,
    near_spheres_rule,
    polyline_diameter,
    refine,
    relative_rule,
    segment_crossing_draws,
    sphere_hit_probability,
    stream_id,
)
from .results import Estimate, ExponentFit, fit_power_law, mean_stderr
from .runner import Runner, default_runner
from .soup import (
    AllOf,
    CellPlan,
    Confined,
    MinDiameter,
    Reach,
    RelativeSize,
    SoupConfig,
    ball_hit_bound,
    generate_soup,
    geometric_edges,
    plan_cells,
    range_tail,
    sample_cell,
    small_diameter_prob,
)


class EstimatorError(RuntimeError):
    """An estimator could not produce a trustworthy value."""


def _rng(seed, name, k):
    return make_rng(seed, stream_id(name, k))


def _completed(recs, what="replicates"):
    """Replicates finished before the budget ran out; a standard error needs at least two."""
    if len(recs) < 2:
        raise EstimatorError(f"fewer than two {what} completed within the budget")
    return recs


def _allocate(plan: CellPlan, budget: int, minimum: int = 2) -> np.ndarray:
    score = plan.weight * np.sqrt(plan.bound)
    return np.maximum(minimum, np.round(budget * score / score.sum())).astype(int)


# -- crossing mass ---------------------------------------------------------------------


def _reroot_value(r, scale, rel):
    """``F / Phi`` for a loop rooted at the bump: F is the crossing probability, Phi the bump occupation."""
    rule = any_rule(near_spheres_rule((r, 1.0), rel=rel), relative_rule(1.0 / 16, floor=scale, reach=6 * scale))

    def value(lp, rng):
        lp = refine(lp, rule, rng)
        f = sphere_hit_probability(lp, r) * sphere_hit_probability(lp, 1.0)
        if f == 0.0:
            return 0.0
        phi = np.exp(-np.sum(lp.points**2, axis=1) / (2 * scale * scale))
        occ = float(np.sum(np.diff(lp.times) * 0.5 * (phi[:-1] + phi[1:])))
        return f / occ

    return value


def reroot_bands(r: float, scale: float, ratio: float = 4.0):
    """Duration bands for loops rooted at the bump; the last band is unbounded."""
    t_lo = (1.0 - r) ** 2 / 40.0
    edges = list(geometric_edges(t_lo, 4096.0, ratio)) + [math.inf]
    lo, hi = np.array(edges[:-1]), np.array(edges[1:])
    tail = np.where(np.isinf(hi), 0.0, hi ** -0.5)
    weight = scale**3 * 2.0 * (lo**-0.5 - tail)
    return lo, hi, weight


def _reroot_batch(r, scale, lo, hi, n, rng, value, steps=32):
    roots = rng.standard_normal((n, 3)) * scale
    t = sample_band_durations(lo, hi, n, rng, d=1)
    pts = bridge_vertices(roots, roots, t, steps, rng)
    grid = np.linspace(0.0, 1.0, steps + 1)
    return np.array([value(Loop(grid * t[j], pts[j]), rng) for j in range(n)])


def _crossing_mass_replicate(r, scale, rel, alloc, seed, name, k):
    rng = _rng(seed, name, k)
    lo, hi, w = reroot_bands(r, scale)
    value = _reroot_value(r, scale, rel)
    return math.fsum(w[b] * math.fsum(_reroot_batch(r, scale, lo[b], hi[b], int(alloc[b]), rng, value)) / alloc[b]
                     for b in range(len(w)))


def estimate_crossing_mass(r: float, replicates: int = 32, seed: int = 0, loops_per_replicate: int = 1000,
                           rel: float = 1.0 / 128, scale: float | None = None, pilot: int = 64,
                           runner: Runner | None = None, name: str = "crossing-mass") -> Estimate:
    """Loop-measure mass of loops meeting both the unit sphere and the sphere of radius ``r``.

    Rerooting identity: for a positive bump ``phi``,
    ``mu(F) = int dx phi(x) int dt p_t(x,x) E_bridge[F / int_0^T phi(loop(s)) ds]``.
    Roots are Gaussian around the origin with standard deviation ``scale``
    (default ``r``), durations follow ``t^{-3/2}`` in geometric bands with the
    last band unbounded, and F is the probability, given the refined
    vertices, that the loop meets both spheres.  Band sizes come from a pilot
    run (Neyman allocation).
    """
    if not 0 < r < 1:
        raise DomainError("need 0 < r < 1")
    runner = default_runner(runner)
    scale = r if scale is None else scale
    lo, hi, w = reroot_bands(r, scale)
    prng = _rng(seed, name + "/pilot", 0)
    value = _reroot_value(r, scale, rel)
    sig = np.array([math.sqrt(np.mean(_reroot_batch(r, scale, lo[b], hi[b], pilot, prng, value) ** 2))
                    for b in range(len(w))])
    score = w * np.maximum(sig, 1e-3 * max(sig.max(), 1e-300))
    alloc = np.maximum(4, np.round(loops_per_replicate * score / score.sum())).astype(int)
    # loops shorter than the first band cannot span the shell: bound their mass
    skipped = float(scale**3 * 2 * lo[0] ** -0.5 * range_tail(1.0 - r, lo[0]))
    job = partial(_crossing_mass_replicate, r, scale, rel, alloc, seed, name)
    vals = _completed(runner.map(job, range(replicates)))
    return Estimate.from_replicates(vals, seed, r=r, scale=scale, bands=len(w), allocation=alloc.tolist(),
                                    coverage_defect=skipped / r, partial=runner.exhausted)


# -- one-arm ---------------------------------------------------------------------------


@dataclass
class AnnulusSetup:
    """Log-polar soup around the annulus between ``r_in`` and ``r_out``.

    ``kappa`` is the proximity tolerance in log-polar units, ``delta`` the
    relative-size cutoff (log-polar vertex diameter on the base grid), ``h``
    the relative resolution (``sqrt(dt) <= h |x|``) and ``base_steps`` the
    base grid.
    """

    r_in: float
    r_out: float = 1.0
    kappa: float = 0.2
    delta: float = 0.5
    h: float = 0.05
    base_steps: int = 32
    t_max_factor: float = 4096.0
    tol: float = 1e-6

    @property
    def lo(self):
        return self.r_in * math.exp(-self.kappa)

    @property
    def hi(self):
        return self.r_out * math.exp(self.kappa)

    def plan(self, alpha: float) -> CellPlan:
        s = self.r_out
        radial = np.concatenate([[0.0], geometric_edges(self.lo / 4, 4.0 * math.sqrt(self.t_max_factor) * s + 2 * s)])
        times = geometric_edges((self.lo**2) * 1e-3, self.t_max_factor * s * s)
        bound = AllOf((Reach(self.hi, True), Reach(self.lo, False), RelativeSize(self.delta)))
        return plan_cells(np.zeros(3), radial, times, bound, alpha, self.tol)

    def rule(self):
        return relative_rule(self.h, floor=self.lo / 2, reach=self.hi)


def _logpolar_large(pts, delta):
    """Per loop of a batch: log-polar vertex diameter at least ``delta``.

    The largest bounding-box side is a lower bound and the box diagonal an
    upper bound; only loops between the two get the exact scan.
    """
    emb = logpolar(pts)
    side = emb.max(axis=1) - emb.min(axis=1)
    out = side.max(axis=1) >= delta
    unsure = ~out & (np.sqrt(np.sum(side * side, axis=1)) >= delta)
    for j in np.flatnonzero(unsure):
        out[j] = polyline_diameter(emb[j]) >= delta
    return out


def _annulus_soup(setup: AnnulusSetup, plan: CellPlan, rng) -> list[np.ndarray]:
    """Vertex arrays of the loops that can matter for crossings of the annulus."""
    m = setup.base_steps
    ulo, uhi = math.log(setup.lo), math.log(setup.hi)
    rule = setup.rule()
    out = []
    for i in range(len(plan)):
        n = int(rng.poisson(plan.weight[i]))
        if n == 0:
            continue
        _, t, pts = sample_cell(plan, i, n, rng, m)
        rad = np.linalg.norm(pts, axis=-1)
        outside = np.all(rad > setup.hi, axis=1)
        maybe = ~outside | (ball_hit_bound(pts, t, setup.hi) > 1e-12)
        big = _logpolar_large(pts, setup.delta) & maybe
        for j in np.flatnonzero(big):
            lp = refine(Loop(np.linspace(0.0, t[j], m + 1), pts[j]), rule, rng)
            u = np.log(np.linalg.norm(lp.points, axis=1))
            inside = (u >= ulo) & (u <= uhi)
            jump = np.any(((u[1:] > uhi) & (u[:-1] < ulo)) | ((u[:-1] > uhi) & (u[1:] < ulo)))
            if inside.any() or jump:
                out.append(lp.points)
    return out


def _one_arm_replicate(alpha, setup, plan, pairs, eps_levels, seed, name, k):
    rng = _rng(seed, name, k)
    loops = _annulus_soup(setup, plan, rng)
    idx = build_index(loops, setup.kappa, "logpolar")
    res = np.zeros((len(eps_levels), len(pairs)), dtype=bool)
    for a, eps in enumerate(eps_levels):
        sub = idx if eps == setup.kappa else idx.relabel(eps)
        for b, (ri, ro) in enumerate(pairs):
            res[a, b] = crossing_event(sub, CrossingQuery(ri, ro, tol=eps))
    # a loop that touches both spheres crosses on its own
    single = np.array([bool(np.any(idx.touching(ri) & idx.touching(ro))) for ri, ro in pairs])
    return res, single, len(loops), int(sum(len(p) for p in loops))


@dataclass
class OneArmResult:
    fit: ExponentFit
    events: np.ndarray  # (soups, eps levels, radii)
    single: np.ndarray  # (soups, radii): some single loop crosses
    radii: list
    loops_per_soup: float
    vertices_per_soup: float
    dual: bool = False
    partial: bool = False

    def p_hat(self, level: int = 0) -> list[Estimate]:
        return self.fit.p_hat if level == 0 else [
            Estimate.from_replicates(self.events[:, level, j].astype(float), r=r) for j, r in enumerate(self.radii)
        ]


def estimate_one_arm(alpha: float, radii, soups: int, seed: int = 0, kappa: float = 0.2, delta: float = 0.5,
                     h: float = 0.05, dual: bool = False, runner: Runner | None = None,
                     name: str = "one-arm") -> OneArmResult:
    """Probability that a cluster connects the unit sphere to the sphere of radius r, for each r.

    All radii are evaluated on the same soups (which makes the estimates
    exactly monotone in r).  With ``dual`` the annulus is ``[1, 1/r]``
    instead of ``[r, 1]``.  The exponent is the slope of the weighted log-log
    fit; tolerances kappa/2 and kappa/4 are reported as the epsilon trend.
    """
    radii = sorted((float(r) for r in radii), reverse=True)
    if not radii or radii[0] >= 1 or radii[-1] <= 0:
        raise DomainError("radii must lie in (0, 1)")
    if alpha <= 0:
        raise DomainError("alpha must be positive")
    runner = default_runner(runner)
    if dual:
        setup = AnnulusSetup(1.0, 1.0 / radii[-1], kappa, delta, h)
        pairs = [(1.0, 1.0 / r) for r in radii]
    else:
        setup = AnnulusSetup(radii[-1], 1.0, kappa, delta, h)
        pairs = [(r, 1.0) for r in radii]
    plan = setup.plan(alpha)
    levels = [kappa, kappa / 2, kappa / 4]
    recs = _completed(runner.map(partial(_one_arm_replicate, alpha, setup, plan, pairs, levels, seed, name),
                                 range(soups)), "soups")
    ev = np.stack([r[0] for r in recs])
    ests = [Estimate.from_replicates(ev[:, 0, j].astype(float), seed, r=r, alpha=alpha) for j, r in enumerate(radii)]
    fit = _fit_exponent(radii, ests, len(recs))
    fit.epsilon_trend = {
        f"{eps:g}": [mean_stderr(ev[:, a, j].astype(float)) for j in range(len(radii))] for a, eps in enumerate(levels)
    }
    single = np.stack([r[1] for r in recs])
    return OneArmResult(fit, ev, single, radii, float(np.mean([r[2] for r in recs])),
                        float(np.mean([r[3] for r in recs])), dual, runner.exhausted)


def _fit_exponent(radii, ests, n) -> ExponentFit:
    use, excluded = [], []
    for r, e in zip(radii, ests):
        # a radius with no hits, or fewer than ten, cannot support a log-scale fit
        if e.value * n < 10:
            excluded.append(r)
        else:
            use.append((r, e))
    slope, se, icpt = fit_power_law([r for r, _ in use], [e for _, e in use]) if len(use) >= 2 else (float("nan"),) * 3
    return ExponentFit(slope, (slope - 1.96 * se, slope + 1.96 * se), list(radii), list(ests), {}, excluded, icpt)


def single_loop_bound(alpha: float, mass: float) -> float:
    """Chance that at least one soup loop crosses on its own."""
    return -math.expm1(-alpha * mass)


# -- submultiplicativity ------------------------------------------------------------------


def _interp_p(radii, p):
    lr = np.log(np.concatenate([[1.0], radii]))
    lp = np.log(np.maximum(np.concatenate([[1.0], p]), 1e-300))
    order = np.argsort(lr)
    lr, lp = lr[order], lp[order]
    return lambda r: np.exp(np.interp(np.log(r), lr, lp))


def f_hat(s: float, radii, p) -> float:
    """Integral of p_r / r^2 over [s, 1] with p interpolated log-linearly (anchored at p_1 = 1)."""
    if s >= 1:
        return 0.0
    pf = _interp_p(np.asarray(radii), np.asarray(p))
    grid = np.exp(np.linspace(math.log(s), 0.0, 2001))
    vals = pf(grid) / grid  # integrand in log r
    return float(integrate.trapezoid(vals, np.log(grid)))


def check_submultiplicativity(radii, p, s_grid) -> dict:
    """Empirical constants (F(ss')+1)/((F(s)+1)(F(s')+1)) over the grid."""
    radii = np.asarray(radii, dtype=float)
    rmin = radii.min()
    table, skipped = [], []
    for s in s_grid:
        for s2 in s_grid:
            if s * s2 < rmin * (1 - 1e-12):
                skipped.append((s, s2))
                continue
            c = (f_hat(s * s2, radii, p) + 1) / ((f_hat(s, radii, p) + 1) * (f_hat(s2, radii, p) + 1))
            table.append({"s": s, "s2": s2, "C": c})
    return {"table": table, "max_C": max((row["C"] for row in table), default=float("nan")), "skipped": skipped,
            "F": {f"{s:g}": f_hat(s, radii, p) for s in s_grid}}


# -- inversion ---------------------------------------------------------------------------


def _hits(lp, radius, rng):
    rad = np.linalg.norm(lp.points, axis=1)
    inside = rad <= radius
    if inside.any() and (~inside).any():
        return True
    return bool(segment_crossing_draws(lp, radius, rng).any())


def inversion_plan(rho: float, confine: float, alpha: float = 1.0) -> CellPlan:
    t_max = 64.0 * confine**2
    radial = np.concatenate([[0.0], geometric_edges(1.0 / confine, confine)])
    times = geometric_edges(1e-3 * rho**2, t_max)
    bound = AllOf((Reach(rho, True), Reach(1.0 / rho, False), Confined(confine), MinDiameter(1.0 / rho - rho)))
    return plan_cells(np.zeros(3), radial, times, bound, alpha, 1e-7)


def _exit_bound(pts, t, radius):
    """Upper bound, per loop, on the chance that the path between vertices leaves the ball."""
    rad = np.linalg.norm(pts, axis=-1)
    dt = np.asarray(t, dtype=float)[:, None] / (pts.shape[1] - 1)
    gap = radius - np.maximum(rad[:, :-1], rad[:, 1:])
    seg = np.where(gap > 0, bridge_deviation_tail(np.maximum(gap, 0.0), dt), 1.0)
    return np.minimum(1.0, seg.sum(axis=1))


def _halve_steps(pts, t, rng):
    """Insert a bridge midpoint into every step of loops on uniform grids."""
    dt = np.asarray(t, dtype=float) / (pts.shape[1] - 1)
    mid = 0.5 * (pts[:, :-1] + pts[:, 1:])
    mid += rng.standard_normal(mid.shape) * np.sqrt(dt / 4.0)[:, None, None]
    out = np.empty((len(pts), 2 * pts.shape[1] - 1, pts.shape[2]))
    out[:, ::2], out[:, 1::2] = pts, mid
    return out


def _may_reach(lp, inner, outer, tol=1e-12):
    """False when the loop enters the inner ball or leaves the outer one with chance below ``tol``."""
    p, dt = lp.points, np.diff(lp.times)
    rad = np.linalg.norm(p, axis=1)
    far = np.maximum(rad[:-1], rad[1:])
    gap = outer - far
    leave = np.where(gap > 0, bridge_deviation_tail(np.maximum(gap, 0.0), dt), 1.0).sum()
    mid = 0.5 * (p[:-1] + p[1:])
    u = mid / np.maximum(np.linalg.norm(mid, axis=1, keepdims=True), 1e-300)
    g0 = np.sum(p[:-1] * u, axis=1) - inner
    g1 = np.sum(p[1:] * u, axis=1) - inner
    enter = np.where((g0 > 0) & (g1 > 0), np.exp(-2.0 * np.maximum(g0, 0) * np.maximum(g1, 0) / dt), 1.0).sum()
    return bool(enter > tol and leave > tol)


INVERSION_BATCH = 64.0  # soup intensity (in units of the loop measure) per batch
_CHUNK = 20000


def _inversion_batch(plan, rho, confine, h, seed, name, k, intensity=INVERSION_BATCH):
    """Loops of one Poisson soup of the given intensity that realize the conditioning event."""
    rng = _rng(seed, name, k)
    m = 16
    near = near_spheres_rule((rho, 1 / rho, confine, 1 / confine), rel=1 / 64)
    coarse = near_spheres_rule((rho, 1 / rho), rel=1 / 8)
    rule = relative_rule(h, floor=0.5 / confine)
    kept, proposed = [], 0
    for i in range(len(plan)):
        n = int(rng.poisson(plan.weight[i] * intensity))
        proposed += n
        for start in range(0, n, _CHUNK):
            _, t, pts = sample_cell(plan, i, min(_CHUNK, n - start), rng, m)
            for stage in range(3):
                if stage:
                    pts = _halve_steps(pts, t, rng)
                rad = np.linalg.norm(pts, axis=-1)
                cand = np.all((rad < confine) & (rad > 1.0 / confine), axis=1)
                cand &= ball_hit_bound(pts, t, rho) > 1e-12
                cand &= _exit_bound(pts, t, 1.0 / rho) > 1e-12
                t, pts = t[cand], pts[cand]
            steps = pts.shape[1] - 1
            for j in range(len(t)):
                # a coarse pass first discards most candidates cheaply; refining further keeps the law
                lp = refine(Loop(np.linspace(0.0, t[j], steps + 1), pts[j]), coarse, rng)
                if not _may_reach(lp, rho, 1 / rho):
                    continue
                lp = refine(lp, near, rng)
                if not (_hits(lp, rho, rng) and _hits(lp, 1 / rho, rng)):
                    continue
                if _hits(lp, confine, rng) or _hits(lp, 1 / confine, rng):
                    continue
                kept.append(refine(lp, rule, rng))
    return kept, proposed


def _observables(lp, rng):
    rad = np.linalg.norm(lp.points, axis=1)
    # the root of a rooted loop sits at a uniform time along the loop
    s = rng.random() * lp.duration
    root = min(int(np.searchsorted(lp.times, s)), lp.steps)
    return lp.duration, lp.diameter, math.log(rad[root]), math.log(rad.min() * rad.max())


INVERSION_OBSERVABLES = ("duration", "diameter", "log_root_radius", "log_radius_product")


def check_inversion_invariance(rho: float, replicates: int, seed: int = 0, confine: float = 8.0, h: float = 0.05,
                               runner: Runner | None = None, name: str = "inversion") -> dict:
    """Compare loops conditioned on meeting both rho S^2 and S^2/rho with their inversions.

    The conditioning event (additionally confined to the inversion-symmetric
    shell between 1/confine and confine) is mapped to itself by the
    inversion, so both samples should share one law.  Two-sample KS p-values
    are reported per observable.
    """
    if not 0 < rho < 1:
        raise DomainError("need 0 < rho < 1")
    runner = default_runner(runner)
    plan = inversion_plan(rho, confine)
    loops, proposed, batches = [], 0, 0
    while len(loops) < replicates:
        # accepted loops of a Poisson soup are i.i.d. given their number, so batches can be pooled
        rate = len(loops) / batches if batches else 0.0
        more = 1 if not batches else max(1, min(256, math.ceil(1.1 * (replicates - len(loops)) / max(rate, 0.5))))
        recs = runner.map(partial(_inversion_batch, plan, rho, confine, h, seed, name), range(batches, batches + more))
        batches += len(recs)
        for kept, prop in recs:
            loops.extend(kept)
            proposed += prop
        if proposed and len(loops) / proposed < 1e-5:
            raise EstimatorError(f"conditioning acceptance {len(loops) / proposed:.2e} below 1e-5")
        if runner.exhausted:
            break
    if len(loops) > replicates:
        # a uniform subset of exchangeable loops is again i.i.d.
        pick = np.sort(_rng(seed, name + "/subset", 0).choice(len(loops), replicates, replace=False))
        loops = [loops[i] for i in pick]
    rng = _rng(seed, name + "/roots", 0)
    before, after, rejected = [], [], 0
    for lp in loops:
        try:
            img = invert_path(lp)
        except Exception:
            rejected += 1
            continue
        before.append(_observables(lp, rng))
        after.append(_observables(img, rng))
    before, after = np.array(before), np.array(after)
    report = {"n": len(before), "proposed": proposed, "acceptance": len(loops) / max(proposed, 1),
              "rejected_near_origin": rejected, "rho": rho, "confine": confine, "ks": {}, "means": {}}
    for c, key in enumerate(INVERSION_OBSERVABLES):
        ks = stats.ks_2samp(before[:, c], after[:, c])
        diff = after[:, c] - before[:, c]
        m, se = mean_stderr(diff)
        report["ks"][key] = {"statistic": float(ks.statistic), "pvalue": float(ks.pvalue)}
        report["means"][key] = {"before": float(before[:, c].mean()), "after": float(after[:, c].mean()),
                                "diff": m, "diff_stderr": se}
    report["samples"] = {"before": before, "after": after}
    report["partial"] = runner.exhausted
    return report


# -- welding size g ----------------------------------------------------------------


def _walk_until(pos, target_tree, eps, kill_radius, rng, max_steps=200000):
    """Brownian motions with distance-adapted steps; True where the target is reached first."""
    n = len(pos)
    hit = np.zeros(n, dtype=bool)
    alive = np.ones(n, dtype=bool)
    floor = eps / 4
    for _ in range(max_steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        p = pos[idx]
        d = target_tree.query(p)[0] if target_tree is not None else np.full(len(idx), np.inf)
        got = d <= eps
        hit[idx[got]] = True
        rad = np.linalg.norm(p, axis=1)
        gone = rad >= kill_radius
        alive[idx[got | gone]] = False
        move = ~(got | gone)
        idx, p, d, rad = idx[move], p[move], d[move], rad[move]
        s = np.maximum(floor, np.minimum((d - eps) / 6, (kill_radius - rad) / 3))
        pos[idx] = p + rng.standard_normal(p.shape) * s[:, None]
    return hit


def _uniform_sphere(n, radius, rng):
    v = rng.standard_normal((n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def estimate_g(p, r: float, a: float, replicates: int, seed: int = 0, epsilon: float | None = None,
               batches: int = 32, name: str = "g") -> Estimate:
    """Fraction of Brownian motions from uniform points of r S^2, killed on ar S^2, coming within epsilon of ``p``."""
    if not a > 1 or not r > 0:
        raise DomainError("need a > 1 and r > 0")
    pts = np.asarray(getattr(p, "points", p), dtype=float)
    eps = epsilon if epsilon is not None else 0.02 * r
    tree = cKDTree(pts)
    per = max(1, replicates // batches)
    vals = []
    for k in range(batches):
        rng = _rng(seed, name, k)
        start = _uniform_sphere(per, r, rng)
        vals.append(float(_walk_until(start, tree, eps, a * r, rng).mean()))
    return Estimate.from_replicates(vals, seed, r=r, a=a, epsilon=eps, paths=per * batches)


def g_small_ball_oracle(center, b: float, r: float, a: float) -> float:
    """Chance that BM from uniform on r S^2 hits B(center, b) before a r S^2, to second order in b.

    A uniform charge on the small sphere is solved against the regular part of
    the Green's function of the big ball; the hitting probability is the
    potential averaged by sphere quadrature over the starting sphere.
    """
    c = np.asarray(center, dtype=float)
    big = a * r
    const = harmonic.green_constant(3)
    regular = const * big / (big * big - c @ c)
    q = 1.0 / (const / b - regular)

    def gd(x):
        x = np.atleast_2d(x)
        y = (c / big)
        return harmonic.green_ball(x / big, np.broadcast_to(y, x.shape)) / big

    return float(harmonic.sphere_quadrature(lambda x: q * gd(x), r) / (4 * math.pi * r * r))


# -- nonintersection -----------------------------------------------------------------


def _radial_walks(n, r_max, h, rng, max_steps=10**6):
    """Brownian paths from uniform points on the unit sphere with steps sqrt(dt) = h|x|, stopped past r_max."""
    pos = _uniform_sphere(n, 1.0, rng)
    paths = [[p.copy()] for p in pos]
    alive = np.ones(n, dtype=bool)
    for _ in range(max_steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        p = pos[idx]
        s = h * np.linalg.norm(p, axis=1)
        p = p + rng.standard_normal(p.shape) * s[:, None]
        pos[idx] = p
        for i, q in zip(idx.tolist(), p):
            paths[i].append(q.copy())
        alive[idx[np.linalg.norm(p, axis=1) >= r_max]] = False
    return [np.array(x) for x in paths]


def _first_meeting_radius(a, b, kappa):
    """Smallest R such that the parts of the paths before radius R come within kappa (log-polar)."""
    ma = np.maximum.accumulate(np.linalg.norm(a, axis=1))
    mb = np.maximum.accumulate(np.linalg.norm(b, axis=1))
    ta, tb = cKDTree(logpolar(a)), cKDTree(logpolar(b))
    sp = ta.sparse_distance_matrix(tb, kappa, output_type="ndarray")
    if len(sp) == 0:
        return math.inf
    return float(np.min(np.maximum(ma[sp["i"]], mb[sp["j"]])))


def _nonintersection_replicate(r_max, kappa, h, pairs, seed, name, k):
    rng = _rng(seed, name, k)
    walks = _radial_walks(2 * pairs, r_max, h, rng)
    return [_first_meeting_radius(walks[2 * i], walks[2 * i + 1], kappa) for i in range(pairs)]


def estimate_nonintersection(R_grid=(2, 4, 8, 16), replicates: int = 40, pairs_per_replicate: int = 50,
                             seed: int = 0, kappa: float = 0.2, h: float = 0.05,
                             runner: Runner | None = None, name: str = "nonintersection") -> dict:
    """Probability that two Brownian paths from the unit sphere stay kappa-apart until radius R.

    Paths are compared in the log-polar metric and simulated with relative
    steps, so the problem looks the same at every scale.  The log-log slope
    over ``R_grid`` is the exponent proxy.
    """
    R_grid = sorted(float(R) for R in R_grid)
    if R_grid[0] < 1:
        raise DomainError("need R >= 1")
    runner = default_runner(runner)
    recs = _completed(runner.map(partial(_nonintersection_replicate, R_grid[-1], kappa, h, pairs_per_replicate, seed,
                                         name), range(replicates)))
    meet = np.array(recs)  # (replicates, pairs)
    ests = [Estimate.from_replicates((meet > R).mean(axis=1), seed, R=R) for R in R_grid]
    slope, se, icpt = fit_power_law(R_grid, ests)
    return {"R": R_grid, "p_hat": ests, "slope": -slope, "slope_stderr": se, "intercept": icpt,
            "meeting_radii": meet, "partial": runner.exhausted}


# -- key lemma -------------------------------------------------------------------------


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def contains(self, pts) -> np.ndarray:
        return np.linalg.norm(np.asarray(pts) - np.asarray(self.center), axis=-1) <= self.radius


@dataclass(frozen=True)
class MaxDiameter:
    diameter: float

    def __call__(self, ra, rb, ta, tb):
        return np.minimum(1.0, small_diameter_prob(self.diameter, ta))


def _ball_hit_prob(lp, ball: Ball):
    return sphere_hit_probability(lp, ball.radius, ball.center) if not ball.contains(lp.points).any() else 1.0


def _key_lemma_replicate(plans, alloc, k1, k2, bands, seed, name, k):
    rng = _rng(seed, name, k)
    rule = any_rule(near_sphere_rule(k1.radius, k1.center, rel=1 / 32),
                    near_sphere_rule(k2.radius, k2.center, rel=1 / 32))
    out = []
    for plan, al, (lo, hi) in zip(plans, alloc, bands):
        parts = []
        for i in range(len(plan)):
            n = int(al[i])
            _, t, pts = sample_cell(plan, i, n, rng, 64)
            cand = np.flatnonzero(ball_hit_bound(pts, t, k2.radius, k2.center) > 1e-12)
            vals = []
            for j in cand:
                lp = refine(Loop(np.linspace(0, t[j], 65), pts[j]), rule, rng)
                if lo <= lp.diameter <= hi:
                    vals.append(_ball_hit_prob(lp, k1) * _ball_hit_prob(lp, k2))
            parts.append(plan.weight[i] * math.fsum(vals) / n)
        out.append(math.fsum(parts))
    return out


def spot_check_key_lemma(K1: Ball, K2: Ball, R: float, R2: float, replicates: int = 32, seed: int = 0,
                         loops_per_replicate: int = 2000, runner: Runner | None = None,
                         name: str = "key-lemma") -> dict:
    """Masses of loops meeting both balls with diameter in [1, R] and in [R, R2], and their ratio."""
    if not R2 > R > 1:
        raise DomainError("need R2 > R > 1")
    runner = default_runner(runner)
    c1 = np.asarray(K1.center, dtype=float)
    gap = max(0.0, float(np.linalg.norm(c1 - np.asarray(K2.center))) - K1.radius - K2.radius)
    bands = [(1.0, R), (R, R2)]
    plans, allocs = [], []
    for lo, hi in bands:
        radial = np.concatenate([[0.0], geometric_edges(K1.radius, 4 * hi + K1.radius)])
        times = geometric_edges(1e-3, 16 * hi * hi)
        bound = AllOf((Reach(K1.radius, True), MinDiameter(max(lo, gap)), MaxDiameter(hi)))
        plans.append(plan_cells(c1, radial, times, bound, 1.0, 1e-9))
        allocs.append(_allocate(plans[-1], loops_per_replicate))
    recs = np.array(_completed(runner.map(partial(_key_lemma_replicate, plans, allocs, K1, K2, bands, seed, name),
                                          range(replicates))))
    small = Estimate.from_replicates(recs[:, 0], seed, band=bands[0])
    large = Estimate.from_replicates(recs[:, 1], seed, band=bands[1])
    consistent_zero = lambda e: e.value - 2 * e.stderr <= 0
    ratio = large.value / small.value if small.value > 0 else math.inf
    # delta method for the ratio of two independent means
    both = small.value > 0 and large.value > 0
    ratio_se = abs(ratio) * math.hypot(small.stderr / small.value, large.stderr / large.value) if both else math.inf
    return {
        "mass_small": small, "mass_large": large, "ratio": ratio, "ratio_stderr": ratio_se,
        "inconclusive": consistent_zero(small) or consistent_zero(large),
        "vacuous": gap > R,
        "ratio_lower95": ratio - 1.645 * ratio_se if math.isfinite(ratio_se) else float("nan"),
    }


# -- threshold scan -------------------------------------------------------------------


def _threshold_replicate(alphas, caps, inner, outer, eps, steps_per_unit, seed, name, k):
    rng = _rng(seed, name, k)
    half = outer + eps
    window = ((-half,) * 3, (half,) * 3)
    loops, layer = [], []
    prev = 0.0
    for li, a in enumerate(alphas):
        cfg = SoupConfig(a - prev, window, (1.0, max(caps)), steps_per_unit=steps_per_unit, seed=seed)
        s = generate_soup(cfg, rng)
        loops.extend(s.loops)
        layer.extend([li] * len(s.loops))
        prev = a
    layer = np.array(layer, dtype=int)
    diam = np.array([lp.diameter for lp in loops])
    idx = build_index(loops, eps, "euclidean")
    q = CrossingQuery(inner, outer, tol=eps)
    out = np.zeros((len(alphas), len(caps)), dtype=bool)
    for i in range(len(alphas)):
        for j, cap in enumerate(caps):
            keep = (layer <= i) & (diam <= cap)
            out[i, j] = crossing_event(idx.relabel(keep=keep), q)
    return out


def threshold_scan(alpha_grid, caps, soups: int, seed: int = 0, inner: float = 1.0, outer: float = 2.0,
                   epsilon: float = 0.25, steps_per_unit: float | None = None, runner: Runner | None = None,
                   name: str = "threshold-scan") -> dict:
    """Crossing probabilities of a fixed annulus for soups with diameters in [1, R].

    Soups for increasing alpha are built as superpositions of independent
    layers, and smaller caps are subsets of larger ones, so every replicate is
    monotone in both parameters.
    """
    alphas = sorted(float(a) for a in alpha_grid)
    caps = sorted(float(c) for c in caps)
    if not alphas or not caps or alphas[0] <= 0 or caps[0] <= 1:
        raise DomainError("need positive alphas and caps above 1")
    runner = default_runner(runner)
    spu = steps_per_unit or (4.0 / epsilon) ** 2
    recs = _completed(runner.map(partial(_threshold_replicate, alphas, caps, inner, outer, epsilon, spu, seed, name),
                                 range(soups)), "soups")
    ev = np.stack(recs)
    table = [[Estimate.from_replicates(ev[:, i, j].astype(float), seed, alpha=a, cap=c)
              for j, c in enumerate(caps)] for i, a in enumerate(alphas)]
    return {"alphas": alphas, "caps": caps, "table": table, "events": ev, "partial": runner.exhausted}
