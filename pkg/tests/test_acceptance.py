"""Acceptance suite: one PASS/FAIL line per criterion, each at its stated tolerance and runtime.

Run with ``pytest tests/test_acceptance.py -v``; the lines are printed even
when pytest captures output.  The full suite takes about an hour on one core.
"""

import json
import math
import time

import numpy as np
import pytest
from scipy import stats

from loopsoup import cli
from loopsoup import clusters as C
from loopsoup import estimators as E
from loopsoup import harmonic as H
from loopsoup import paths as P
from loopsoup import soup as S


@pytest.fixture
def report(capsys):
    def emit(number, ok, title, detail, seconds, limit):
        within = seconds < limit
        line = (f"{'PASS' if ok and within else 'FAIL'}  criterion {number:>2}  {title}: {detail}  "
                f"[{seconds:.1f} s, limit {limit:g} s]")
        with capsys.disabled():
            print("\n" + line, flush=True)
        assert ok, line
        assert within, line

    return emit


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


# -- 1. kernel identities ------------------------------------------------------------


def test_criterion_01_kernel_identities(report):
    def run():
        return [H.lemma_integrals(r, R) for r, R in ((0.5, 1.0), (1.0, 2.0))]

    res, sec = _timed(run)
    err = max(abs(g - w) for got, want in res for g, w in zip(got, want))
    # closed forms of the three identities, written out independently
    want = [(1.0, r / R, r**-2 / (1 / r - 1 / R)) for r, R in ((0.5, 1.0), (1.0, 2.0))]
    err_closed = max(abs(g - w) for (got, _), wc in zip(res, want) for g, w in zip(got, wc))
    report(1, err <= 1e-6 and err_closed <= 1e-6, "sphere-quadrature identities",
           f"max error {max(err, err_closed):.2e} (tol 1e-6)", sec, 1.0)


# -- 2. Green's function vs killed Brownian motion -------------------------------------


def killed_occupation(x, y, n, rng, delta=0.05, dt=1e-5, eps=1e-3, block=64):
    """Per-path time spent in B(y, delta) by Brownian motion from x killed on the unit sphere, over the ball volume.

    Walk on spheres moves the path while it is far from the target ball (no
    occupation can accrue inside a sphere that avoids it); Gaussian steps of
    size dt take over within 2 delta of y until the path leaves B(y, 3 delta).
    Paths within eps of the unit sphere are killed.  Because the Green's
    function is harmonic away from x, its average over B(y, delta) is its
    value at y, so no smoothing bias arises.
    """
    x, y = np.asarray(x, float), np.asarray(y, float)
    z = np.tile(x, (n, 1))
    occ = np.zeros(n)
    alive = np.ones(n, bool)
    sd = math.sqrt(dt)
    while alive.any():
        idx = np.flatnonzero(alive)
        p = z[idx]
        dy = np.linalg.norm(p - y, axis=1)
        db = 1.0 - np.linalg.norm(p, axis=1)
        dead = db < eps
        alive[idx[dead]] = False
        far = ~dead & (dy > 2 * delta)
        near = ~dead & ~far
        f = idx[far]
        if len(f):
            rho = np.minimum(db[far], dy[far] - delta)
            u = rng.standard_normal((len(f), 3))
            z[f] += rho[:, None] * u / np.linalg.norm(u, axis=1, keepdims=True)
        g = idx[near]
        if len(g):
            steps = z[g][:, None, :] + np.cumsum(rng.standard_normal((len(g), block, 3)) * sd, axis=1)
            r = np.linalg.norm(steps - y, axis=2)
            out = r > 3 * delta
            first = np.where(out.any(axis=1), out.argmax(axis=1), block - 1)
            upto = np.arange(block)[None, :] <= first[:, None]
            occ[g] += dt * np.sum((r < delta) & upto, axis=1)
            z[g] = steps[np.arange(len(g)), first]
    return occ / (4.0 / 3.0 * math.pi * delta**3)


def _interior_pairs(k, rng, rmax=0.7, min_gap=0.3):
    out = []
    while len(out) < k:
        x, y = rng.uniform(-rmax, rmax, (2, 3))
        if np.linalg.norm(x) <= rmax and np.linalg.norm(y) <= rmax and np.linalg.norm(x - y) >= min_gap:
            out.append((x, y))
    return out


def test_criterion_02_green_ball_vs_killed_brownian_motion(report):
    rng = np.random.default_rng(20240602)
    pairs = _interior_pairs(20, rng)
    per_pair = 200_000  # 4 x 10^6 paths in all

    def run():
        rows = []
        for x, y in pairs:
            v = killed_occupation(x, y, per_pair, rng)
            rows.append((v.mean(), v.std(ddof=1) / math.sqrt(per_pair), float(H.green_ball(x, y))))
        return rows

    rows, sec = _timed(run)
    ok = [abs(m - g) <= 0.05 * g + 3 * se for m, se, g in rows]
    worst = max(abs(m - g) / (0.05 * g + 3 * se) for m, se, g in rows)
    report(2, all(ok), "green_ball vs killed-BM occupation density",
           f"{sum(ok)}/20 pairs within 5% + 3 se (worst at {worst:.2f} of tolerance), {20 * per_pair} paths", sec, 120)


# -- 3. bridge law ---------------------------------------------------------------------


def test_criterion_03_bridge_law(report):
    n, t = 100_000, 0.7
    x, y = np.array([0.3, -1.0, 2.0]), np.array([1.1, 0.4, 1.5])

    def run():
        rng = P.make_rng(3, P.stream_id("accept-bridge", 0))
        return P.bridge_vertices(np.tile(x, (n, 1)), np.tile(y, (n, 1)), np.full(n, t), 2, rng)

    pts, sec = _timed(run)
    exact = np.array_equal(pts[:, 0], np.tile(x, (n, 1))) and np.array_equal(pts[:, -1], np.tile(y, (n, 1)))
    mid = pts[:, 1] - 0.5 * (x + y)
    sq = mid**2
    var, var_se = sq.mean(axis=0), sq.std(axis=0, ddof=1) / math.sqrt(n)
    mean_se = mid.std(axis=0, ddof=1) / math.sqrt(n)
    ok_var = np.all(np.abs(var - t / 4) <= 3 * var_se)
    ok_mean = np.all(np.abs(mid.mean(axis=0)) <= 3 * mean_se)
    report(3, bool(exact and ok_var and ok_mean), "bridge midpoint and endpoints",
           f"variance {np.round(var, 5).tolist()} vs t/4={t / 4:.5f} (3 se {3 * var_se.max():.1e}), "
           f"endpoints exact={exact}, {n} bridges", sec, 30)


# -- 4. excursion duration law ----------------------------------------------------------


def test_criterion_04_excursion_duration_law(report):
    def run():
        rng = P.make_rng(4, P.stream_id("accept-excursion", 0))
        return P.sample_excursion_duration(np.zeros(3), np.array([0.6, 0.0, 0.8]), rng, size=100_000)

    draws, sec = _timed(run)
    # at unit distance the hitting duration is Levy with scale 1
    ks = stats.kstest(draws, stats.levy(scale=1.0).cdf)
    report(4, ks.pvalue > 0.01, "excursion duration vs Levy CDF",
           f"KS statistic {ks.statistic:.4f}, p = {ks.pvalue:.3f} (need > 0.01), 1e5 draws", sec, 30)


# -- 5. crossing mass ---------------------------------------------------------------------


def test_criterion_05_crossing_mass(report):
    def run():
        small = E.estimate_crossing_mass(0.05, replicates=32, loops_per_replicate=500, name="accept-mass-small")
        large = E.estimate_crossing_mass(0.5, replicates=32, loops_per_replicate=200, name="accept-mass-large")
        return small, large

    (small, large), sec = _timed(run)
    lo, hi = (small.value - 3 * small.stderr) / 0.05, (small.value + 3 * small.stderr) / 0.05
    ok = 0.8 <= lo and hi <= 1.2 and large.value <= 2.25
    report(5, ok, "crossing mass",
           f"r=0.05: mass/r = {small.value / 0.05:.4f}, 3-se interval [{lo:.3f}, {hi:.3f}] in [0.8, 1.2] "
           f"(series {H.crossing_mass(0.05) / 0.05:.4f}); r=0.5: {large.value:.4f} +- {large.stderr:.4f} <= 2.25 "
           f"(series {H.crossing_mass(0.5):.4f})", sec, 300)


# -- 6. shell-crossing counts ----------------------------------------------------------------


def test_criterion_06_shell_crossing_counts(report):
    soups = 4000

    def run():
        return S.shell_crossing_count(1.0, 0.1, (1, 2), soups, seed=6, name="accept-shell", return_counts=True)

    ((one, two), per), sec = _timed(run)
    c1 = per[:, 0]
    # index of dispersion: (n-1) s^2 / mean is chi-square with n-1 degrees of freedom for Poisson counts
    disp = (len(c1) - 1) * c1.var(ddof=1) / c1.mean()
    p_disp = 2 * min(stats.chi2.cdf(disp, len(c1) - 1), stats.chi2.sf(disp, len(c1) - 1))
    ok1 = abs(one.value - 0.1) <= 0.15 * 0.1 + 3 * one.stderr
    ok2 = abs(two.value - 0.005) <= 0.25 * 0.005 + 3 * two.stderr
    report(6, bool(ok1 and ok2 and p_disp > 0.01), "shell-crossing Poisson counts",
           f"1-crossing mean {one.value:.4f} +- {one.stderr:.4f} (target 0.1, exact {H.crossing_mass(0.1, 1):.4f}), "
           f"dispersion {c1.var(ddof=1) / c1.mean():.3f} (p = {p_disp:.3f}); 2-crossing mean {two.value:.5f} "
           f"+- {two.stderr:.5f} (target 0.005); {soups} soups", sec, 600)


# -- 7. inversion invariance ----------------------------------------------------------------


def test_criterion_07_inversion_invariance(report):
    rep, sec = _timed(lambda: E.check_inversion_invariance(0.5, 10_000, seed=7, name="accept-inversion"))
    p_dur, p_diam = rep["ks"]["duration"]["pvalue"], rep["ks"]["diameter"]["pvalue"]
    others = ", ".join(f"{k} p = {v['pvalue']:.3f}" for k, v in rep["ks"].items() if k not in ("duration", "diameter"))
    report(7, p_dur > 0.01 and p_diam > 0.01 and rep["n"] + rep["rejected_near_origin"] == 10_000,
           "inversion invariance", f"KS duration p = {p_dur:.3f}, diameter p = {p_diam:.3f} (need > 0.01); "
           f"{others}; {rep['n']} loops", sec, 600)


# -- 8. one-arm ------------------------------------------------------------------------------------

ONE_ARM_RADII = [2.0**-k for k in range(2, 6)]
ONE_ARM_SOUPS = {0.1: 7000, 0.5: 2200}  # per side (primary and dual), sized to the 30 minute limit


@pytest.mark.parametrize("alpha", [0.1, 0.5])
def test_criterion_08_one_arm(report, alpha):
    n = ONE_ARM_SOUPS[alpha]

    def run():
        primary = E.estimate_one_arm(alpha, ONE_ARM_RADII, n, seed=8, name=f"accept-arm-{alpha}")
        dual = E.estimate_one_arm(alpha, ONE_ARM_RADII, n, seed=8, dual=True, name=f"accept-arm-dual-{alpha}")
        return primary, dual

    (res, dual), sec = _timed(run)
    xi = res.fit.xi
    ok_xi = 0.0 <= xi < 1.0
    p = res.fit.p_hat
    bounds = [E.single_loop_bound(alpha, H.crossing_mass(r)) for r in res.radii]
    # exact per soup: a loop crossing on its own is a crossing cluster; statistical: p_hat + 3 se >= bound
    ok_single_exact = bool(np.all(res.single <= res.events[:, 0, :]))
    ok_bound = all(e.value + 3 * e.stderr >= b for e, b in zip(p, bounds))
    ev = res.events[:, 0, :]
    ok_mono = bool(np.all(ev[:, 1:] <= ev[:, :-1])) and bool(np.all(dual.events[:, 0, 1:] <= dual.events[:, 0, :-1]))
    pd = dual.fit.p_hat
    z = [abs(a.value - b.value) / math.hypot(a.stderr, b.stderr) if a.stderr or b.stderr else 0.0
         for a, b in zip(p, pd)]
    ok_dual = all(v <= 3 for v in z)
    detail = (f"alpha={alpha}: xi = {xi:.3f} CI [{res.fit.ci[0]:.3f}, {res.fit.ci[1]:.3f}] in [0,1): {ok_xi}; "
              f"p_hat {[round(e.value, 4) for e in p]} vs single-loop bound {[round(b, 4) for b in bounds]}: "
              f"{ok_bound} (per-soup exact: {ok_single_exact}); coupled monotone: {ok_mono}; "
              f"dual p_hat {[round(e.value, 4) for e in pd]}, max |z| = {max(z):.2f}: {ok_dual}; {n}+{n} soups")
    report(8, ok_xi and ok_bound and ok_single_exact and ok_mono and ok_dual, "one-arm properties", detail, sec, 1800)


# -- 9. non-intersection exponent ---------------------------------------------------------------


def test_criterion_09_nonintersection_slope(report):
    rep, sec = _timed(lambda: E.estimate_nonintersection((2, 4, 8, 16), seed=9, name="accept-nonintersection"))
    slope = rep["slope"]
    report(9, 0.4 < slope < 1.1, "non-intersection exponent",
           f"log-log slope {slope:.3f} +- {rep['slope_stderr']:.3f} over R = 2..16 (need in (0.4, 1.1)); "
           f"p_hat {[round(e.value, 4) for e in rep['p_hat']]}", sec, 600)


# -- 10. cluster engine -----------------------------------------------------------------------------


def _refines(fine, coarse):
    return all(len(set(coarse[fine == f].tolist())) == 1 for f in set(fine.tolist()))


def test_criterion_10_cluster_oracle(report):
    def run():
        cfg = S.SoupConfig(3.0, ((-0.5,) * 3, (0.5,) * 3), (0.2, 0.6), steps_per_unit=32)
        same, refine_ok, sizes = 0, 0, []
        eps_grid = (0.1, 0.05, 0.02)
        for k in range(50):
            loops = S.generate_soup(cfg, P.make_rng(10, P.stream_id("accept-clusters", k))).loops[:30]
            sizes.append(len(loops))
            labels = []
            for eps in eps_grid:
                idx = C.build_index(loops, eps)
                same += bool(np.array_equal(idx.labels, C.brute_force_labels(loops, eps)))
                labels.append(idx.labels)
            refine_ok += all(_refines(labels[i + 1], labels[i]) for i in range(len(eps_grid) - 1))
        return same, refine_ok, sizes

    (same, refine_ok, sizes), sec = _timed(run)
    report(10, same == 150 and refine_ok == 50, "cluster labels vs brute force",
           f"{same}/150 labelings identical, epsilon refinement on {refine_ok}/50 soups "
           f"(loops per soup {min(sizes)}..{max(sizes)})", sec, 60)


# -- 11. monotone coupling ---------------------------------------------------------------------------


def test_criterion_11_threshold_scan_monotone(report):
    rep, sec = _timed(lambda: E.threshold_scan([0.25, 0.5, 1.0], [2.0, 4.0], 100, seed=11,
                                               name="accept-threshold"))
    ev = rep["events"].astype(int)
    exact = bool(np.all(np.diff(ev, axis=1) >= 0) and np.all(np.diff(ev, axis=2) >= 0))
    table = [[round(e.value, 3) for e in row] for row in rep["table"]]
    report(11, exact, "threshold scan monotone in alpha and cap",
           f"per-soup monotone on {ev.shape[0]} soups: {exact}; p_hat (alpha x cap) {table}", sec, 600)


# -- 12. determinism ------------------------------------------------------------------------------------


def test_criterion_12_determinism(report, tmp_path):
    spec = {"kind": "one-arm", "name": "det", "seed": 12,
            "parameters": {"alpha": 0.5, "radii": [0.25, 0.125], "soups": 200}}
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec))

    def once(out):
        code = cli.main(["run", str(path), "--output", str(tmp_path / out), "--quiet"])
        doc = json.loads((tmp_path / out / "det.json").read_text())
        doc.pop("timestamp")
        doc["spec"].pop("output_dir")
        return code, (tmp_path / out / "det.csv").read_bytes(), doc

    t0 = time.perf_counter()
    (ca, csv_a, json_a), first = _timed(lambda: once("a"))
    cb, csv_b, json_b = once("b")
    sec = time.perf_counter() - t0
    ok = ca == cb == 0 and csv_a == csv_b and json_a == json_b
    report(12, ok, "byte-identical rerun", f"one-arm, 200 soups: CSV identical {csv_a == csv_b}, "
           f"JSON identical modulo timestamp {json_a == json_b}", sec, 2 * first + 30)
