"""Command line experiment runner.

``loopsoup run SPEC``       run an experiment and write CSV + JSON results
``loopsoup describe SPEC``  validate and project cost without writing anything
``loopsoup selftest``       deterministic kernel identity checks

Exit status: 0 success, 1 failure, 2 invalid spec, 3 budget exhausted
(partial results written and flagged).
"""

from __future__ import annotations

import argparse
import copy
import datetime as _dt
import hashlib
import json
import math
import os
import subprocess
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, clusters, estimators, harmonic
from . import io as lio
from .runner import Runner
from .soup import ConfigError, SoupConfig, generate_soup, save_soup

SPEC_SCHEMA = "loopsoup.experiment/1"
RESULT_SCHEMA = "loopsoup.result/1"
EXIT_OK, EXIT_FAIL, EXIT_INVALID, EXIT_BUDGET = 0, 1, 2, 3
RECORD_BYTES = 32  # one vertex: time plus three coordinates as float64
ENV_RESOURCES = {"LOOPSOUP_WORKERS": "workers", "LOOPSOUP_MAX_SOUPS": "max_soups",
                 "LOOPSOUP_WALL_CLOCK_BUDGET": "wall_clock_budget"}

# fixed CSV columns per experiment kind, with a description of each
RESULT_COLUMNS = json.loads(resources.files(__package__).joinpath("results_schema.json").read_text("utf-8"))["csv"]


class SpecError(ValueError):
    """Invalid experiment spec; the message names the offending field."""


# -- validation ------------------------------------------------------------------------


def _num(where, v, lo=None, hi=None, lo_open=True, hi_open=True, integer=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (integer and not isinstance(v, int)):
        raise SpecError(f"{where}: expected {'an integer' if integer else 'a number'}, got {json.dumps(v)}")
    if not math.isfinite(v):
        raise SpecError(f"{where}: must be finite")
    if lo is not None and (v < lo or (lo_open and v == lo)):
        raise SpecError(f"{where}: must be {'>' if lo_open else '>='} {lo}")
    if hi is not None and (v > hi or (hi_open and v == hi)):
        raise SpecError(f"{where}: must be {'<' if hi_open else '<='} {hi}")
    return int(v) if integer else float(v)


def _list(where, v, item, min_len=1):
    if not isinstance(v, list):
        raise SpecError(f"{where}: expected a list")
    if len(v) < min_len:
        raise SpecError(f"{where}: needs at least {min_len} entries")
    return [item(f"{where}[{i}]", x) for i, x in enumerate(v)]


def _bool(where, v):
    if not isinstance(v, bool):
        raise SpecError(f"{where}: expected true or false")
    return v


def _choice(options):
    def check(where, v):
        if v not in options:
            raise SpecError(f"{where}: must be one of {', '.join(options)}")
        return v
    return check


def _radius(where, v):
    return _num(where, v, 0, 1)


def _positive(where, v):
    return _num(where, v, 0)


def _count(where, v):
    return _num(where, v, 0, integer=True, lo_open=False)


MIN_REPLICATES = 30


def _replicates(where, v):
    """Replicate counts behind an Estimate: zero is reported as zero work, otherwise at least MIN_REPLICATES."""
    n = _count(where, v)
    if n == 0:
        raise SpecError(f"{where}: spec projects zero work")
    if n < MIN_REPLICATES:
        raise SpecError(f"{where}: at least {MIN_REPLICATES} independent replicates are required")
    return n


def _vec3(where, v):
    if not isinstance(v, list) or len(v) != 3:
        raise SpecError(f"{where}: expected 3 coordinates")
    return _list(where, v, _num)


def _ball(where, v):
    if not isinstance(v, dict) or set(v) != {"center", "radius"}:
        raise SpecError(f"{where}: expected {{\"center\": [x, y, z], \"radius\": r}}")
    return {"center": _vec3(f"{where}.center", v["center"]), "radius": _positive(f"{where}.radius", v["radius"])}


def _window(where, v):
    if not isinstance(v, list) or len(v) != 2:
        raise SpecError(f"{where}: expected [lo corner, hi corner]")
    lo, hi = _vec3(f"{where}[0]", v[0]), _vec3(f"{where}[1]", v[1])
    if any(b <= a for a, b in zip(lo, hi)):
        raise SpecError(f"{where}: every hi coordinate must exceed lo")
    return [lo, hi]


def _pair(where, v):
    vals = _list(where, v, _positive, 2)
    if len(vals) != 2 or not vals[0] < vals[1]:
        raise SpecError(f"{where}: expected [lo, hi] with 0 < lo < hi")
    return vals


_NO_DEFAULT = object()

# kind -> parameter -> (checker, default)
PARAMETERS = {
    "crossing-mass": {
        "r": (lambda w, v: _list(w, v if isinstance(v, list) else [v], _radius), [0.05]),
        "replicates": (_replicates, 32),
        "loops_per_replicate": (lambda w, v: _num(w, v, 1, integer=True, lo_open=False), 500),
    },
    "one-arm": {
        "alpha": (_positive, _NO_DEFAULT),
        "radii": (lambda w, v: _list(w, v, _radius), [0.25, 0.125, 0.0625, 0.03125]),
        "soups": (_replicates, 200),
        "kappa": (_positive, 0.2),
        "delta": (_positive, 0.5),
        "h": (lambda w, v: _num(w, v, 0, 0.5), 0.05),
        "dual": (_bool, False),
    },
    "inversion": {
        "rho": (_radius, 0.5),
        "loops": (_replicates, 10000),
        "confine": (lambda w, v: _num(w, v, 1), 8.0),
        "h": (lambda w, v: _num(w, v, 0, 0.5), 0.05),
    },
    "nonintersection": {
        "R": (lambda w, v: _list(w, v, lambda w2, x: _num(w2, x, 1), 2), [2, 4, 8, 16]),
        "replicates": (_replicates, 40),
        "pairs_per_replicate": (lambda w, v: _num(w, v, 1, integer=True, lo_open=False), 50),
        "kappa": (_positive, 0.2),
        "h": (lambda w, v: _num(w, v, 0, 0.5), 0.05),
    },
    "key-lemma": {
        "K1": (_ball, {"center": [0.0, 0.0, 0.0], "radius": 1.0}),
        "K2": (_ball, {"center": [3.0, 0.0, 0.0], "radius": 1.0}),
        "R": (lambda w, v: _num(w, v, 1), 4.0),
        "R2": (lambda w, v: _num(w, v, 1), 8.0),
        "replicates": (_replicates, 32),
        "loops_per_replicate": (lambda w, v: _num(w, v, 1, integer=True, lo_open=False), 2000),
    },
    "threshold-scan": {
        "alphas": (lambda w, v: _list(w, v, _positive), [0.25, 0.5, 1.0]),
        "caps": (lambda w, v: _list(w, v, lambda w2, x: _num(w2, x, 1)), [2.0, 4.0]),
        "soups": (_replicates, 100),
        "inner": (_positive, 1.0),
        "outer": (_positive, 2.0),
        "epsilon": (_positive, 0.25),
    },
    "soup-dump": {
        "alpha": (_positive, 1.0),
        "window": (_window, [[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]),
        "diam_band": (_pair, [0.25, 1.0]),
        "steps_per_unit": (_positive, 64.0),
        "epsilon": (_positive, 0.05),
        "metric": (_choice(clusters.METRICS), "euclidean"),
        "mode": (_choice(("intersect", "confine")), "intersect"),
    },
    "kernel-selftest": {
        "pairs": (lambda w, v: _list(w, v, _pair), [[0.5, 1.0], [1.0, 2.0]]),
        "tol": (_positive, 1e-6),
    },
}

RESOURCES = {
    "workers": (lambda w, v: _num(w, v, 1, integer=True, lo_open=False), 1),
    "max_soups": (lambda w, v: None if v is None else _count(w, v), None),
    "wall_clock_budget": (lambda w, v: None if v is None else _positive(w, v), None),
}

TOP_LEVEL = {"schema", "kind", "name", "seed", "parameters", "resources", "output_dir"}


def _fill(where, given, table):
    if not isinstance(given, dict):
        raise SpecError(f"{where}: expected an object")
    unknown = sorted(set(given) - set(table))
    if unknown:
        raise SpecError(f"{where}.{unknown[0]}: unknown field (allowed: {', '.join(sorted(table))})")
    out = {}
    for key, (check, default) in table.items():
        if key in given:
            out[key] = check(f"{where}.{key}", given[key])
        elif default is _NO_DEFAULT:
            raise SpecError(f"{where}.{key}: required field is missing")
        else:
            out[key] = copy.deepcopy(default)
    return out


def _cross_checks(kind, p):
    """Constraints that involve several parameters."""
    if kind == "one-arm":
        if p["kappa"] >= math.log(1.0 / max(p["radii"])):
            raise SpecError("parameters.kappa: must be below log(1/max(radii)) so the spheres stay apart")
    elif kind == "inversion":
        if p["confine"] <= 1.0 / p["rho"]:
            raise SpecError("parameters.confine: must exceed 1/rho so the confining shell contains both spheres")
    elif kind == "key-lemma":
        if not p["R2"] > p["R"]:
            raise SpecError("parameters.R2: must exceed R")
    elif kind == "threshold-scan":
        if not p["outer"] > p["inner"]:
            raise SpecError("parameters.outer: must exceed inner")
        if p["epsilon"] >= p["outer"] - p["inner"]:
            raise SpecError("parameters.epsilon: must be smaller than the annulus width outer - inner")
    elif kind == "soup-dump":
        side = min(b - a for a, b in zip(*p["window"]))
        if p["epsilon"] >= side:
            raise SpecError("parameters.epsilon: must be smaller than the window side")
    elif kind == "nonintersection":
        if min(p["R"]) < 2:
            raise SpecError("parameters.R: outer radii must be at least 2")


def validate(raw) -> dict:
    """Normalized spec with every default filled in; raises SpecError naming the bad field."""
    if not isinstance(raw, dict):
        raise SpecError("spec: expected a JSON object")
    unknown = sorted(set(raw) - TOP_LEVEL)
    if unknown:
        raise SpecError(f"spec.{unknown[0]}: unknown field")
    if raw.get("schema", SPEC_SCHEMA) != SPEC_SCHEMA:
        raise SpecError(f"spec.schema: unsupported schema {raw.get('schema')!r} (expected {SPEC_SCHEMA!r})")
    kind = raw.get("kind")
    if kind not in PARAMETERS:
        raise SpecError(f"spec.kind: must be one of {', '.join(PARAMETERS)}")
    name = raw.get("name", kind)
    if not isinstance(name, str) or not name or any(c in name for c in "/\\"):
        raise SpecError("spec.name: must be a nonempty string without path separators")
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise SpecError("spec.seed: must be a nonnegative integer")
    params = _fill("parameters", raw.get("parameters", {}), PARAMETERS[kind])
    _cross_checks(kind, params)
    resources = _fill("resources", raw.get("resources", {}), RESOURCES)
    out_dir = raw.get("output_dir", "results")
    if not isinstance(out_dir, str) or not out_dir:
        raise SpecError("spec.output_dir: must be a nonempty string")
    return {"schema": SPEC_SCHEMA, "kind": kind, "name": name, "seed": seed, "parameters": params,
            "resources": resources, "output_dir": out_dir}


def load_spec(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise SpecError(f"{path}: cannot read spec ({exc.strerror})") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON ({exc.msg})") from None
    return validate(raw)


def apply_overrides(spec: dict, workers=None, seed=None, output=None, environ=None) -> dict:
    """Command-line flags beat environment variables, which beat the spec; the environment may only set resources."""
    spec = copy.deepcopy(spec)
    env = os.environ if environ is None else environ
    for var, key in ENV_RESOURCES.items():
        if var in env:
            try:
                val = json.loads(env[var])
            except json.JSONDecodeError:
                raise SpecError(f"{var}: not a JSON value") from None
            spec["resources"][key] = RESOURCES[key][0](var, val)
    if workers is not None:
        spec["resources"]["workers"] = RESOURCES["workers"][0]("--workers", workers)
    if seed is not None:
        if seed < 0:
            raise SpecError("--seed: must be nonnegative")
        spec["seed"] = seed
    if output is not None:
        spec["output_dir"] = str(output)
    return spec


def config_digest(spec: dict) -> str:
    """Hash of the scientific content (kind, name, seed, parameters) of a normalized spec."""
    core = {k: spec[k] for k in ("kind", "name", "seed", "parameters")}
    return hashlib.sha256(json.dumps(core, sort_keys=True).encode()).hexdigest()[:16]


# -- experiments ------------------------------------------------------------------------


@dataclass
class Outcome:
    columns: list
    rows: list
    summary: dict = field(default_factory=dict)
    partial: bool = False


def _soups(p, res):
    cap = res["max_soups"]
    return (p["soups"], False) if cap is None or p["soups"] <= cap else (cap, True)


def _est(e):
    return {"value": e.value, "stderr": e.stderr, "n": e.n}


def run_crossing_mass(spec, runner):
    p = spec["parameters"]
    rows, ests = [], []
    for r in p["r"]:
        e = estimators.estimate_crossing_mass(r, p["replicates"], spec["seed"], p["loops_per_replicate"],
                                              runner=runner, name=f"{spec['name']}/r={r!r}")
        ests.append(e)
        rows.append({"r": r, "estimate": e.value, "stderr": e.stderr, "replicates": e.n,
                     "series": harmonic.crossing_mass(r), "ratio_to_r": e.value / r,
                     "coverage_defect": e.metadata["coverage_defect"]})
    cols = ["r", "estimate", "stderr", "replicates", "series", "ratio_to_r", "coverage_defect"]
    return Outcome(cols, rows, {"estimates": {f"{r!r}": _est(e) for r, e in zip(p["r"], ests)}}, runner.exhausted)


def run_one_arm(spec, runner):
    p = spec["parameters"]
    n, capped = _soups(p, spec["resources"])
    res = estimators.estimate_one_arm(p["alpha"], p["radii"], n, spec["seed"], p["kappa"], p["delta"], p["h"],
                                      p["dual"], runner=runner, name=spec["name"])
    fit = res.fit
    trend = list(fit.epsilon_trend.values())
    rows = []
    for j, (r, e) in enumerate(zip(res.radii, fit.p_hat)):
        rows.append({"r": r, "p_hat": e.value, "stderr": e.stderr, "soups": e.n,
                     "hits": int(res.events[:, 0, j].sum()),
                     "single_loop_bound": estimators.single_loop_bound(p["alpha"], harmonic.crossing_mass(r)),
                     "single_loop_p_hat": float(res.single[:, j].mean()),
                     "p_hat_half_tol": trend[1][j][0], "p_hat_quarter_tol": trend[2][j][0],
                     "in_fit": r not in fit.excluded})
    cols = ["r", "p_hat", "stderr", "soups", "hits", "single_loop_bound", "single_loop_p_hat", "p_hat_half_tol",
            "p_hat_quarter_tol", "in_fit"]
    summary = {"fit": {"xi": fit.xi, "ci": list(fit.ci), "intercept": fit.intercept, "excluded": fit.excluded},
               "epsilon_trend": fit.epsilon_trend, "diagnostics": {"loops_per_soup": res.loops_per_soup,
                                                                   "vertices_per_soup": res.vertices_per_soup}}
    return Outcome(cols, rows, summary, runner.exhausted or capped)


def run_inversion(spec, runner):
    p = spec["parameters"]
    rep = estimators.check_inversion_invariance(p["rho"], p["loops"], spec["seed"], p["confine"], p["h"],
                                                runner=runner, name=spec["name"])
    rows = []
    for key in estimators.INVERSION_OBSERVABLES:
        ks, m = rep["ks"][key], rep["means"][key]
        rows.append({"observable": key, "ks_statistic": ks["statistic"], "ks_pvalue": ks["pvalue"],
                     "mean_before": m["before"], "mean_after": m["after"], "mean_diff": m["diff"],
                     "mean_diff_stderr": m["diff_stderr"], "n": rep["n"]})
    cols = ["observable", "ks_statistic", "ks_pvalue", "mean_before", "mean_after", "mean_diff", "mean_diff_stderr",
            "n"]
    summary = {"diagnostics": {k: rep[k] for k in ("n", "proposed", "acceptance", "rejected_near_origin")}}
    return Outcome(cols, rows, summary, rep["partial"] or rep["n"] < p["loops"])


def run_nonintersection(spec, runner):
    p = spec["parameters"]
    rep = estimators.estimate_nonintersection(p["R"], p["replicates"], p["pairs_per_replicate"], spec["seed"],
                                              p["kappa"], p["h"], runner=runner, name=spec["name"])
    rows = [{"R": R, "p_hat": e.value, "stderr": e.stderr, "replicates": e.n} for R, e in zip(rep["R"], rep["p_hat"])]
    summary = {"fits": {"slope": rep["slope"], "slope_stderr": rep["slope_stderr"], "intercept": rep["intercept"]}}
    return Outcome(["R", "p_hat", "stderr", "replicates"], rows, summary, rep["partial"])


def run_key_lemma(spec, runner):
    p = spec["parameters"]
    k1 = estimators.Ball(tuple(p["K1"]["center"]), p["K1"]["radius"])
    k2 = estimators.Ball(tuple(p["K2"]["center"]), p["K2"]["radius"])
    rep = estimators.spot_check_key_lemma(k1, k2, p["R"], p["R2"], p["replicates"], spec["seed"],
                                          p["loops_per_replicate"], runner=runner, name=spec["name"])
    rows = [{"band_lo": lo, "band_hi": hi, "mass": e.value, "stderr": e.stderr, "replicates": e.n}
            for (lo, hi), e in zip([(1.0, p["R"]), (p["R"], p["R2"])], [rep["mass_small"], rep["mass_large"]])]
    summary = {"estimates": {k: rep[k] for k in ("ratio", "ratio_stderr", "ratio_lower95")},
               "diagnostics": {"inconclusive": rep["inconclusive"], "vacuous": rep["vacuous"]}}
    return Outcome(["band_lo", "band_hi", "mass", "stderr", "replicates"], rows, summary, runner.exhausted)


def run_threshold_scan(spec, runner):
    p = spec["parameters"]
    n, capped = _soups(p, spec["resources"])
    rep = estimators.threshold_scan(p["alphas"], p["caps"], n, spec["seed"], p["inner"], p["outer"], p["epsilon"],
                                    runner=runner, name=spec["name"])
    rows = []
    for i, a in enumerate(rep["alphas"]):
        for j, c in enumerate(rep["caps"]):
            e = rep["table"][i][j]
            hits = int(rep["events"][:, i, j].sum())
            rows.append({"alpha": a, "cap": c, "p_hat": e.value, "stderr": e.stderr, "soups": e.n, "hits": hits,
                         "low_hits": hits < 10})
    return Outcome(["alpha", "cap", "p_hat", "stderr", "soups", "hits", "low_hits"], rows, {}, rep["partial"] or capped)


def run_soup_dump(spec, runner):
    p = spec["parameters"]
    cfg = SoupConfig(p["alpha"], tuple(map(tuple, p["window"])), tuple(p["diam_band"]), p["steps_per_unit"],
                     spec["seed"], mode=p["mode"])
    rng = estimators._rng(spec["seed"], spec["name"], 0)
    soup = generate_soup(cfg, rng)
    save_soup(soup, Path(spec["output_dir"]) / f"{spec['name']}_soup")
    idx = clusters.build_index(soup, p["epsilon"], p["metric"], window=cfg.window)
    rows = clusters.cluster_table(idx)
    summary = {"diagnostics": {"proposed": soup.proposal_count, "realized": soup.realized_count,
                               "proposal_mass": soup.proposal_mass, "clusters": int(len(set(idx.labels.tolist()))),
                               **soup.diagnostics}}
    return Outcome(clusters.CLUSTER_COLUMNS[:4], [{k: r[k] for k in clusters.CLUSTER_COLUMNS[:4]} for r in rows],
                   summary, False)


IDENTITIES = ("interior_exit_mass", "exterior_hitting_mass", "shell_escape_mass")


def kernel_checks(pairs, tol) -> list[dict]:
    rows = []
    for r, R in pairs:
        got, want = harmonic.lemma_integrals(r, R)
        for name, g, w in zip(IDENTITIES, got, want):
            err = abs(g - w)
            rows.append({"identity": name, "r": r, "R": R, "value": g, "expected": w, "abs_error": err,
                         "pass": err <= tol})
    return rows


def run_kernel_selftest(spec, runner):
    p = spec["parameters"]
    rows = kernel_checks(p["pairs"], p["tol"])
    return Outcome(["identity", "r", "R", "value", "expected", "abs_error", "pass"], rows,
                   {"all_pass": all(r["pass"] for r in rows)}, False)


RUNNERS = {
    "crossing-mass": run_crossing_mass,
    "one-arm": run_one_arm,
    "inversion": run_inversion,
    "nonintersection": run_nonintersection,
    "key-lemma": run_key_lemma,
    "threshold-scan": run_threshold_scan,
    "soup-dump": run_soup_dump,
    "kernel-selftest": run_kernel_selftest,
}


# -- cost projection ---------------------------------------------------------------------


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return time.perf_counter() - t0, out


def _vertices(loops):
    return int(sum(len(getattr(lp, "points", lp)) for lp in loops))


def projection(spec: dict) -> dict:
    """Units of work, soups, peak vertices per unit and projected seconds, from a short calibration run.

    Calibration draws from a dedicated stream so it never touches the
    experiment's own random numbers, and writes nothing.
    """
    kind, p, seed = spec["kind"], spec["parameters"], spec["seed"]
    cal = f"{spec['name']}/calibration"
    units, soups, per_unit, verts = 0, 0, 0.0, 0
    if kind == "crossing-mass":
        units = p["replicates"] * len(p["r"])
        per_loop = []
        for r in p["r"]:
            lo, hi, w = estimators.reroot_bands(r, r)
            value = estimators._reroot_value(r, r, 1.0 / 64)
            rng = estimators._rng(seed, cal, 0)
            # most loops go to the short bands that can just span the shell
            sec, _ = _timed(lambda: [estimators._reroot_batch(r, r, lo[b], hi[b], 8, rng, value) for b in (2, 3, 4)])
            per_loop.append(sec / 24)
        per_unit = float(np.mean(per_loop)) * p["loops_per_replicate"]
        pilot = float(np.sum(per_loop)) * 64 * 10
        return _finish(spec, units, 0, per_unit, 64 * p["loops_per_replicate"], pilot)
    if kind == "one-arm":
        soups = units = _soups(p, spec["resources"])[0]
        radii = sorted(p["radii"], reverse=True)
        setup = estimators.AnnulusSetup(1.0, 1.0 / radii[-1], p["kappa"], p["delta"], p["h"]) if p["dual"] else \
            estimators.AnnulusSetup(radii[-1], 1.0, p["kappa"], p["delta"], p["h"])
        plan = setup.plan(p["alpha"])
        rng = estimators._rng(seed, cal, 0)
        k = 3
        sec, loops = _timed(lambda: [estimators._annulus_soup(setup, plan, rng) for _ in range(k)])
        per_unit = sec / k
        verts = max(_vertices(x) for x in loops)
    elif kind == "inversion":
        plan = estimators.inversion_plan(p["rho"], p["confine"])
        sec, (kept, proposed) = _timed(lambda: estimators._inversion_batch(plan, p["rho"], p["confine"], p["h"], seed,
                                                                          cal, 0))
        units = math.ceil(p["loops"] / max(len(kept), 0.5)) if p["loops"] else 0
        per_unit, verts = sec, _vertices(kept)
    elif kind == "nonintersection":
        units = p["replicates"]
        pairs = min(5, p["pairs_per_replicate"])
        sec, _ = _timed(lambda: estimators._nonintersection_replicate(max(p["R"]), p["kappa"], p["h"], pairs, seed,
                                                                      cal, 0))
        per_unit = sec * p["pairs_per_replicate"] / pairs
        verts = 2 * p["pairs_per_replicate"] * int(max(p["R"]) ** 2 / p["h"] ** 2)
    elif kind == "key-lemma":
        units = p["replicates"]
        t0 = time.perf_counter()
        small = dict(spec, parameters=dict(p, replicates=2, loops_per_replicate=max(1, p["loops_per_replicate"] // 10)))
        run_key_lemma(dict(small, name=cal), Runner())
        per_unit = (time.perf_counter() - t0) / 2 * 10
        verts = 64 * p["loops_per_replicate"]
    elif kind == "threshold-scan":
        soups = units = _soups(p, spec["resources"])[0]
        sec, ev = _timed(lambda: estimators._threshold_replicate(sorted(p["alphas"]), sorted(p["caps"]), p["inner"],
                                                                 p["outer"], p["epsilon"], (4 / p["epsilon"]) ** 2,
                                                                 seed, cal, 0))
        per_unit = sec
        verts = 0
        soups *= len(p["alphas"])
    elif kind == "soup-dump":
        units = soups = 1
        cfg = SoupConfig(p["alpha"], tuple(map(tuple, p["window"])), tuple(p["diam_band"]), p["steps_per_unit"], seed,
                         mode=p["mode"])
        sec, s = _timed(lambda: generate_soup(cfg, estimators._rng(seed, cal, 0)))
        per_unit, verts = sec, _vertices(s.loops)
    elif kind == "kernel-selftest":
        units = len(p["pairs"])
        sec, _ = _timed(lambda: kernel_checks(p["pairs"][:1], p["tol"]))
        per_unit = sec
    return _finish(spec, units, soups, per_unit, verts, 0.0)


def _finish(spec, units, soups, per_unit, verts, fixed):
    workers = spec["resources"]["workers"]
    seconds = fixed + per_unit * math.ceil(units / workers) if units else 0.0
    budget = spec["resources"]["wall_clock_budget"]
    return {"units": units, "soups": soups, "seconds_per_unit": per_unit, "projected_seconds": seconds,
            "peak_vertices": verts, "memory_bytes": verts * RECORD_BYTES * workers,
            "exceeds_budget": budget is not None and seconds > budget}


# -- output -------------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def format_table(columns, rows) -> str:
    cells = [[str(c) for c in columns]] + [[_fmt(r[c]) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(x.rjust(w) for x, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def git_describe(cwd=None) -> str | None:
    """``git describe --always --dirty`` of the working directory, or None outside a repository."""
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=cwd, capture_output=True, text=True,
                             timeout=10, check=False)
    except (OSError, subprocess.SubprocessError):
        return None
    return res.stdout.strip() or None if res.returncode == 0 else None


def write_results(spec: dict, out: Outcome, figures: bool = False) -> dict:
    """Write ``<name>.csv`` and ``<name>.json`` (and optionally ``<name>.png``) into the output directory."""
    if out.columns != list(RESULT_COLUMNS[spec["kind"]]):
        raise RuntimeError(f"{spec['kind']}: columns {out.columns} disagree with the results schema")
    d = Path(spec["output_dir"])
    name = spec["name"]
    paths = {"csv": lio.write_csv(d / f"{name}.csv", out.columns, out.rows)}
    doc = {
        "schema": RESULT_SCHEMA,
        "version": __version__,
        "kind": spec["kind"],
        "name": name,
        "spec": spec,
        "config_digest": config_digest(spec),
        "git_describe": git_describe(),
        "seeds": {"seed": spec["seed"], "streams": "pcg64(seed, blake2b-8(name, replicate))"},
        "columns": out.columns,
        "partial": out.partial,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        **out.summary,
    }
    paths["json"] = lio.write_json(d / f"{name}.json", doc)
    if figures:
        from . import plotting

        rows = lio.read_csv(paths["csv"])
        png = plotting.render(spec["kind"], rows, json.loads(lio.dumps_json(out.summary)), d / f"{name}.png")
        if png is not None:
            paths["png"] = png
    return paths


class BudgetExhausted(estimators.EstimatorError):
    """The wall-clock budget ran out before any usable estimate existed."""


def execute(spec: dict, figures: bool = False, progress: bool = True) -> tuple[int, Outcome, dict]:
    res = spec["resources"]
    runner = Runner(res["workers"], res["wall_clock_budget"], progress=progress)
    try:
        out = RUNNERS[spec["kind"]](spec, runner)
    except estimators.EstimatorError as exc:
        if runner.exhausted:
            raise BudgetExhausted(f"budget exhausted before enough replicates completed ({exc})") from None
        raise
    paths = write_results(spec, out, figures)
    if spec["kind"] == "kernel-selftest" and not out.summary["all_pass"]:
        return EXIT_FAIL, out, paths
    return (EXIT_BUDGET if out.partial else EXIT_OK), out, paths


def _zero_work(spec):
    p = spec["parameters"]
    for key in ("soups", "loops", "replicates"):
        if key in p and p[key] == 0:
            raise SpecError(f"parameters.{key}: spec projects zero {'soups' if key == 'soups' else key}")
    if "soups" in p and spec["resources"]["max_soups"] == 0:
        raise SpecError("resources.max_soups: spec projects zero soups")


# -- entry point -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="loopsoup", description="Brownian loop soup experiments.")
    ap.add_argument("--version", action="version", version=f"loopsoup {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for cmd, text in (("run", "run an experiment spec"), ("describe", "validate a spec and project its cost")):
        sp = sub.add_parser(cmd, help=text)
        sp.add_argument("spec", help="experiment spec (JSON)")
        sp.add_argument("--workers", type=int, help="worker processes (overrides the spec)")
        sp.add_argument("--seed", type=int, help="master seed (overrides the spec)")
        sp.add_argument("--output", help="output directory (overrides the spec)")
        if cmd == "run":
            sp.add_argument("--figures", action="store_true", help="also render a PNG figure")
            sp.add_argument("--quiet", action="store_true", help="no progress on standard error")
    sub.add_parser("selftest", help="deterministic kernel identity checks")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "selftest":
        spec = validate({"kind": "kernel-selftest"})
        rows = kernel_checks(spec["parameters"]["pairs"], spec["parameters"]["tol"])
        for r in rows:
            print(f"{'PASS' if r['pass'] else 'FAIL'}  {r['identity']:<22} r={r['r']:g} R={r['R']:g}  "
                  f"value={r['value']:.12g} expected={r['expected']:.12g} error={r['abs_error']:.2e}")
        return EXIT_OK if all(r["pass"] for r in rows) else EXIT_FAIL
    try:
        spec = apply_overrides(load_spec(args.spec), args.workers, args.seed, args.output)
        _zero_work(spec)
    except SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.command == "describe":
        try:
            proj = projection(spec)
        except (ConfigError, harmonic.DomainError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
        rows = [{"field": k, "value": v} for k, v in [
            ("kind", spec["kind"]), ("name", spec["name"]), ("seed", spec["seed"]),
            ("workers", spec["resources"]["workers"]), ("work units", proj["units"]),
            ("soups", proj["soups"]), ("seconds per unit", proj["seconds_per_unit"]),
            ("projected seconds", proj["projected_seconds"]), ("peak vertices per worker", proj["peak_vertices"]),
            ("memory bytes", proj["memory_bytes"]), ("exceeds budget", proj["exceeds_budget"]),
            ("config digest", config_digest(spec))]]
        print(format_table(["field", "value"], rows))
        return EXIT_OK
    try:
        code, out, paths = execute(spec, figures=args.figures, progress=not args.quiet)
    except (ConfigError, harmonic.DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except BudgetExhausted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except estimators.EstimatorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    flag = "  [PARTIAL: budget exhausted]" if out.partial else ""
    print(f"{spec['kind']} '{spec['name']}' seed={spec['seed']}{flag}")
    print(format_table(out.columns, out.rows))
    for key in ("fit", "fits", "estimates"):
        if key in out.summary:
            print(f"{key}: {json.dumps(lio.to_jsonable(out.summary[key]), sort_keys=True)}")
    for kind, path in paths.items():
        print(f"wrote {path}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
