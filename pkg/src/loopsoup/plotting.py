"""Optional PNG figures for experiment results (the CSV files stay the contract)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import io as lio  # noqa: E402


def _col(rows, key):
    return np.array([float(r[key]) for r in rows])


def _errorbar(ax, x, y, se, **kw):
    ax.errorbar(x, y, yerr=1.96 * se, fmt="o-", capsize=3, **kw)


def _crossing_mass(ax, rows, summary):
    r = _col(rows, "r")
    _errorbar(ax, r, _col(rows, "estimate") / r, _col(rows, "stderr") / r, label="Monte Carlo")
    ax.plot(r, _col(rows, "series") / r, "k--", label="series")
    ax.set_xscale("log")
    ax.set_xlabel("r")
    ax.set_ylabel("mass / r")


def _one_arm(ax, rows, summary):
    r, p = _col(rows, "r"), _col(rows, "p_hat")
    _errorbar(ax, r, p, _col(rows, "stderr"), label="p_hat")
    ax.plot(r, _col(rows, "single_loop_bound"), "k:", label="single-loop bound")
    fit = summary.get("fit", {})
    # non-finite floats arrive as strings from the JSON summary
    xi, icpt = float(fit.get("xi", "nan")), float(fit.get("intercept", "nan"))
    if np.isfinite(xi) and np.isfinite(icpt):
        ax.plot(r, np.exp(icpt) * r**xi, "r--", label=f"slope {xi:.3f}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("r")
    ax.set_ylabel("crossing probability")


def _nonintersection(ax, rows, summary):
    _errorbar(ax, _col(rows, "R"), _col(rows, "p_hat"), _col(rows, "stderr"), label="p_hat")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("R")
    ax.set_ylabel("non-intersection probability")


def _threshold_scan(ax, rows, summary):
    caps = sorted({float(r["cap"]) for r in rows})
    for c in caps:
        sel = [r for r in rows if float(r["cap"]) == c]
        _errorbar(ax, _col(sel, "alpha"), _col(sel, "p_hat"), _col(sel, "stderr"), label=f"cap {c:g}")
    ax.set_xlabel("alpha")
    ax.set_ylabel("crossing probability")


def _inversion(ax, rows, summary):
    x = np.arange(len(rows))
    ax.bar(x, _col(rows, "ks_pvalue"))
    ax.axhline(0.01, color="r", ls="--")
    ax.set_xticks(x, [r["observable"] for r in rows], rotation=20)
    ax.set_ylabel("KS p-value")


def _kernel_selftest(ax, rows, summary):
    err = np.maximum(_col(rows, "abs_error"), 1e-18)
    ax.bar(np.arange(len(rows)), err)
    ax.set_yscale("log")
    ax.set_xticks(np.arange(len(rows)), [f"{r['identity']}\n({r['r']},{r['R']})" for r in rows], fontsize=7)
    ax.set_ylabel("absolute error")


def _key_lemma(ax, rows, summary):
    x = np.arange(len(rows))
    ax.bar(x, _col(rows, "mass"), yerr=1.96 * _col(rows, "stderr"), capsize=3)
    ax.set_xticks(x, [f"[{r['band_lo']}, {r['band_hi']}]" for r in rows])
    ax.set_ylabel("loop mass")


def _soup_dump(ax, rows, summary):
    d = _col(rows, "diameter")
    ax.hist(d, bins=30)
    ax.set_xlabel("loop diameter")
    ax.set_ylabel("count")


PLOTTERS = {
    "crossing-mass": _crossing_mass,
    "one-arm": _one_arm,
    "nonintersection": _nonintersection,
    "threshold-scan": _threshold_scan,
    "inversion": _inversion,
    "kernel-selftest": _kernel_selftest,
    "key-lemma": _key_lemma,
    "soup-dump": _soup_dump,
}


def render(kind: str, rows: list[dict], summary: dict, path) -> Path | None:
    """Draw the figure for ``kind`` from its CSV rows; returns the written path."""
    draw = PLOTTERS.get(kind)
    if draw is None or not rows:
        return None
    fig, ax = plt.subplots(figsize=(6, 4), dpi=120)
    draw(ax, rows, summary)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=8)
    ax.set_title(kind)
    fig.tight_layout()
    buf = _png_bytes(fig)
    plt.close(fig)
    return lio.atomic_write(path, buf)


def _png_bytes(fig) -> bytes:
    import io

    b = io.BytesIO()
    fig.savefig(b, format="png", metadata={"Software": None})
    return b.getvalue()
