"""Result containers and order-independent replicate statistics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np


def fmean(values) -> float:
    v = [float(x) for x in values]
    return math.fsum(v) / len(v)


def mean_stderr(values) -> tuple[float, float]:
    """Mean and standard error; sums are exactly rounded so the result ignores input order."""
    v = [float(x) for x in values]
    n = len(v)
    m = math.fsum(v) / n
    if n < 2:
        return m, float("nan")
    var = math.fsum((x - m) ** 2 for x in v) / (n - 1)
    return m, math.sqrt(var / n)


@dataclass
class Estimate:
    """Monte Carlo value with its standard error over ``n`` independent replicates."""

    value: float
    stderr: float
    n: int
    seed: int | None = None
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_replicates(cls, values, seed=None, **metadata) -> "Estimate":
        m, se = mean_stderr(values)
        return cls(m, se, len(values), seed, metadata)

    @property
    def ci95(self) -> tuple[float, float]:
        return self.value - 1.96 * self.stderr, self.value + 1.96 * self.stderr

    def within(self, target: float, rel: float = 0.0, k: float = 3.0) -> bool:
        """True when ``|value - target| <= rel*|target| + k*stderr``."""
        return abs(self.value - target) <= rel * abs(target) + k * self.stderr

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExponentFit:
    """Power-law fit ``p ~ r^xi`` by weighted least squares on log scales."""

    xi: float
    ci: tuple[float, float]
    radii: list[float]
    p_hat: list[Estimate]
    epsilon_trend: dict = field(default_factory=dict)
    excluded: list[float] = field(default_factory=list)
    intercept: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "xi": self.xi,
            "ci": list(self.ci),
            "intercept": self.intercept,
            "radii": list(self.radii),
            "p_hat": [e.to_dict() for e in self.p_hat],
            "epsilon_trend": self.epsilon_trend,
            "excluded": list(self.excluded),
        }


def fit_power_law(x, est: list[Estimate]) -> tuple[float, float, float]:
    """Slope, slope stderr and intercept of ``log p`` against ``log x``.

    Weights are ``1/var(log p)`` with ``var(log p) ~ (stderr/p)^2``.
    """
    x = np.asarray(x, dtype=float)
    p = np.array([e.value for e in est])
    se = np.array([e.stderr for e in est])
    if len(x) < 2 or np.any(p <= 0):
        return float("nan"), float("nan"), float("nan")
    y = np.log(p)
    var = np.maximum((se / p) ** 2, 1e-12)
    w = 1.0 / var
    X = np.column_stack([np.ones_like(x), np.log(x)])
    A = X.T @ (w[:, None] * X)
    cov = np.linalg.inv(A)
    beta = cov @ (X.T @ (w * y))
    return float(beta[1]), float(math.sqrt(cov[1, 1])), float(beta[0])
