"""Heat kernel, Green's functions and Poisson kernels of spherical domains.

Everything here is a pure function of its arguments.  Points are numpy arrays
whose last axis holds the coordinates, so the dimension ``d`` is read off the
input.  Formulas are valid for every ``d >= 3``; the sphere quadrature is
specific to ``d = 3``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special


class DomainError(ValueError):
    """An argument lies outside the domain of a kernel."""


@dataclass(frozen=True)
class SphericalDomain:
    """Whole space, a ball, the complement of a ball, or a spherical shell."""

    kind: str
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0
    r_in: float = 0.0
    r_out: float = 0.0

    def __post_init__(self):
        if self.kind not in ("whole", "ball", "complement", "shell"):
            raise DomainError(f"unknown domain kind {self.kind!r}")
        if self.kind in ("ball", "complement") and not self.radius > 0:
            raise DomainError("radius must be positive")
        if self.kind == "shell" and not 0 < self.r_in < self.r_out:
            raise DomainError("shell needs 0 < r_in < r_out")

    @classmethod
    def ball(cls, radius=1.0, center=(0.0, 0.0, 0.0)):
        return cls("ball", tuple(center), float(radius))

    @classmethod
    def complement(cls, radius=1.0, center=(0.0, 0.0, 0.0)):
        return cls("complement", tuple(center), float(radius))

    @classmethod
    def shell(cls, r_in, r_out, center=(0.0, 0.0, 0.0)):
        return cls("shell", tuple(center), r_in=float(r_in), r_out=float(r_out))

    @property
    def dim(self) -> int:
        return len(self.center)

    def contains(self, points) -> np.ndarray:
        """Membership test for the open domain, vectorized over points."""
        p = np.asarray(points, dtype=float)
        rho = np.linalg.norm(p - np.asarray(self.center), axis=-1)
        if self.kind == "whole":
            return np.ones(rho.shape, dtype=bool)
        if self.kind == "ball":
            return rho < self.radius
        if self.kind == "complement":
            return rho > self.radius
        return (rho > self.r_in) & (rho < self.r_out)


def sphere_area(d: int, radius: float = 1.0) -> float:
    """Surface measure of the sphere of given radius in R^d."""
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2) * radius ** (d - 1)


def green_constant(d: int) -> float:
    return math.gamma(d / 2 - 1) / (2.0 * math.pi ** (d / 2))


def poisson_constant(d: int) -> float:
    return math.gamma(d / 2) / (2.0 * math.pi ** (d / 2))


def _check_dim(d):
    if d < 3:
        raise DomainError(f"dimension must be >= 3, got {d}")


def heat_kernel(t, x, y):
    """Transition density of Brownian motion with generator Laplacian/2."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise DomainError("heat kernel needs t > 0")
    d = x.shape[-1]
    r2 = np.sum((x - y) ** 2, axis=-1)
    return (2.0 * np.pi * t) ** (-d / 2) * np.exp(-r2 / (2.0 * t))


def green_whole(x, y):
    """Whole-space Green's function; coincident points give ``inf``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d = x.shape[-1]
    _check_dim(d)
    r = np.linalg.norm(x - y, axis=-1)
    with np.errstate(divide="ignore"):
        out = green_constant(d) * r ** (2.0 - d)
    return out if np.ndim(out) else float(out)


def green_ball(x, y):
    """Green's function of the unit ball centred at the origin.

    Uses the image-point formula; the centre ``x = 0`` is handled by the
    continuous limit ``c_d (|y|^{2-d} - 1)``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d = x.shape[-1]
    _check_dim(d)
    nx = np.linalg.norm(x, axis=-1)
    ny = np.linalg.norm(y, axis=-1)
    if np.any(nx > 1.0) or np.any(ny > 1.0):
        raise DomainError("green_ball needs points in the closed unit ball")
    c = green_constant(d)
    nx_b, ny_b = np.broadcast_arrays(nx, ny)
    xb, yb = np.broadcast_arrays(x, y)
    dist = np.linalg.norm(xb - yb, axis=-1)
    safe = np.where(nx_b > 0, nx_b, 1.0)[..., None]
    image = np.linalg.norm(xb / safe - safe * yb, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        direct = c * dist ** (2.0 - d)
        regular = np.where(nx_b > 0, c * image ** (2.0 - d), c)
        out = np.where(dist == 0, np.inf, direct - regular)
    # on the boundary sphere the two terms cancel exactly
    out = np.where((nx_b == 1.0) | (ny_b == 1.0), np.where(dist == 0, np.inf, 0.0), out)
    return out if np.ndim(out) else float(out)


def poisson_kernel_ball(x, omega, radius=1.0, exterior=False):
    """Exit density on ``radius * S^{d-1}`` from ``x``, for the ball or its complement.

    The density is with respect to surface measure on the sphere of the given
    radius, so integrating it over that sphere returns the hitting probability.
    """
    x = np.asarray(x, dtype=float) / radius
    w = np.asarray(omega, dtype=float) / radius
    d = x.shape[-1]
    _check_dim(d)
    nx2 = np.sum(x * x, axis=-1)
    if np.any(nx2 == 1.0):
        raise DomainError("x lies on the boundary; use boundary_poisson_kernel")
    if (not exterior and np.any(nx2 > 1.0)) or (exterior and np.any(nx2 < 1.0)):
        raise DomainError("x is not in the domain")
    dist = np.linalg.norm(x - w, axis=-1)
    out = poisson_constant(d) * np.abs(1.0 - nx2) / dist**d / radius ** (d - 1)
    return out if np.ndim(out) else float(out)


def _zonal(l_max, cos_gamma, d):
    """Zonal harmonics Z_l(cos gamma) / |S^{d-1}| for l = 0..l_max, shape (L, ...)."""
    ls = np.arange(l_max + 1).reshape((-1,) + (1,) * np.ndim(cos_gamma))
    if d == 3:
        poly = special.eval_legendre(ls, cos_gamma)
        weight = 2 * ls + 1
    else:
        lam = (d - 2) / 2
        poly = special.eval_gegenbauer(ls, lam, cos_gamma)
        weight = (2 * ls + d - 2) / (d - 2)
    return weight * poly / sphere_area(d)


def _series_length(ratio, tol=1e-16, cap=4000):
    if ratio <= 0:
        return 1
    n = int(math.ceil((math.log(tol) - 2 * math.log(cap)) / math.log(ratio))) if ratio < 1 else cap
    return max(2, min(n, cap))


def _cos_angle(x, w):
    nx = np.linalg.norm(x, axis=-1)
    nw = np.linalg.norm(w, axis=-1)
    safe = np.where(nx > 0, nx, 1.0) * nw
    return np.clip(np.sum(x * w, axis=-1) / safe, -1.0, 1.0), nx, nw


def poisson_kernel_shell(x, omega, r_in, r_out):
    """Exit density of the shell ``r_in < |z| < r_out`` on either boundary sphere.

    Evaluated by its zonal-harmonic expansion; the sphere carrying ``omega`` is
    read off ``|omega|``.
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(omega, dtype=float)
    d = x.shape[-1]
    _check_dim(d)
    cg, rho, nw = _cos_angle(x, w)
    if np.any(rho <= r_in) or np.any(rho >= r_out):
        raise DomainError("x must lie strictly inside the shell")
    on_outer = np.isclose(nw, r_out)
    if not np.all(on_outer | np.isclose(nw, r_in)):
        raise DomainError("omega must lie on a boundary sphere")
    worst = max(float(np.max(r_in / rho)), float(np.max(rho / r_out)))
    L = _series_length(worst)
    ls = np.arange(L + 1).reshape((-1,) + (1,) * np.ndim(cg))
    zon = _zonal(L, cg, d)
    k = 2 * ls + d - 2
    a, b = r_in, r_out
    # scaled so that no power overflows: divide through by the leading term
    outer = ((rho / b) ** ls - (a / b) ** ls * (a / rho) ** (ls + d - 2)) / (1.0 - (a / b) ** k)
    inner = ((a / rho) ** (ls + d - 2) - (a / b) ** (ls + d - 2) * (rho / b) ** ls) / (1.0 - (a / b) ** k)
    radial = np.where(on_outer, outer / b ** (d - 1), inner / a ** (d - 1))
    out = np.sum(zon * radial, axis=0)
    return out if np.ndim(out) else float(out)


def poisson_kernel(domain: SphericalDomain, x, omega):
    """Poisson kernel of a spherical domain, density against surface measure."""
    c = np.asarray(domain.center, dtype=float)
    x = np.asarray(x, dtype=float) - c
    w = np.asarray(omega, dtype=float) - c
    if domain.kind == "ball":
        return poisson_kernel_ball(x, w, domain.radius)
    if domain.kind == "complement":
        return poisson_kernel_ball(x, w, domain.radius, exterior=True)
    if domain.kind == "shell":
        return poisson_kernel_shell(x, w, domain.r_in, domain.r_out)
    raise DomainError("whole space has no boundary")


def boundary_poisson_kernel(domain: SphericalDomain, x, y):
    """Boundary-to-boundary kernel: normal derivative of the Poisson kernel at ``x``.

    Only used inside proofs; exposed for spheres and shells for completeness.
    """
    c = np.asarray(domain.center, dtype=float)
    x = np.asarray(x, dtype=float) - c
    y = np.asarray(y, dtype=float) - c
    d = x.shape[-1]
    _check_dim(d)
    if domain.kind in ("ball", "complement"):
        R = domain.radius
        dist = np.linalg.norm(x - y, axis=-1)
        with np.errstate(divide="ignore"):
            out = 2.0 * poisson_constant(d) / R * (dist / R) ** (-d) / R ** (d - 1)
        return out if np.ndim(out) else float(out)
    if domain.kind != "shell":
        raise DomainError("whole space has no boundary")
    a, b = domain.r_in, domain.r_out
    cg, nx, ny = _cos_angle(x, y)
    L = _series_length(a / b)
    ls = np.arange(L + 1).reshape((-1,) + (1,) * np.ndim(cg))
    zon = _zonal(L, cg, d)
    k = 2 * ls + d - 2
    q = (a / b) ** ls
    den = 1.0 - (a / b) ** k
    x_inner = np.isclose(nx, a)
    y_outer = np.isclose(ny, b)
    if np.any(x_inner != y_outer):
        raise DomainError("x and y must lie on opposite boundary spheres")
    # inner -> outer: k a^{l-1} / (b^l (1 - (a/b)^k)) / b^{d-1}
    in_out = k * q / a / den / b ** (d - 1)
    # outer -> inner: k b^{l-1} / (b^k a^{2-d-l} (1 - (a/b)^k)) / a^{d-1}
    out_in = k * q * (a / b) ** (d - 2) / b / den / a ** (d - 1)
    out = np.sum(zon * np.where(x_inner, in_out, out_in), axis=0)
    return out if np.ndim(out) else float(out)


def shell_escape_mass(r, R, d=3):
    """Integral over ``R S^{d-1}`` of the shell boundary kernel from ``r S^{d-1}``."""
    _check_dim(d)
    if not 0 < r < R:
        raise DomainError("need 0 < r < R")
    return (d - 2) * r ** (1 - d) / (r ** (2 - d) - R ** (2 - d))


def hitting_probability_sphere(rho, r, d=3):
    """Probability that Brownian motion from radius ``rho > r`` ever hits ``r S^{d-1}``."""
    return min(1.0, (r / rho) ** (d - 2))


def crossing_mass(r, n=None, d=3, tol=1e-16):
    """Loop measure of loops crossing the shell ``B(1) \\ B(r)``.

    The n-crossing mass is ``(1/n) Tr(K^n)`` where ``K`` is the round trip
    ``r S -> S -> r S`` of harmonic extensions.  On degree-l spherical
    harmonics ``K`` acts as multiplication by ``r^{2l+d-2}``, so
    ``mass_n = (1/n) sum_l N(d, l) r^{n(2l+d-2)}``.  With ``n=None`` the sum
    over all n is returned, ``-sum_l N(d, l) log(1 - r^{2l+d-2})``.
    """
    _check_dim(d)
    if not 0 < r < 1:
        raise DomainError("need 0 < r < 1")
    if n is not None and n < 1:
        raise DomainError("crossing multiplicity must be positive")
    # terms decay like l^(d-2) r^(2l); stop once they are below tol relative to the first
    k = 1 if n is None else n
    L = int(min(10**6, max(8, math.ceil((math.log(tol) - (d - 2) * math.log(1e4)) / (2 * k * math.log(r))))))
    l = np.arange(L + 1, dtype=float)
    mult = special.comb(l + d - 1, d - 1) - np.where(l >= 2, special.comb(l + d - 3, d - 1), 0.0)
    q = r ** (2 * l + d - 2)
    terms = mult * (q**n / n if n is not None else -np.log1p(-q))
    return math.fsum(terms.tolist())


def sphere_nodes(n_theta: int, radius=1.0, center=(0.0, 0.0, 0.0)):
    """Product Gauss-Legendre (polar) x trapezoid (azimuth) nodes on a sphere in R^3.

    Returns ``(points, weights)``; the weights integrate against surface measure.
    """
    u, wu = np.polynomial.legendre.leggauss(n_theta)
    n_phi = 2 * n_theta
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    cu, cp = np.meshgrid(u, phi, indexing="ij")
    s = np.sqrt(1.0 - cu**2)
    pts = np.stack([s * np.cos(cp), s * np.sin(cp), cu], axis=-1).reshape(-1, 3)
    w = np.repeat(wu, n_phi) * (2.0 * np.pi / n_phi) * radius**2
    return radius * pts + np.asarray(center, dtype=float), w


def sphere_quadrature(
    f: Callable[[np.ndarray], np.ndarray],
    radius=1.0,
    center=(0.0, 0.0, 0.0),
    order: int | None = None,
    tol=1e-8,
    max_order=1024,
):
    """Integrate ``f`` over a sphere in R^3 against surface measure.

    With ``order=None`` the polar order doubles from 16 until two successive
    results agree to ``tol``.
    """
    if order is not None:
        pts, w = sphere_nodes(order, radius, center)
        return float(np.dot(w, f(pts)))
    n = 16
    pts, w = sphere_nodes(n, radius, center)
    prev = float(np.dot(w, f(pts)))
    while n < max_order:
        n *= 2
        pts, w = sphere_nodes(n, radius, center)
        cur = float(np.dot(w, f(pts)))
        if abs(cur - prev) <= tol * max(1.0, abs(cur)):
            return cur
        prev = cur
    raise RuntimeError("sphere quadrature did not converge")


def lemma_integrals(r, R, direction=(0.0, 0.0, 1.0)):
    """The three sphere integrals of the Poisson kernel for the pair ``r < R`` (d=3).

    Returns ``(computed, expected)`` triples of floats: interior exit mass,
    exterior hitting mass and shell escape mass.
    """
    u = np.asarray(direction, dtype=float)
    u = u / np.linalg.norm(u)
    y_in = r * u
    x_out = R * u
    ball = SphericalDomain.ball(R)
    comp = SphericalDomain.complement(r)
    shell = SphericalDomain.shell(r, R)
    got = (
        sphere_quadrature(lambda w: poisson_kernel(ball, y_in, w), radius=R),
        sphere_quadrature(lambda w: poisson_kernel(comp, x_out, w), radius=r),
        sphere_quadrature(lambda w: boundary_poisson_kernel(shell, y_in, w), radius=R),
    )
    want = (1.0, r / R, shell_escape_mass(r, R, 3))
    return got, want
