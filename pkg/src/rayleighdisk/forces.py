"""Drag force integrals on the disk and the equilibrium velocity.

All horizontal force integrals are evaluated in the half-line substitution
form: with w = |v1 - V| >= 0 the signed momentum flux collapses to

    F(V; a) = pi R^2 * integral_0^infty L(w) [a(V - w) - a(V + w)] dw,

which is manifestly odd in V for even a and free of the interior sign
cancellation of the two-sided form.  F00 uses the initial marginal a0; F0
uses the no-boundary pullback a_NB(t, u) = a0(v_check(0; t, X(t), u)); H is
integrated as the single difference (a0 - a_NB) so that c_G = 0 gives an
exact zero instead of a difference of two quadratures.

Sign convention: F is a drag, the body obeys dV/dt = E - F(t), and F00 is
increasing and odd with F00(V) > 0 for V > 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from ._quad import adaptive_panels, geometric_edges
from .characteristics import FlowError, _dp45_batch, _horizontal_rhs, decay_cap
from .kernels import momentum_flux_L


@dataclass(frozen=True)
class ForceBreakdown:
    t: float
    F00: float
    F0: float
    H: float
    RW: float
    F_total: float


def assemble_breakdown(t, f00, h, rw) -> ForceBreakdown:
    """Build the slice with F0 := F00 - H so the identity holds bitwise."""
    f0 = f00 - h
    return ForceBreakdown(t=float(t), F00=float(f00), F0=float(f0),
                          H=float(h), RW=float(rw), F_total=float(f0 + rw))


def _w_cutoff(cfg, center: float) -> float:
    """Offset beyond which the integrand tail is below 1e-14 relative."""
    d = cfg.density
    if d.family == "gaussian":
        return abs(center) + 16.0
    p = cfg.kernel.p
    return abs(center) + max(50.0, ((d.l1 - p) * 1e-14) ** (-1.0 / (d.l1 - p)))


def _edges(cfg, center: float):
    return geometric_edges(1e-4, _w_cutoff(cfg, center), ratio=2.0)


def F00(cfg, V: float) -> float:
    """Drag at constant velocity V against the unperturbed gas."""
    k, d = cfg.kernel, cfg.density
    V = float(V)

    def integrand(w):
        L, _ = momentum_flux_L(k, w)
        return L * (d.a0(V - w) - d.a0(V + w))

    val = adaptive_panels(integrand, _edges(cfg, V), rel_tol=1e-9,
                          abs_floor=1e-16)
    return cfg.disk_area * val


def f00_derivative(cfg, V: float, step: float | None = None,
                   gamma: float = 0.0) -> float:
    """Centered-difference F00'(V) with the scale-aware default step."""
    if step is None:
        step = 1e-4 * max(gamma, 1e-3)
    return (F00(cfg, V + step) - F00(cfg, V - step)) / (2.0 * step)


def f00_derivative_analytic(cfg, V: float) -> float:
    """F00'(V) by differentiation under the integral (test cross-check)."""
    k, d = cfg.kernel, cfg.density
    V = float(V)

    def integrand(w):
        L, _ = momentum_flux_L(k, w)
        return L * (d.da0(V - w) - d.da0(V + w))

    val = adaptive_panels(integrand, _edges(cfg, V), rel_tol=1e-9,
                          abs_floor=1e-16)
    return cfg.disk_area * val


def equilibrium_velocity(cfg, E: float):
    """Root V_inf of F00(V) = E and the local rate b0 = min F00' near it.

    Bisection on the strictly increasing F00, bracket doubling from [-1, 1]
    up to |V| = 1e6; then b0 as the minimum centered-difference derivative
    over a 41-point grid spanning [V_inf - 3 gamma, V_inf + 3 gamma].
    """
    E = float(E)
    lo, hi = -1.0, 1.0
    flo, fhi = F00(cfg, lo), F00(cfg, hi)
    while flo > E:
        lo *= 2.0
        if lo < -1e6:
            raise ValueError(f"E={E} below attainable drag range "
                             f"[{flo}, {fhi}] at |V|=1e6")
        flo = F00(cfg, lo)
    while fhi < E:
        hi *= 2.0
        if hi > 1e6:
            raise ValueError(f"E={E} above attainable drag range "
                             f"[{flo}, {fhi}] at |V|=1e6")
        fhi = F00(cfg, hi)

    tol = 1e-12 * max(abs(E), 1.0)
    v_inf = 0.5 * (lo + hi)
    for _ in range(200):
        f = F00(cfg, v_inf)
        if abs(f - E) <= tol:
            break
        if f < E:
            lo = v_inf
        else:
            hi = v_inf
        v_inf = 0.5 * (lo + hi)
    else:
        raise RuntimeError(f"equilibrium bisection stalled: |F00-E|="
                           f"{abs(F00(cfg, v_inf) - E):.3e} > {tol:.3e}")

    gamma = abs(cfg.V0 - v_inf)
    step = 1e-4 * max(gamma, 1e-3)
    grid = np.linspace(v_inf - 3.0 * gamma, v_inf + 3.0 * gamma, 41)
    b0 = min((F00(cfg, v + step) - F00(cfg, v - step)) / (2.0 * step)
             for v in grid)
    if b0 <= 0.0:
        raise RuntimeError(f"local relaxation rate b0={b0} is not positive "
                           f"on [{grid[0]}, {grid[-1]}]")
    return v_inf, float(b0)


def _pullback_marginal(cfg, t: float, x1: float, tol: float):
    """Batched a_NB(t, u) evaluator: one shared backward solve per call."""
    force, d = cfg.force, cfg.density

    def a_nb(u):
        y0 = np.stack([np.full_like(u, x1), u], axis=-1)
        try:
            y, _ = _dp45_batch(_horizontal_rhs(force), t, y0, 0.0, tol=tol,
                               max_step=decay_cap)
        except FlowError as e:
            raise RuntimeError(
                f"backward characteristic failed in force integral at "
                f"t={t} (reached s={e.t})") from e
        return d.a0(y[..., 1])

    return a_nb


def F0(cfg, path, t: float, tol: float = 1e-12) -> float:
    """Drag from the no-boundary density along the body path at time t."""
    W = float(path.W(t))
    if cfg.force.c_G == 0.0:
        return F00(cfg, W)
    k = cfg.kernel
    a_nb = _pullback_marginal(cfg, t, float(path.X(t)), tol)

    def integrand(w):
        L, _ = momentum_flux_L(k, w)
        a = a_nb(np.concatenate([W - w, W + w]))
        n = w.size
        return L * (a[:n] - a[n:])

    # abs_floor sets the scale below which 1e-9-relative becomes absolute:
    # late-time drags sit near the a0-evaluation noise floor ~1e-15
    val = adaptive_panels(integrand, _edges(cfg, W), rel_tol=1e-9,
                          abs_floor=1e-5)
    return cfg.disk_area * val


def H_difference(cfg, path, t: float, tol: float = 1e-12) -> float:
    """H(t) = F00(W(t)) - F0(path, t), integrated as one difference."""
    if cfg.force.c_G == 0.0 or t == 0.0:
        return 0.0
    W = float(path.W(t))
    k, d = cfg.kernel, cfg.density
    a_nb = _pullback_marginal(cfg, t, float(path.X(t)), tol)

    def integrand(w):
        L, _ = momentum_flux_L(k, w)
        u = np.concatenate([W - w, W + w])
        delta = d.a0(u) - a_nb(u)
        n = w.size
        return L * (delta[:n] - delta[n:])

    val = adaptive_panels(integrand, _edges(cfg, W), rel_tol=1e-9,
                          abs_floor=1e-5)
    return cfg.disk_area * val


def f00_interpolant(cfg, lo: float, hi: float, n: int = 2001):
    """Cubic-spline surrogate for F00 on [lo, hi] for the hot ODE loops.

    The fixed-point solvers evaluate F00 at every stage of every step; the
    spline keeps that O(1) while the quadrature stays the ground truth.
    """
    if not hi > lo:
        raise ValueError("empty interpolation interval")
    grid = np.linspace(lo, hi, n)
    vals = np.array([F00(cfg, v) for v in grid])
    spline = CubicSpline(grid, vals)

    def f(v):
        v = np.asarray(v, dtype=float)
        if np.any(v < lo) or np.any(v > hi):
            raise ValueError("F00 surrogate evaluated outside its interval")
        out = spline(v)
        return float(out) if out.ndim == 0 else out

    return f
