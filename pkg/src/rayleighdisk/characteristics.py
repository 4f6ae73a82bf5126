"""Particle characteristics under the external field.

Integrates dx/ds = v, dv/ds = G(s, x) forward or backward with an embedded
Dormand-Prince 4(5) pair sharing adaptive steps across a whole batch of
trajectories.  Because G is separated, the horizontal pair (x1, v1) and the
transverse pair (xperp, vperp) are integrated independently; whichever block
of the field vanishes identically is advanced as an exact straight line.

The no-boundary pullback f_NB(t, x, v) = f0(v_check(0)) and the perturbation
h = f_NB - f0 live here.  eval_h is computed as pullback-minus-f0 (one
backward solve); eval_h_duhamel integrates the source along the trajectory
instead and exists as an independent cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._quad import gl_rule
from .fields import eval_density_and_gradient, eval_force

# Dormand-Prince 4(5) tableau (FSAL: last stage of an accepted step is the
# first stage of the next).
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200,
                187 / 2100, 1 / 40])
_ERR = _B5 - _B4

_MAX_STEPS = 500_000


class FlowError(RuntimeError):
    """Step-size underflow; carries the last good state."""

    def __init__(self, message, t, y):
        super().__init__(message)
        self.t = t
        self.y = y


@dataclass(frozen=True)
class PhasePoint:
    t: float
    x: np.ndarray
    v: np.ndarray


def hermite_eval(s0, y0, f0, s1, y1, f1, s):
    """Cubic Hermite value at s given states and slopes at the step ends."""
    h = s1 - s0
    th = (s - s0) / h
    th2 = th * th
    th3 = th2 * th
    return ((2 * th3 - 3 * th2 + 1) * y0 + (th3 - 2 * th2 + th) * h * f0
            + (-2 * th3 + 3 * th2) * y1 + (th3 - th2) * h * f1)


def _dp45_batch(rhs, t0, y0, t1, tol=1e-9, max_step=None, record=False):
    """Advance the batch y0 (shape (..., d)) from t0 to t1 with shared steps.

    The error test is per unit time (local error <= tol * |h| * (1 + |y|)),
    so the accumulated error over the whole span stays near tol * span
    instead of tol * steps.  It is taken as the max over every component of
    every batch row, so one trajectory near a steep region tightens the step
    for all -- acceptable here because batches share a field and similar
    speeds.  Returns (y_final, history); history is a list of (s, y, f) at
    accepted nodes (endpoints included) when record=True, else None.
    """
    y = np.array(y0, dtype=float)
    span = t1 - t0
    if span == 0.0:
        return y, ([(t0, y.copy(), rhs(t0, y))] if record else None)
    direction = 1.0 if span > 0 else -1.0

    def cap(s):
        if max_step is None:
            return abs(span)
        return max_step(s) if callable(max_step) else max_step

    s = t0
    f = rhs(s, y)
    h = direction * min(abs(span), 0.1, cap(s))
    history = [(s, y.copy(), f.copy())] if record else None
    k = np.empty((7,) + y.shape)
    tiny = 8.0 * np.finfo(float).eps
    for _ in range(_MAX_STEPS):
        if (s + h - t1) * direction > 0.0:
            h = t1 - s
        floor = tiny * max(abs(s), abs(t1), 1.0)
        if abs(h) <= floor:
            if abs(t1 - s) <= floor:  # arrived within roundoff of the endpoint
                return y, history
            raise FlowError("step size underflow in characteristic solve", s, y)
        k[0] = f
        for i in range(1, 7):
            yi = y + h * np.tensordot(_A[i], k[:i], axes=(0, 0))
            k[i] = rhs(s + _C[i] * h, yi)
        y_new = y + h * np.tensordot(_B5, k, axes=(0, 0))
        err_vec = h * np.tensordot(_ERR, k, axes=(0, 0))
        scale = 1.0 + np.maximum(np.abs(y), np.abs(y_new))
        err = float(np.max(np.abs(err_vec) / scale))
        tol_h = 0.5 * tol * abs(h)  # 0.5: headroom for round-trip error sums
        if err <= tol_h:
            s_new = s + h
            f_new = k[6]  # FSAL: stage 7 is rhs(s_new, y_new)
            if record:
                history.append((s_new, y_new.copy(), f_new.copy()))
            s, y, f = s_new, y_new, f_new
            if (s - t1) * direction >= 0.0:
                return y, history
            # local error ~ h^5, so the per-unit-time optimum scales as 1/4 power
            grow = 5.0 if err == 0.0 else min(5.0, 0.9 * (tol_h / err) ** 0.25)
            h = direction * min(abs(h) * grow, cap(s), abs(t1 - s))
        else:
            h *= max(0.2, 0.9 * (tol_h / err) ** 0.25)
    raise FlowError("characteristic solve exceeded the step budget", s, y)


def decay_cap(s):
    """Step cap for fields that vary on the <s> time scale.

    Keeps the relative change of a <s>^(-q) factor bounded per step so the
    controller cannot leap over the active region near s=0 (whose width the
    embedded error estimate cannot see from samples taken far away).
    """
    return 0.2 * (1.0 + abs(s))


def _horizontal_rhs(field):
    def rhs(s, y):
        out = np.empty_like(y)
        out[..., 0] = y[..., 1]
        out[..., 1] = field.g1(s, y[..., 0])
        return out
    return rhs


def _transverse_rhs(field):
    def rhs(s, y):
        out = np.empty_like(y)
        out[..., 0:2] = y[..., 2:4]
        out[..., 2:4] = field.gperp(s, y[..., 0:2])
        return out
    return rhs


def flow(field, from_t, x, v, to_r, tol: float = 1e-9):
    """State at time to_r of the characteristic through (x, v) at from_t."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    dt = to_r - from_t
    x_out = np.empty(3)
    v_out = np.empty(3)

    if getattr(field, "c_G", None) == 0.0:
        x_out[0] = x[0] + v[0] * dt
        v_out[0] = v[0]
    else:
        y, _ = _dp45_batch(_horizontal_rhs(field), from_t,
                           np.array([x[0], v[0]]), to_r, tol=tol,
                           max_step=decay_cap)
        x_out[0], v_out[0] = y

    if getattr(field, "gperp_zero", False) or getattr(field, "gperp_amp", None) == 0.0:
        x_out[1:] = x[1:] + v[1:] * dt
        v_out[1:] = v[1:]
    else:
        y, _ = _dp45_batch(_transverse_rhs(field), from_t,
                           np.concatenate([x[1:], v[1:]]), to_r, tol=tol,
                           max_step=decay_cap)
        x_out[1:], v_out[1:] = y[:2], y[2:]
    return x_out, v_out


def pullback_density_fNB(field, f0, t, x, v, tol: float = 1e-9) -> float:
    """No-boundary solution f0(v_check(0; t, x, v)); the body is ignored."""
    if t == 0.0:
        val, _ = eval_density_and_gradient(f0, np.asarray(v, dtype=float))
        return float(val)
    _, v0 = flow(field, t, x, v, 0.0, tol=tol)
    val, _ = eval_density_and_gradient(f0, v0)
    return float(val)


def eval_h(field, f0, t, x, v, tol: float = 1e-9) -> float:
    """Perturbation h = f_NB - f0 at a phase point."""
    if t == 0.0 or getattr(field, "is_zero", False):
        return 0.0
    v = np.asarray(v, dtype=float)
    val, _ = eval_density_and_gradient(f0, v)
    return pullback_density_fNB(field, f0, t, x, v, tol=tol) - float(val)


def eval_h_duhamel(field, f0, t, x, v, panels: int = 8, order: int = 16,
                   tol: float = 1e-11) -> float:
    """Line integral of the source along the characteristic (cross-check).

    h(t, x, v) = integral_0^t J(s, x_check(s), v_check(s)) ds, evaluated by
    Gauss-Legendre panels with a fresh backward solve per node, so it shares
    no quadrature structure with the pullback route.
    """
    from .fields import source_J

    if t == 0.0:
        return 0.0
    nodes, wts = gl_rule(order)
    edges = np.linspace(0.0, t, panels + 1)
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        for z, w in zip(nodes, wts):
            s = mid + half * z
            xs, vs = flow(field, t, x, v, s, tol=tol)
            total += half * w * source_J(field, f0, s, xs, vs)
    return total


def h_weighted_sup(field, f0, t_probe=(0.5, 2.0, 10.0), n: int = 7) -> float:
    """Measured C_h with |h| <= c_G * C_h / (<v1>^(l1+1) <vperp>^(l2+1))."""
    c = getattr(field, "c_G", 0.0)
    if c == 0.0:
        return 0.0
    v1g = np.linspace(-4.0, 4.0, n)
    vpg = np.linspace(-3.0, 3.0, n)
    worst = 0.0
    for t in t_probe:
        for v1 in v1g:
            for vp in vpg:
                h = eval_h(field, f0, t, np.zeros(3), np.array([v1, vp, 0.0]))
                w = ((1.0 + v1 * v1) ** ((f0.l1 + 1.0) / 2.0)
                     * (1.0 + vp * vp) ** ((f0.l2 + 1.0) / 2.0))
                worst = max(worst, abs(h) * w / c)
    return worst
