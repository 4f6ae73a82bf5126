import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rayleighdisk import (eval_kernel, find_precollision, flow,
                          march_boundary_density, momentum_flux_L,
                          recollision_force_RW)
from rayleighdisk.boundary import BodyPath, BoundaryDensity, constant_path
from rayleighdisk.characteristics import _dp45_batch, _horizontal_rhs
from rayleighdisk._quad import geometric_edges, panel_nodes
from rayleighdisk import make_force

from conftest import build_config, exp_path


# ---------------------------------------------------------------------------
# body paths


def test_path_trapezoid_consistency():
    ts = np.linspace(0.0, 4.0, 41)
    W = 0.3 * np.sin(ts)
    path = BodyPath(ts, W)
    assert path.X(0.0) == 0.0
    for i in (5, 17, 36):
        inc = path.Xv[i] - path.Xv[i - 1]
        assert inc == pytest.approx(0.5 * (W[i] + W[i - 1]) * path.dt,
                                    rel=1e-12, abs=1e-15)


def test_path_rejects_non_uniform_grid():
    with pytest.raises(ValueError):
        BodyPath(np.array([0.0, 1.0, 3.0]), np.zeros(3))


def test_path_extrema_query():
    ts = np.linspace(0.0, 6.0, 61)
    path = BodyPath(ts, 0.3 * np.sin(ts))
    lo, hi = path.w_extrema_to(2.0)
    assert lo == pytest.approx(0.0, abs=1e-12)       # W(0) = 0
    assert hi == pytest.approx(0.3 * np.sin(ts[ts <= 2.0]).max(), rel=1e-12)


@given(t=st.floats(0.0, 4.0))
@settings(max_examples=80, deadline=None)
def test_path_interpolation_stays_bracketed(t):
    ts = np.linspace(0.0, 4.0, 17)
    W = np.cos(3.0 * ts)
    path = BodyPath(ts, W)
    i = min(int(t / path.dt), 15)
    lo = min(W[i], W[i + 1]) - 1e-12
    hi = max(W[i], W[i + 1]) + 1e-12
    assert lo <= path.W(t) <= hi


def test_constant_path():
    path = constant_path(0.5, 2.0)
    assert np.all(path.Wv == 0.5)
    assert path.X(2.0) == pytest.approx(1.0, rel=1e-14)


# ---------------------------------------------------------------------------
# precollision detection


def test_precollision_resting_body():
    f = make_force(0.0, 3.5, 2.5)
    path = constant_path(0.0, 3.0)
    hit = find_precollision(f, path, 2.0, -1.0, -1.0)
    assert hit is not None
    tau, v_tau = hit
    assert tau == pytest.approx(1.0, abs=1e-9)
    assert v_tau == pytest.approx(-1.0, abs=1e-12)


def test_precollision_none_when_pointing_away():
    f = make_force(0.0, 3.5, 2.5)
    path = constant_path(0.0, 3.0)
    assert find_precollision(f, path, 2.0, 5.0, 1.0) is None


def test_precollision_moving_body_closed_form():
    # x(s) = 2 + 2(s-2) meets X(s) = s/2 at s = 4/3
    f = make_force(0.0, 3.5, 2.5)
    path = constant_path(0.5, 3.0)
    hit = find_precollision(f, path, 2.0, 2.0, 2.0)
    assert hit is not None
    tau, v_tau = hit
    assert tau == pytest.approx(4.0 / 3.0, abs=1e-9)
    assert v_tau == pytest.approx(2.0, abs=1e-12)


class _ConstantPush:
    def __init__(self, g):
        self.c_G = float(g)
        self.gperp_zero = True
        self.is_zero = False
        self._g = float(g)

    def g1(self, t, x1):
        return np.full(np.shape(x1), self._g) if np.ndim(x1) else self._g


def test_precollision_constant_field_quadratic_root():
    # backward parabola -1.5 - s' + 0.025 s'^2 (s' = s - 3) has its root in
    # (0, 3) at s = 3 + (1 - sqrt(1.15))/0.05
    field = _ConstantPush(0.05)
    path = constant_path(0.0, 4.0)
    hit = find_precollision(field, path, 3.0, -1.5, -1.0)
    assert hit is not None
    tau, _ = hit
    want = 3.0 + (1.0 - np.sqrt(1.15)) / 0.05
    assert tau == pytest.approx(want, abs=1e-9)


# ---------------------------------------------------------------------------
# the boundary-density march


@pytest.fixture(scope="module")
def ref_cfg_m():
    return build_config()


@pytest.fixture(scope="module")
def march_coarse(ref_cfg_m):
    """Reference forcing on the exponential trial path, t <= 50."""
    path = exp_path(50.0, dt=0.1)
    return path, march_boundary_density(ref_cfg_m, path, depth_k=4)


def test_march_flux_balance(march_coarse):
    _, bd = march_coarse
    assert np.max(bd.flux_residual) <= 1e-6


def test_march_outgoing_density_nonnegative(march_coarse):
    _, bd = march_coarse
    assert np.min(bd.a_plus) >= 0.0


def test_march_rw_zero_at_start_and_depth_zero(march_coarse):
    _, bd = march_coarse
    assert np.all(bd.rw_ladder[:, 0] == 0.0)     # no history at t0
    assert np.all(bd.rw_ladder[0] == 0.0)        # truncation at depth 0


def test_march_depth_rungs_shrink_geometrically(march_coarse):
    _, bd = march_coarse
    sups = [np.max(np.abs(bd.rw_ladder[k + 1] - bd.rw_ladder[k]))
            for k in range(bd.depth_k)]
    assert sups[0] > 0.0
    for a, b in zip(sups, sups[1:]):
        assert b < 0.5 * a


def test_march_crossing_window_inside_velocity_support(march_coarse):
    path, bd = march_coarse
    live = bd.win_wts.sum(axis=1) > 0.0
    w_lo, w_hi = path.Wv.min(), path.Wv.max()
    # drift margin: c_G * kappa for the trajectory plus the same for the pin
    assert np.all(bd.win_lo[live] >= w_lo - 2.0 * bd.pad - 1e-9)
    assert np.all(bd.win_hi[live] <= w_hi + 2.0 * bd.pad + 1e-9)


def test_march_without_field_never_crosses():
    cfg = build_config(c_G=0.0)
    path = constant_path(0.0, 20.0, dt=0.1)
    bd = march_boundary_density(cfg, path, depth_k=3)
    assert np.all(bd.crossings == 0)
    assert np.all(bd.rw_ladder == 0.0)


def test_depth_zero_budget_is_identically_zero(ref_cfg_m):
    path = exp_path(10.0, dt=0.1)
    bd = march_boundary_density(ref_cfg_m, path, depth_k=0)
    for t in bd.times:
        assert recollision_force_RW(ref_cfg_m, path, bd, t) == 0.0


def test_recollision_force_requires_march_node(ref_cfg_m, march_coarse):
    path, bd = march_coarse
    with pytest.raises(ValueError):
        recollision_force_RW(ref_cfg_m, path, bd, 0.123456)


def test_dump_load_roundtrip(march_coarse):
    _, bd = march_coarse
    buf = io.BytesIO()
    bd.dump(buf)
    buf.seek(0)
    back = BoundaryDensity.load(buf)
    np.testing.assert_array_equal(back.a_plus, bd.a_plus)
    np.testing.assert_array_equal(back.rw_ladder, bd.rw_ladder)
    np.testing.assert_array_equal(back.crossings, bd.crossings)
    assert back.depth_k == bd.depth_k and back.pad == bd.pad


def test_dump_load_depth_zero(ref_cfg_m):
    path = exp_path(5.0, dt=0.2)
    bd = march_boundary_density(ref_cfg_m, path, depth_k=0)
    buf = io.BytesIO()
    bd.dump(buf)
    buf.seek(0)
    back = BoundaryDensity.load(buf)
    np.testing.assert_array_equal(back.times, bd.times)
    np.testing.assert_array_equal(back.a_plus, bd.a_plus)


def test_march_stable_under_time_refinement(ref_cfg_m, march_coarse):
    path_c, bd_c = march_coarse
    path_f = exp_path(50.0, dt=0.05)
    bd_f = march_boundary_density(ref_cfg_m, path_f, depth_k=4)
    probe = bd_c.times[bd_c.times >= 1.0]
    rw_c = bd_c.rw_ladder[-1, bd_c.times >= 1.0]
    rw_f = np.interp(probe, bd_f.times, bd_f.rw_ladder[-1])
    sup = np.max(np.abs(rw_c))
    assert np.max(np.abs(rw_c - rw_f)) <= 0.05 * sup


# ---------------------------------------------------------------------------
# an independent depth-1 recollision force


def _backward_v0(field, tau, x1, u):
    """v_check(0) for a batch of horizontal launches (x1, u) at time tau."""
    y0 = np.stack([np.full(u.shape, x1), u], axis=-1)
    y, _ = _dp45_batch(_horizontal_rhs(field), tau, y0, 0.0, tol=1e-11)
    return y[:, 1]


def rw_depth1_oracle(cfg, path, t, n_outer=201):
    """R_W with exactly one resolved reflection, rebuilt from scratch.

    Outer trapezoid over the incoming velocity, precollisions located node by
    node, the reflection integral done on fresh Gauss panels, and every
    no-boundary closure solved backward directly -- no march storage, no
    offset tables, no window machinery.
    """
    d, kern, force = cfg.density, cfg.kernel, cfg.force
    Wt, Xt = path.W(t), path.X(t)
    lo = path.Wv.min() - 0.01
    hi = path.Wv.max() + 0.01
    vs = np.linspace(lo, hi, n_outer)
    a_nb = d.a0(_backward_v0(force, t, Xt, vs))
    vals = np.zeros(n_outer)
    u_nodes, u_wts = panel_nodes(geometric_edges(1e-4, 8.0), order=8)
    for i, v in enumerate(vs):
        hit = find_precollision(force, path, t, Xt, float(v))
        if hit is None:
            continue
        tau, v_tau = hit
        W_tau, X_tau = path.W(tau), path.X(tau)
        sgn = np.sign(v_tau - W_tau)
        u_in = W_tau - sgn * u_nodes          # the incoming side at tau
        dens_in = d.a0(_backward_v0(force, tau, X_tau, u_in))
        kern_row = eval_kernel(kern, v_tau - W_tau, u_in - W_tau)
        a_one = float(np.sum(u_wts * kern_row * dens_in))
        _, Lt = momentum_flux_L(kern, v - Wt)
        # drag sign convention: F[a](W) = -area * integral Ltilde(v-W) a(v),
        # the one that makes F00 increasing and F_total = F0 + R_W
        vals[i] = Lt * (a_nb[i] - a_one)
    return cfg.disk_area * np.trapezoid(vals, vs)


def test_march_depth1_matches_independent_quadrature(ref_cfg_m):
    path = exp_path(5.0, dt=0.05)
    bd = march_boundary_density(ref_cfg_m, path, depth_k=1)
    node = np.argmin(np.abs(bd.times - 5.0))
    assert bd.times[node] == pytest.approx(5.0, abs=1e-12)
    got = bd.rw_ladder[1, node]
    want = rw_depth1_oracle(ref_cfg_m, path, 5.0)
    assert want != 0.0
    assert got == pytest.approx(want, rel=0.05)
