"""Scenario runner: config parsing, subcommands, CSV/summary emission.

Config files are flat ``key = value`` text with dotted sections (see
_CONFIG_KEYS); unknown keys are errors, not warnings.  Exit codes: 0 success,
2 validation/config failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats as _stats

from . import montecarlo
from .fields import (ModelConfig, ValidationError, make_density, make_force,
                     validate_config)
from .fixedpoint import (FixedPointDivergence, VelocityEnvelope,
                         envelope_check, fixed_point_ode_residual,
                         solve_fixed_point)
from .forces import F00, equilibrium_velocity
from .kernels import make_kernel

_FLOOR = 1e-14      # |V - V_inf| below this is indistinguishable from V_inf


@dataclass
class Scenario:
    """Everything one run needs: model, solver grid, MC settings, outputs."""
    kernel_family: str = "gaussian-flux"
    kernel_beta: float = 1.0
    field_cG: float = 1e-3
    field_q: float = 3.5
    field_m: float = 2.5
    density_family: str = "gaussian"
    density_l1: float = 4.5
    density_l2: float = 2.0
    body_E: float = 0.0
    body_R: float = 0.3
    body_V0: float = 0.02
    solver_dt: float = 0.05
    solver_t_end: float = 2000.0
    solver_depth_k: int = 4
    solver_mode: str = "picard"
    solver_tol: float = 1e-9
    solver_max_iter: int = 12
    mc_n: int = 200000
    mc_seed: int = 1
    mc_dt: float = 0.02
    mc_t_end: float = 50.0
    out_csv: str = "run.csv"
    out_summary: str = "summary.txt"

    def model(self) -> ModelConfig:
        kern = make_kernel(self.kernel_family, self.kernel_beta)
        force = make_force(self.field_cG, self.field_q, self.field_m)
        dens = make_density(self.density_family, self.density_l1,
                            self.density_l2)
        return ModelConfig(kernel=kern, force=force, density=dens,
                           E=self.body_E, R=self.body_R, V0=self.body_V0)

    def items(self):
        for key, attr in _CONFIG_KEYS.items():
            yield key, getattr(self, attr)


@dataclass
class DecayFit:
    b0_hat: float | None
    sigma_hat: float | None
    fitted_A: float
    residuals: dict = field(default_factory=dict)
    notices: list = field(default_factory=list)


# config key -> Scenario attribute; the parse type comes from the dataclass
_CONFIG_KEYS = {
    "kernel.family": "kernel_family",
    "kernel.beta": "kernel_beta",
    "field.cG": "field_cG",
    "field.q": "field_q",
    "field.m": "field_m",
    "density.family": "density_family",
    "density.l1": "density_l1",
    "density.l2": "density_l2",
    "body.E": "body_E",
    "body.R": "body_R",
    "body.V0": "body_V0",
    "solver.dt": "solver_dt",
    "solver.t_end": "solver_t_end",
    "solver.depth_k": "solver_depth_k",
    "solver.mode": "solver_mode",
    "solver.tol": "solver_tol",
    "solver.max_iter": "solver_max_iter",
    "mc.n": "mc_n",
    "mc.seed": "mc_seed",
    "mc.dt": "mc_dt",
    "mc.t_end": "mc_t_end",
    "out.csv": "out_csv",
    "out.summary": "out_summary",
}


class ConfigError(ValueError):
    pass


def parse_config(text: str, base: Scenario | None = None) -> Scenario:
    """Apply ``key = value`` lines ('#' comments) on top of the defaults."""
    sc = base or Scenario()
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', "
                              f"got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        attr = _CONFIG_KEYS.get(key)
        if attr is None:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kind = type(getattr(sc, attr))
        try:
            updates[attr] = kind(val) if kind is not bool else val == "true"
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}")
    return replace(sc, **updates)


def load_scenario(args) -> Scenario:
    sc = Scenario()
    if getattr(args, "config", None):
        with open(args.config) as fh:
            sc = parse_config(fh.read(), sc)
    for item in getattr(args, "set", None) or []:
        sc = parse_config(item, sc)
    return sc


# ---------------------------------------------------------------------------
# decay fitting
# ---------------------------------------------------------------------------

def fit_decay(times, V, V_inf: float, b0_rate: float, gamma: float,
              sigma: float, p: float, A_env: float = 1.0) -> DecayFit:
    """Early-window exponential rate, late-window power slope, envelope A.

    Early window [0, 5/b0]; late window [t_end/10, t_end]; the two never
    overlap (the early window is clipped when they would).  A window
    containing a node with |V - V_inf| < 1e-14 is skipped with a notice.
    """
    times = np.asarray(times, dtype=float)
    dev = np.abs(np.asarray(V, dtype=float) - V_inf)
    t_end = times[-1]
    notices = []
    residuals = {}

    late_lo = t_end / 10.0
    early_hi = 5.0 / b0_rate
    if early_hi >= late_lo:
        early_hi = late_lo * 0.99
        notices.append("early window clipped to keep the windows disjoint")

    b0_hat = None
    m = (times <= early_hi)
    if np.any(dev[m] < _FLOOR):
        notices.append("early window skipped: |V - V_inf| under 1e-14")
    elif np.count_nonzero(m) < 4:
        notices.append("early window skipped: fewer than 4 nodes")
    else:
        res = _stats.linregress(times[m], np.log(dev[m]))
        b0_hat = -float(res.slope)
        residuals["early_rvalue"] = float(res.rvalue)

    sigma_hat = None
    m = (times >= late_lo)
    if np.any(dev[m] < _FLOOR):
        notices.append("late window skipped: |V - V_inf| under 1e-14")
    elif np.count_nonzero(m) < 4:
        notices.append("late window skipped: fewer than 4 nodes")
    else:
        res = _stats.linregress(np.log1p(times[m]), np.log(dev[m]))
        sigma_hat = -float(res.slope)
        residuals["late_rvalue"] = float(res.rvalue)

    env = VelocityEnvelope(gamma=gamma, A=A_env, sigma=sigma,
                           b0_rate=b0_rate)
    _, _, fitted_A = envelope_check((times, V), env, V_inf, p)
    return DecayFit(b0_hat=b0_hat, sigma_hat=sigma_hat, fitted_A=fitted_A,
                    residuals=residuals, notices=notices)


# ---------------------------------------------------------------------------
# output emission
# ---------------------------------------------------------------------------

def _write_csv(path: str, header: list, columns: list):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*columns):
            fh.write(",".join(f"{v:.16e}" for v in row) + "\n")


def _write_summary(path: str, sc: Scenario, lines: list):
    with open(path, "w") as fh:
        fh.write("# resolved configuration\n")
        for key, val in sc.items():
            fh.write(f"{key} = {val}\n")
        fh.write("\n# results\n")
        for line in lines:
            fh.write(line + "\n")


def _sigma_text(sigma: float) -> str:
    from fractions import Fraction
    frac = Fraction(sigma).limit_denominator(64)
    if abs(float(frac) - sigma) < 1e-12:
        return f"{frac.numerator}/{frac.denominator} ({sigma!r})"
    return repr(sigma)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_validate(args) -> int:
    sc = load_scenario(args)
    try:
        cfg = sc.model()
        budget = validate_config(cfg)
    except (ValidationError, ValueError) as exc:
        print(f"rejected:\n{exc}", file=sys.stderr)
        return 2
    print("accepted")
    print(f"p = {cfg.kernel.p}")
    print(f"mu = {budget.mu}")
    print(f"sigma = {_sigma_text(budget.sigma)}")
    print(f"gamma = {budget.gamma}")
    return 0


def _cmd_equilibrium(args) -> int:
    sc = load_scenario(args)
    cfg = sc.model()
    V_inf, b0 = equilibrium_velocity(cfg, cfg.E)
    print(f"V_inf = {V_inf!r}")
    print(f"b0 = {b0!r}")
    return 0


def _cmd_run(args) -> int:
    sc = load_scenario(args)
    try:
        cfg = sc.model()
        budget = validate_config(cfg)
    except (ValidationError, ValueError) as exc:
        print(f"rejected:\n{exc}", file=sys.stderr)
        return 2
    t0 = time.perf_counter()
    try:
        res = solve_fixed_point(
            cfg, mode=sc.solver_mode, tol=sc.solver_tol,
            max_iter=sc.solver_max_iter, dt=sc.solver_dt,
            t_end=sc.solver_t_end, depth_k=sc.solver_depth_k,
            on_iteration=lambda k, r, s: print(
                f"iteration {k}: residual {r:.3e} ({s:.1f}s)"))
    except FixedPointDivergence as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    wall = time.perf_counter() - t0

    sub = res.sub_times
    path = res.path
    V_sub = path.W(sub)
    X_sub = path.X(sub)
    f0 = res.F00_sub - res.H_sub
    _write_csv(args.out or sc.out_csv,
               ["t", "V", "X", "F00", "F0", "H", "RW", "F_total"],
               [sub, V_sub, X_sub, res.F00_sub, f0, res.H_sub, res.RW_sub,
                f0 + res.RW_sub])

    gamma = abs(cfg.V0 - res.V_inf)
    fit = fit_decay(res.times, res.V, res.V_inf, res.b0, gamma,
                    budget.sigma, cfg.kernel.p)
    env = VelocityEnvelope(gamma=gamma, A=max(fit.fitted_A, 1.0),
                           sigma=budget.sigma, b0_rate=res.b0)
    ok, margin, _ = envelope_check(path, env, res.V_inf, cfg.kernel.p)
    lines = [
        f"V_inf = {res.V_inf!r}",
        f"b0 = {res.b0!r}",
        f"sigma = {_sigma_text(budget.sigma)}",
        f"mode = {res.mode}",
        f"iterations = {len(res.residuals)}",
        f"residual_history = {['%.6e' % r for r in res.residuals]}",
        f"fitted_A = {fit.fitted_A!r}",
        f"envelope_pass = {ok}",
        f"envelope_min_margin = {margin!r}",
        f"b0_hat = {fit.b0_hat!r}",
        f"sigma_hat = {fit.sigma_hat!r}",
        f"fit_notices = {fit.notices}",
        f"lipschitz = {res.lipschitz!r}",
        f"wall_seconds = {wall:.1f}",
        f"iteration_seconds = {['%.1f' % s for s in res.timings['iterations']]}",
    ]
    _write_summary(args.summary or sc.out_summary, sc, lines)
    print(f"converged in {len(res.residuals)} iterations "
          f"({wall:.1f}s); fitted_A = {fit.fitted_A:.4f}; "
          f"csv -> {args.out or sc.out_csv}")
    return 0


def _cmd_mc(args) -> int:
    sc = load_scenario(args)
    try:
        cfg = sc.model()
        validate_config(cfg)
    except (ValidationError, ValueError) as exc:
        print(f"rejected:\n{exc}", file=sys.stderr)
        return 2
    t0 = time.perf_counter()
    try:
        res = montecarlo.run_mc(cfg, N=sc.mc_n, t_end=sc.mc_t_end,
                                dt=sc.mc_dt, seed=sc.mc_seed)
    except (RuntimeError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    wall = time.perf_counter() - t0
    _write_csv(args.out or sc.out_csv, ["t", "V", "X", "se"],
               [res.times, res.V, res.X, res.se])
    lines = [f"coupling = {res.coupling!r}",
             f"force_mean = {res.force_mean!r}",
             f"force_se = {res.force_se!r}",
             f"wall_seconds = {wall:.1f}"]
    lines += [f"{k} = {v}" for k, v in res.stats.items()]
    _write_summary(args.summary or sc.out_summary, sc, lines)
    print(f"mc run complete ({wall:.1f}s); csv -> {args.out or sc.out_csv}")
    return 0


def _cmd_decay_fit(args) -> int:
    sc = load_scenario(args)
    cfg = sc.model()
    budget = validate_config(cfg)
    data = np.genfromtxt(args.series, delimiter=",", names=True)
    V_inf, b0 = equilibrium_velocity(cfg, cfg.E)
    gamma = abs(cfg.V0 - V_inf)
    fit = fit_decay(data["t"], data["V"], V_inf, b0, gamma, budget.sigma,
                    cfg.kernel.p)
    print(f"b0_hat = {fit.b0_hat!r}")
    print(f"sigma_hat = {fit.sigma_hat!r}")
    print(f"fitted_A = {fit.fitted_A!r}")
    for note in fit.notices:
        print(f"notice: {note}")
    return 0


def _cmd_compare(args) -> int:
    sc = load_scenario(args)
    try:
        cfg = sc.model()
        validate_config(cfg)
    except (ValidationError, ValueError) as exc:
        print(f"rejected:\n{exc}", file=sys.stderr)
        return 2
    horizon = sc.mc_t_end
    try:
        det = solve_fixed_point(cfg, mode=sc.solver_mode, tol=sc.solver_tol,
                                max_iter=sc.solver_max_iter, dt=sc.solver_dt,
                                t_end=horizon, depth_k=sc.solver_depth_k)
        mc_res = montecarlo.run_mc(cfg, N=sc.mc_n, t_end=horizon,
                                   dt=sc.mc_dt, seed=sc.mc_seed)
    except (RuntimeError, FixedPointDivergence) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    V_det = det.path.W(mc_res.times)
    gap = np.abs(mc_res.V - V_det)
    bias = montecarlo.reduction_bias(cfg, mc_res.coupling, det.V_inf,
                                     cfg.V0, det.b0)
    budget_arr = 3.0 * mc_res.se + bias
    inside = bool(np.all(gap <= budget_arr + 1e-15))
    print(f"deterministic vs MC on [0, {horizon}]")
    print(f"sup |V_mc - V_det| = {float(gap.max())!r}")
    print(f"sup 3se + bias = {float(budget_arr.max())!r} (bias = {bias!r})")
    print(f"inside = {inside}")
    print(f"recollision_fraction = {mc_res.stats['recollision_fraction']}")
    print(f"transverse_escape_fraction = "
          f"{mc_res.stats['transverse_escape_fraction']}")
    print(f"coupling = {mc_res.coupling!r}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rayleighdisk",
        description="disk-in-kinetic-gas scenario runner")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, extra in [
        ("validate", _cmd_validate, False),
        ("equilibrium", _cmd_equilibrium, False),
        ("run", _cmd_run, True),
        ("mc", _cmd_mc, True),
        ("decay-fit", _cmd_decay_fit, False),
        ("compare", _cmd_compare, False),
    ]:
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", help="scenario config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        if extra:
            p.add_argument("--out", help="CSV output path")
            p.add_argument("--summary", help="summary output path")
        if name == "decay-fit":
            p.add_argument("series", help="CSV with t and V columns")
        p.set_defaults(func=fn)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
