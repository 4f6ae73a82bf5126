"""External force field, initial gas density, and parameter admissibility.

The force field is separated, G = (G1(t, x1), Gperp(t, xperp)), with the
built-in horizontal family

    G1(t, x1) = sign * c_G * <t>^(-q) * <x1>^(-m),     <z> = sqrt(1 + z^2),

and a transverse family |Gperp| <= c_G <t>^(-q) that defaults to zero.  The
initial density is the product f0(v) = a0(v1) * b0(vperp) with even
nonnegative factors; b0 is normalized to unit mass so the transverse factor
of every force integral is the disk area when Gperp = 0.

validate_config derives the decay budget: mu = min(m, q-1), 1/sigma =
1/(p+1) + 1/mu, gamma = |V0 - Vinf|, and the local relaxation rate b0.  It is
total: any invalid configuration raises a single error listing every violated
inequality with its margin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._quad import adaptive_panels, geometric_edges
from .kernels import CollisionKernel


def bracket(z):
    """<z> = sqrt(1 + z^2); the polynomial weight used in every decay bound."""
    z = np.asarray(z, dtype=float)
    out = np.sqrt(1.0 + z * z)
    return float(out) if out.ndim == 0 else out


class ValidationError(ValueError):
    """Raised with the complete list of violated admissibility inequalities."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("configuration rejected:\n  " + "\n  ".join(self.violations))


@dataclass(frozen=True)
class ExternalForce:
    c_G: float
    q: float
    m: float
    sign: float = 1.0
    gperp_amp: float = 0.0  # amplitude of the transverse family, |amp| <= c_G

    @property
    def is_zero(self) -> bool:
        return self.c_G == 0.0 and self.gperp_amp == 0.0

    @property
    def gperp_zero(self) -> bool:
        return self.gperp_amp == 0.0

    def g1(self, t, x1):
        if self.c_G == 0.0:
            t = np.asarray(t, dtype=float)
            x1 = np.asarray(x1, dtype=float)
            return np.zeros(np.broadcast(t, x1).shape)
        return self.sign * self.c_G * bracket(t) ** (-self.q) * bracket(x1) ** (-self.m)

    def gperp(self, t, xperp):
        """Transverse acceleration 2-vector; spatially uniform built-in."""
        xperp = np.asarray(xperp, dtype=float)
        if self.gperp_amp == 0.0:
            return np.zeros(xperp.shape)
        amp = self.gperp_amp * bracket(t) ** (-self.q) / math.sqrt(2.0)
        out = np.empty(xperp.shape)
        out[..., 0] = amp
        out[..., 1] = amp
        return out


def make_force(c_G: float, q: float, m: float, sign: float = 1.0,
               gperp_amp: float = 0.0) -> ExternalForce:
    if sign not in (-1.0, 1.0):
        raise ValueError("force sign must be +1 or -1")
    if c_G < 0:
        raise ValueError("c_G must be nonnegative")
    if abs(gperp_amp) > c_G:
        raise ValueError("transverse amplitude may not exceed c_G")
    f = ExternalForce(c_G=float(c_G), q=float(q), m=float(m), sign=float(sign),
                      gperp_amp=float(gperp_amp))
    # decay envelope checked on a sample grid at construction
    tt = np.linspace(0.0, 50.0, 20)
    xx = np.linspace(-20.0, 20.0, 20)
    g = np.abs(f.g1(tt[:, None], xx[None, :]))
    envelope = c_G * bracket(tt[:, None]) ** (-q) * bracket(xx[None, :]) ** (-m)
    if np.any(g > envelope * (1.0 + 1e-12) + 1e-300):
        raise ValueError("built-in force violates its own decay envelope")
    return f


def eval_force(f: ExternalForce, t, x):
    """Acceleration 3-vector (G1(t, x1), Gperp(t, xperp)) at one point."""
    x = np.asarray(x, dtype=float)
    g1 = f.g1(t, x[0])
    gp = f.gperp(t, x[1:])
    return np.array([float(g1), float(gp[0]), float(gp[1])])


@dataclass(frozen=True)
class InitialDensity:
    family: str  # "gaussian" | "algebraic"
    l1: float
    l2: float
    a0_norm: float
    b0_norm: float
    a0_std: float  # sqrt of the v1 second moment, used for grid spans

    def a0(self, v1):
        v1 = np.asarray(v1, dtype=float)
        if self.family == "gaussian":
            out = self.a0_norm * np.exp(-0.5 * v1 * v1)
        else:
            out = self.a0_norm * bracket(v1) ** (-(self.l1 + 1.0))
        return float(out) if np.ndim(out) == 0 else out

    def da0(self, v1):
        v1 = np.asarray(v1, dtype=float)
        if self.family == "gaussian":
            out = -v1 * self.a0_norm * np.exp(-0.5 * v1 * v1)
        else:
            out = (-(self.l1 + 1.0) * v1 * self.a0_norm
                   * bracket(v1) ** (-(self.l1 + 3.0)))
        return float(out) if np.ndim(out) == 0 else out

    def b0(self, vperp):
        """Unit-mass transverse factor; vperp is a 2-vector (or (..., 2))."""
        vperp = np.asarray(vperp, dtype=float)
        r2 = np.sum(vperp * vperp, axis=-1)
        if self.family == "gaussian":
            out = self.b0_norm * np.exp(-0.5 * r2)
        else:
            out = self.b0_norm * (1.0 + r2) ** (-(self.l2 + 2.0) / 2.0)
        return float(out) if out.ndim == 0 else out

    def db0(self, vperp):
        vperp = np.asarray(vperp, dtype=float)
        r2 = np.sum(vperp * vperp, axis=-1, keepdims=True)
        if self.family == "gaussian":
            return -vperp * self.b0_norm * np.exp(-0.5 * r2)
        s = self.l2 + 2.0
        return -s * vperp * self.b0_norm * (1.0 + r2) ** (-(s + 2.0) / 2.0)


def make_density(family: str = "gaussian", l1: float = 4.5, l2: float = 2.0) -> InitialDensity:
    if family not in ("gaussian", "algebraic"):
        raise ValueError(f"unknown density family {family!r}")
    if family == "gaussian":
        a0_norm = 1.0 / math.sqrt(2.0 * math.pi)
        b0_norm = 1.0 / (2.0 * math.pi)
        a0_std = 1.0
    else:
        # integral_R <v>^(-s) dv = sqrt(pi) Gamma((s-1)/2) / Gamma(s/2)
        s = l1 + 1.0
        if s <= 3.0:
            raise ValueError("algebraic a0 needs l1 > 2 for a finite velocity spread")
        a0_norm = math.gamma(s / 2.0) / (math.sqrt(math.pi) * math.gamma((s - 1.0) / 2.0))
        # integral_R2 <|w|>^(-(l2+2)) dw = 2 pi / l2
        if l2 <= 0:
            raise ValueError("algebraic b0 needs l2 > 0 to be integrable")
        b0_norm = l2 / (2.0 * math.pi)
        # second moment of a0, same Gamma identity two powers down
        m2 = (math.gamma((s - 3.0) / 2.0) / math.gamma((s - 2.0) / 2.0)
              / (math.gamma((s - 1.0) / 2.0) / math.gamma(s / 2.0)) / 2.0)
        a0_std = math.sqrt(m2)
    return InitialDensity(family=family, l1=float(l1), l2=float(l2),
                          a0_norm=a0_norm, b0_norm=b0_norm, a0_std=a0_std)


def eval_density_and_gradient(f0: InitialDensity, v):
    """f0(v) = a0(v1) b0(vperp) and its analytic velocity gradient."""
    v = np.asarray(v, dtype=float)
    a = f0.a0(v[0])
    b = f0.b0(v[1:])
    grad = np.empty(3)
    grad[0] = f0.da0(v[0]) * b
    grad[1:] = a * f0.db0(v[1:])
    return a * b, grad


def source_J(force: ExternalForce, f0: InitialDensity, s, x, v) -> float:
    """-G(s, x) . grad_v f0(v): the transport source created by the field."""
    g = eval_force(force, s, x)
    _, grad = eval_density_and_gradient(f0, v)
    return -float(np.dot(g, grad))


@dataclass(frozen=True)
class ModelConfig:
    kernel: CollisionKernel
    force: ExternalForce
    density: InitialDensity
    E: float = 0.0
    R: float = 0.3
    V0: float = 0.02
    # dimension is fixed at 3 (one horizontal + two transverse directions)

    @property
    def disk_area(self) -> float:
        return math.pi * self.R * self.R


@dataclass
class DecayBudget:
    mu: float
    sigma: float
    gamma: float
    b0_rate: float
    A: float  # envelope constant; 1.0 until fitted by the decay analyzer
    V_inf: float

    def envelope(self, t, p: float):
        t = np.asarray(t, dtype=float)
        return (self.gamma * np.exp(-self.b0_rate * t)
                + self.A * self.gamma ** (p + 1.0) * (1.0 + t) ** (-self.sigma))


def validate_config(cfg: ModelConfig) -> DecayBudget:
    """Check every admissibility inequality; return the derived decay budget.

    Raises ValidationError listing all violations (never a partial crash).
    """
    violations = []
    p = cfg.kernel.p
    q, m = cfg.force.q, cfg.force.m
    l1, l2 = cfg.density.l1, cfg.density.l2

    def need(ok, text):
        if not ok:
            violations.append(text)

    need(0.0 < p <= 2.0, f"kernel exponent p={p} outside (0, 2]")
    need(q > 2.0, f"temporal decay q={q} <= 2 (margin {q - 2.0:+.3g})")
    need(m > 0.0, f"spatial decay m={m} <= 0")
    # non-strict: the reference configuration sits exactly at l1 = q+1
    need(l1 >= q + 1.0, f"a0 tail l1={l1} < q+1={q + 1.0} (margin {l1 - q - 1.0:+.3g})")
    need(l2 > 1.0, f"b0 tail l2={l2} <= 1 (margin {l2 - 1.0:+.3g})")
    need(cfg.R > 0.0, f"disk radius R={cfg.R} <= 0")

    mu = min(m, q - 1.0)
    mu_floor = 1.0 + 1.0 / p if p > 0 else math.inf
    need(mu > mu_floor,
         f"mu=min(m, q-1)={mu:g} <= 1+1/p={mu_floor:g} (margin {mu - mu_floor:+.3g})")
    sigma = 1.0 / (1.0 / (p + 1.0) + 1.0 / mu) if mu > 0 else float("nan")

    # the equilibrium velocity (and hence gamma) needs the force integrals;
    # imported lazily to keep the module dependency one-way elsewhere
    V_inf = 0.0
    b0_rate = float("nan")
    gamma = abs(cfg.V0)
    if not violations:
        from .forces import equilibrium_velocity

        V_inf, b0_rate = equilibrium_velocity(cfg, cfg.E)
        gamma = abs(cfg.V0 - V_inf)
        need(b0_rate > 0.0, f"local relaxation rate b0={b0_rate} <= 0")

    need(gamma > 2.0 * cfg.force.c_G,
         f"gamma={gamma:.6g} <= 2 c_G={2.0 * cfg.force.c_G:.6g}"
         f" (margin {gamma - 2.0 * cfg.force.c_G:+.3g})")
    A = 1.0
    need(A * gamma < 1.0, f"A*gamma={A * gamma:.6g} >= 1")

    if violations:
        raise ValidationError(violations)
    return DecayBudget(mu=mu, sigma=sigma, gamma=gamma, b0_rate=b0_rate,
                       A=A, V_inf=V_inf)


def fitted_budget(budget: DecayBudget, A: float) -> DecayBudget:
    return replace(budget, A=float(A))


def gradient_tail_constant(f0: InitialDensity, n: int = 25) -> float:
    """Measured C with |grad f0| <= C <v1>^(-l1-1) <vperp>^(-l2-1) on a grid."""
    v1 = np.linspace(-8.0, 8.0, n)
    vp = np.linspace(-8.0, 8.0, n)
    worst = 0.0
    for a in v1:
        for b in vp:
            val, grad = eval_density_and_gradient(f0, np.array([a, b, 0.3 * b]))
            w = (bracket(a) ** (f0.l1 + 1.0)
                 * bracket(math.hypot(b, 0.3 * b)) ** (f0.l2 + 1.0))
            worst = max(worst, float(np.linalg.norm(grad)) * w)
    return worst
