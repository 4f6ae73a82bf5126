"""Shared fixtures: the reference scenario and small variants of it."""

import numpy as np
import pytest

from rayleighdisk import ModelConfig, make_density, make_force, make_kernel
from rayleighdisk.boundary import BodyPath

# relaxation rate of the reference scenario (min-grid F00'), pinned once and
# asserted against the analytic-derivative oracle in test_forces
REF_B0 = 0.952342609134121


def build_config(c_G=1e-3, q=3.5, m=2.5, family="gaussian-flux", beta=1.0,
                 density="gaussian", l1=4.5, l2=2.0, E=0.0, R=0.3, V0=0.02):
    return ModelConfig(kernel=make_kernel(family, beta),
                       force=make_force(c_G, q, m),
                       density=make_density(density, l1, l2),
                       E=E, R=R, V0=V0)


def exp_path(t_end, dt=0.05, gamma=0.02, rate=REF_B0, v_inf=0.0):
    """The Picard initial guess: exponential relaxation towards v_inf."""
    n = int(round(t_end / dt)) + 1
    ts = np.linspace(0.0, t_end, n)
    return BodyPath(ts, v_inf + gamma * np.exp(-rate * ts))


@pytest.fixture
def ref_cfg():
    return build_config()


@pytest.fixture
def quiet_cfg():
    """Reference scenario with the forcing switched off."""
    return build_config(c_G=0.0)
