import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from rayleighdisk import (eval_kernel, flux_cdf_table, make_kernel,
                          momentum_flux_L, sample_outgoing_speed)
from rayleighdisk.kernels import kernel_mass_residual, second_moment_half

FAMILIES = [("gaussian-flux", 1.0), ("speed-scaled", 1.0),
            ("power-family", 2.0)]


@pytest.mark.parametrize("family,beta", FAMILIES)
@pytest.mark.parametrize("u1", [0.1, 0.5, 1.0, 2.0])
def test_mass_conservation(family, beta, u1):
    k = make_kernel(family, beta)
    assert kernel_mass_residual(k, u1) <= 1e-8


def test_gaussian_flux_at_zero_speed():
    # closed form: K(v1, u1) = 2*beta*|u1|*exp(-beta*v1^2) at v1=0
    k = make_kernel("gaussian-flux", 1.0)
    assert eval_kernel(k, 0.0, 2.0) == pytest.approx(4.0, abs=1e-14)


def test_power_beta_zero_closed_form():
    # K(1,1) = 2*e^-1 and beta=0 degenerates to the speed-scaled family
    k0 = make_kernel("power-family", 0.0)
    ks = make_kernel("speed-scaled")
    assert eval_kernel(k0, 1.0, 1.0) == pytest.approx(2.0 * np.exp(-1.0),
                                                      rel=1e-14)
    grid = np.linspace(0.05, 3.0, 7)
    np.testing.assert_allclose(eval_kernel(k0, grid[:, None], grid[None, :]),
                               eval_kernel(ks, grid[:, None], grid[None, :]),
                               rtol=0, atol=0)


def test_momentum_flux_closed_forms():
    # integral of v^2 e^(-v^2) over the line is sqrt(pi)/2, so L(-1)=1+sqrt(pi)
    k = make_kernel("gaussian-flux", 1.0)
    L, Lt = momentum_flux_L(k, -1.0)
    assert L == pytest.approx(1.0 + np.sqrt(np.pi), rel=1e-14)
    assert Lt == pytest.approx(-(1.0 + np.sqrt(np.pi)), rel=1e-14)
    ks = make_kernel("speed-scaled")
    Ls, _ = momentum_flux_L(ks, 1.0)
    assert Ls == pytest.approx(1.0 + np.sqrt(np.pi), rel=1e-14)


def test_momentum_flux_vanishes_at_grazing():
    for family, beta in FAMILIES:
        L, Lt = momentum_flux_L(make_kernel(family, beta), 0.0)
        assert L == 0.0 and Lt == 0.0


def test_moment_exponent_fits():
    # L(u) - u^2 is an exact power law sqrt(pi)*c*|u|^p for every family
    expected = {"gaussian-flux": 1.0, "speed-scaled": 1.5, "power-family": 0.5}
    u = np.geomspace(1e-2, 1.0, 30)
    for family, beta in FAMILIES:
        k = make_kernel(family, beta)
        moment = 2.0 * second_moment_half(k, u)
        fit = stats.linregress(np.log(u), np.log(moment))
        assert fit.slope == pytest.approx(expected[family], abs=1e-9)


def test_singular_family_rejects_grazing_eval():
    ks = make_kernel("speed-scaled")
    with pytest.raises(ValueError):
        eval_kernel(ks, 1.0, 0.0)
    # the gaussian-flux family is regular there: no flux, no error
    assert eval_kernel(make_kernel("gaussian-flux", 1.0), 1.0, 0.0) == 0.0


def test_flux_cdf_table_shape():
    for family, beta in FAMILIES:
        v, cdf = flux_cdf_table(make_kernel(family, beta), 0.7)
        assert v[0] >= 0.0 and np.all(np.diff(v) > 0)
        assert np.all(np.diff(cdf) >= 0)
        assert cdf[0] >= 0.0 and cdf[-1] == pytest.approx(1.0, abs=1e-9)


def test_sample_mean_gaussian_flux():
    # E[v] of the reflected speed is sqrt(pi)/2 for gaussian-flux(beta=1)
    k = make_kernel("gaussian-flux", 1.0)
    rng = np.random.default_rng(7)
    draws = sample_outgoing_speed(k, np.full(200_000, 0.7), rng)
    se = draws.std() / np.sqrt(draws.size)
    assert abs(draws.mean() - np.sqrt(np.pi) / 2.0) <= 4.0 * se


@pytest.mark.parametrize("family,beta", FAMILIES)
def test_sample_matches_tabulated_cdf(family, beta):
    k = make_kernel(family, beta)
    rng = np.random.default_rng(11)
    u1 = 0.8
    draws = np.asarray(sample_outgoing_speed(k, np.full(20_000, u1), rng))
    v, cdf = flux_cdf_table(k, u1)
    ks_stat = stats.ks_1samp(draws, lambda s: np.interp(s, v, cdf)).statistic
    assert ks_stat <= 0.02


def test_grazing_draws_are_clamped_and_counted():
    k = make_kernel("speed-scaled")
    before = k.stats["clamped"]
    out = sample_outgoing_speed(k, np.full(8, 1e-9), np.random.default_rng(0))
    assert np.all(np.asarray(out) > 0)
    assert k.stats["clamped"] == before + 8


def test_make_kernel_validates_family_and_beta():
    with pytest.raises(ValueError):
        make_kernel("bogus")
    with pytest.raises(ValueError):
        make_kernel("power-family", 3.0)   # beta must lie in [-1, 3)
    with pytest.raises(ValueError):
        make_kernel("power-family", -1.5)


@given(v1=st.floats(-5.0, 5.0), u1=st.floats(0.01, 5.0),
       fam=st.sampled_from(FAMILIES))
@settings(max_examples=200, deadline=None)
def test_kernel_nonnegative_and_even(v1, u1, fam):
    k = make_kernel(*fam)
    val = eval_kernel(k, v1, u1)
    assert val >= 0.0
    assert eval_kernel(k, -v1, u1) == val
    # incoming side only sets the rate through |u1|
    assert eval_kernel(k, v1, -u1) == val


@given(u1=st.floats(0.01, 3.0), seed=st.integers(0, 2**16))
@settings(max_examples=60, deadline=None)
def test_sampled_speeds_positive(u1, seed):
    k = make_kernel("power-family", 1.5)
    out = sample_outgoing_speed(k, np.full(4, u1),
                                np.random.default_rng(seed))
    assert np.all(np.asarray(out) > 0.0)
