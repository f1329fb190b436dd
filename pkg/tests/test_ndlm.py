import numpy as np
import pytest
from hypothesis import given, strategies as st

from dalec_ssm.model import CLIT, ConfigError, DriverRecord, SIM_PARAMS, synthetic_drivers, daily_system
from dalec_ssm.ndlm import (AffineTransition, LatentGrid, affine_coefficients, chain_means, coarsen,
                            compose_transition, variance_multiplier)

DRIVER = DriverRecord(1, 15.0, 5.0, 10.0, 20.0, 400.0)
steps_st = st.lists(st.tuples(st.floats(0.5, 1.2), st.floats(-5, 5)), min_size=1, max_size=6).map(
    lambda v: [AffineTransition(a, b, 2.0) for a, b in v])


def mc_window(a, b, phi, n_paths, rng, x0=0.0):
    """Propagate ``n_paths`` daily paths through one window; returns end values."""
    x = np.full(n_paths, x0)
    sd = 1 / np.sqrt(phi)
    for ak, bk in zip(a, b):
        x = ak * x + bk + sd * rng.standard_normal(n_paths)
    return x


def test_affine_coefficients_examples():
    tr = affine_coefficients("cf", SIM_PARAMS, DRIVER, [100, 9000, 100, 500, 11000], 10.0)
    assert tr.a == pytest.approx(0.99863, abs=1e-15) and tr.b == pytest.approx(1.095, abs=1e-12)
    tr = affine_coefficients("cw", np.zeros(11), DRIVER, [1, 1, 1, 1, 1], 0.0)
    assert (tr.a, tr.b) == (1.0, 0.0)
    tr = affine_coefficients(CLIT, SIM_PARAMS, DRIVER, [100, 9000, 100, 500, 11000], 10.0)
    assert tr.b == pytest.approx(0.274, abs=1e-12)
    assert tr.a == pytest.approx(1 - 0.001 * np.exp(1.725), abs=1e-14)


def test_affine_transition_validation():
    with pytest.raises(ValueError):
        AffineTransition(1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        AffineTransition(np.nan, 0.0, 1.0)


def test_compose_single_and_random_walk():
    assert compose_transition([AffineTransition(0.9, 2.0, 3.0)]) == AffineTransition(0.9, 2.0, 3.0)
    rw = compose_transition([AffineTransition(1.0, 0.0, 4.0)] * 12)
    assert (rw.a, rw.b) == (1.0, 0.0) and rw.phi == pytest.approx(4.0 / 12)
    with pytest.raises(ValueError):
        compose_transition([])
    with pytest.raises(ValueError):
        compose_transition([AffineTransition(1, 0, 1.0), AffineTransition(1, 0, 2.0)])


def test_compose_two_equal_steps():
    a, beta, phi = 0.8, 1.5, 2.0
    c = compose_transition([AffineTransition(a, beta, phi)] * 2)
    assert c.a == pytest.approx(a * a) and c.b == pytest.approx(a * beta + beta)
    assert 1 / c.phi == pytest.approx((a * a + 1) / phi)


@given(steps_st, steps_st, steps_st)
def test_composition_is_associative(s1, s2, s3):
    # the inner composite carries its own precision, so compare moments
    whole = compose_transition(s1 + s2 + s3)
    inner = compose_transition(s1 + s2)
    outer = compose_transition(s3)
    var = outer.a ** 2 / inner.phi + 1 / outer.phi
    assert inner.a * outer.a == pytest.approx(whole.a, rel=1e-12)
    assert outer.a * inner.b + outer.b == pytest.approx(whole.b, rel=1e-12, abs=1e-12)
    assert var == pytest.approx(1 / whole.phi, rel=1e-12)


def test_variance_multiplier_matches_composition():
    a = [0.9, 1.1, 0.95, 1.0]
    c = compose_transition([AffineTransition(v, 0.0, 1.0) for v in a])
    assert variance_multiplier(a) == pytest.approx(1 / c.phi, rel=1e-14)


def test_composition_matches_monte_carlo_random_walk():
    rng = np.random.default_rng(1)
    n, phi = 30, 0.5
    comp = compose_transition([AffineTransition(1.0, 0.0, phi)] * n)
    x = mc_window([1.0] * n, [0.0] * n, phi, 100_000, rng)
    se_var = x.var() * np.sqrt(2 / len(x))
    assert abs(x.var() - 1 / comp.phi) < 4 * se_var


def test_grid_all_days_is_identity():
    daily = [AffineTransition(0.99, float(k), 2.0) for k in range(10)]
    out = coarsen(daily, LatentGrid.daily(10))
    assert out == daily


def test_two_anchor_grid_random_walk():
    daily = [AffineTransition(1.0, 0.0, 3.0)] * 20
    (out,) = coarsen(daily, LatentGrid((0, 20)))
    assert (out.a, out.b) == (1.0, 0.0) and out.phi == pytest.approx(3.0 / 20)
    (pooled,) = coarsen(daily, LatentGrid((0, 20)), mode="pooled", pooled_phi=0.7)
    assert pooled.phi == 0.7


def test_monthly_grid_reproduces_daily_chain():
    drv = synthetic_drivers(730)
    sys = daily_system(SIM_PARAMS, drv)
    daily = [AffineTransition(float(sys.m[k, 0, 0]), float(sys.offset[k, 0]), 1.0) for k in range(730)]
    grid = LatentGrid.monthly(730)
    comp = coarsen(daily, grid)
    assert len(comp) == 24
    full = chain_means(100.0, daily)
    assert np.allclose(chain_means(100.0, comp), full[grid.times], rtol=0, atol=1e-9)


def test_coarsen_rejects_short_daily_list():
    with pytest.raises(ValueError):
        coarsen([AffineTransition(1, 0, 1)] * 5, LatentGrid.daily(6))


def test_latent_grid_parsing():
    g = LatentGrid.monthly(730)
    assert g.anchor_times[0] == 0 and g.anchor_times[-1] == 730 and 365 in g.anchor_times
    assert LatentGrid.parse("explicit:[0,10,30]", 30).anchor_times == (0, 10, 30)
    assert len(LatentGrid.parse("daily", 5)) == 6
    with pytest.raises(ConfigError):
        LatentGrid.parse("weekly", 30)
    with pytest.raises(ConfigError):
        LatentGrid.parse("explicit:[0,10]", 30)
    with pytest.raises(ValueError):
        LatentGrid((1, 5))
    with pytest.raises(ValueError):
        LatentGrid((0, 5, 5))
