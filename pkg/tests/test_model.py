import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dalec_ssm.model import (ACMConfig, CF, CLIT, CR, CSOM, CW, ConfigError, DriverRecord, Drivers,
                             PARAM_LOWER, PARAM_UPPER, SIM_PARAMS, ParameterVector, compute_fluxes,
                             daily_system, gpp, read_drivers, run_deterministic, step_mean,
                             synthetic_drivers, transition_matrix, write_drivers)

DRIVER = DriverRecord(1, 15.0, 5.0, 10.0, 20.0, 400.0)


def in_bounds_params():
    return st.lists(st.floats(0, 1), min_size=11, max_size=11).map(
        lambda u: PARAM_LOWER + np.asarray(u) * (PARAM_UPPER - PARAM_LOWER))


stocks = st.lists(st.floats(0, 2e4), min_size=5, max_size=5).map(np.asarray)


def acm_reference(p11, t_max, t_min, rad, ca, doy, lai=4.0, nit=2.7, lat=32.95, psid=-2.0, rtot=1.0):
    # scalar transcription of the aggregated canopy model, written independently
    a2, a3, a4, a5, a6, a7, a8, a9, a10 = (0.0156935, 4.22273, 208.868, 0.0453194, 0.37836,
                                           7.19298, 0.011136, 2.1001, 0.789798)
    gs = abs(psid) ** a10 / (0.5 * (t_max - t_min) + a6 * rtot)
    pp = lai * nit / gs * p11 * math.exp(a8 * t_max)
    qq = a3 - a4
    ci = 0.5 * (ca + qq - pp + math.sqrt((ca + qq - pp) ** 2 - 4 * (ca * qq - pp * a3)))
    e0 = a7 * lai * lai / (lai * lai + a9)
    dec = -23.4 * math.cos(math.radians(360.0 * (doy + 10) / 365.0)) * math.pi / 180.0
    s = 24 * math.acos(-math.tan(math.radians(lat)) * math.tan(dec)) / math.pi
    if rad == 0:
        return 0.0
    return e0 * rad * gs * (ca - ci) / (e0 * rad + gs * (ca - ci)) * (a2 * s + a5)


def test_parameter_bounds_enforced():
    ParameterVector.simulation_truth()
    bad = SIM_PARAMS.copy()
    bad[10] = 25.0
    with pytest.raises(ValueError, match="p11"):
        ParameterVector.from_array(bad)
    assert PARAM_LOWER[0] == 1.1e-05 and PARAM_UPPER[0] == 0.11
    assert (PARAM_LOWER[1], PARAM_UPPER[1]) == (0.2, 0.7)
    assert (PARAM_LOWER[10], PARAM_UPPER[10]) == (2.0, 20.0)


def test_driver_record_validation():
    with pytest.raises(ValueError):
        DriverRecord(1, 5.0, 10.0, 7.0, 10.0, 400.0)
    with pytest.raises(ValueError):
        DriverRecord(1, 15.0, 5.0, 10.0, -1.0, 400.0)


def test_gpp_override_passthrough():
    d = DriverRecord(1, 15.0, 5.0, 10.0, 20.0, 400.0, gpp_override=7.3)
    assert gpp(d, 3.0, ACMConfig(mode="override")) == 7.3
    with pytest.raises(ConfigError):
        gpp(DRIVER, 3.0, ACMConfig(mode="override"))


def test_acm_zero_light_and_reference():
    dark = DriverRecord(100, 25.0, 12.0, 18.0, 0.0, 400.0)
    assert gpp(dark, 3.0) == 0.0
    for doy, rad, p11 in [(10, 8.0, 2.0), (180, 25.0, 3.0), (300, 15.0, 12.0)]:
        d = DriverRecord(doy, 24.0, 11.0, 17.0, rad, 410.0)
        assert gpp(d, p11) == pytest.approx(acm_reference(p11, 24.0, 11.0, rad, 410.0, doy), rel=1e-12)


@given(st.floats(0.5, 30), st.floats(0.5, 30), st.floats(2, 20), st.integers(1, 365))
def test_acm_monotone_in_radiation(r1, r2, p11, doy):
    lo, hi = sorted((r1, r2))
    g_lo = gpp(DriverRecord(doy, 22.0, 10.0, 16.0, lo, 400.0), p11)
    g_hi = gpp(DriverRecord(doy, 22.0, 10.0, 16.0, hi, 400.0), p11)
    assert g_hi >= g_lo >= 0


def test_allocation_values_at_simulation_truth():
    f = compute_fluxes([100, 9000, 100, 500, 11000], DRIVER, SIM_PARAMS, gpp_value=10.0)
    assert f.ra == pytest.approx(2.7, abs=1e-12)
    assert f.af == pytest.approx(1.095, abs=1e-12)
    assert f.ar == pytest.approx(2.04765, abs=1e-12)
    assert f.aw == pytest.approx(4.15735, abs=1e-12)
    assert f.ra + f.af + f.ar + f.aw == pytest.approx(10.0, abs=1e-12)
    assert f.lf == pytest.approx(0.137, abs=1e-12)


def test_nee_vanishes_without_gpp_and_decomposers():
    f = compute_fluxes([100, 9000, 100, 0, 0], DRIVER, SIM_PARAMS, gpp_value=0.0)
    assert f.nee == 0.0


def test_soil_respiration_without_root_share():
    f = compute_fluxes([100, 9000, 100, 500, 11000], DRIVER, SIM_PARAMS, c_root_frac=0.0, gpp_value=6.0)
    assert f.sr == pytest.approx(f.rlit + f.rsom, abs=1e-12)
    with pytest.raises(ValueError):
        compute_fluxes([1, 1, 1, 1, 1], DRIVER, SIM_PARAMS, c_root_frac=1.5, gpp_value=1.0)


def test_identity_dynamics_with_zero_rates():
    p = np.zeros(11)
    c = np.array([100.0, 9000, 100, 500, 11000])
    assert np.allclose(step_mean(c, DRIVER, p, 0.0).as_array(), c, rtol=0, atol=0)
    m, off = transition_matrix(p, DRIVER, 0.0)
    assert np.array_equal(m, np.eye(5)) and np.array_equal(off, np.zeros(5))


def test_transition_matrix_entries():
    m, off = transition_matrix(SIM_PARAMS, 10.0, 10.0)
    q = math.exp(0.1725 * 10)
    assert m[CLIT, CLIT] == pytest.approx(1 - 0.001 * q, abs=1e-14)
    assert m[CLIT, CLIT] == pytest.approx(0.9943865, abs=1e-5)  # printed value rounds exp(1.725) loosely
    assert m[CLIT, CLIT] + m[CSOM, CLIT] == pytest.approx(1 - 0.5 * 0.002 * 0.1 * q, abs=1e-14)
    assert (m[CF, CF], m[CW, CW], m[CR, CR]) == (1 - 0.00137, 1 - 1.1e-4, 1 - 0.00137)
    assert (m[CLIT, CF], m[CLIT, CR], m[CSOM, CW]) == (0.00137, 0.00137, 1.1e-4)
    assert off == pytest.approx([1.095, 4.15735, 2.04765, 0, 0], abs=1e-12)


def test_step_mean_matches_matrix_at_reference_point():
    c = np.array([100.0, 9000, 100, 500, 11000])
    m, off = transition_matrix(SIM_PARAMS, DRIVER, 10.0)
    assert np.allclose(step_mean(c, DRIVER, SIM_PARAMS, 10.0).as_array(), m @ c + off, rtol=0, atol=1e-12)


@settings(max_examples=200)
@given(in_bounds_params(), stocks, st.floats(-10, 35), st.floats(0, 20))
def test_step_mean_agrees_with_matrix(p, c, t, g):
    d = DriverRecord(1, t + 5, t - 5, t, 10.0, 400.0)
    m, off = transition_matrix(p, d, g)
    got = step_mean(c, d, p, g).as_array()
    assert np.allclose(got, m @ c + off, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(c).max()))


@settings(max_examples=200)
@given(in_bounds_params(), stocks, st.floats(-10, 35), st.floats(0, 20))
def test_conservation_and_mass_balance(p, c, t, g):
    d = DriverRecord(1, t + 5, t - 5, t, 10.0, 400.0)
    f = compute_fluxes(c, d, p, gpp_value=g)
    assert f.ra + f.af + f.ar + f.aw == pytest.approx(f.gpp, abs=1e-12)
    change = step_mean(c, d, p, g).as_array().sum() - c.sum()
    assert change == pytest.approx(-f.nee, abs=1e-10 * max(1.0, c.sum()))
    assert min(f.lf, f.lw, f.lr, f.rlit, f.rsom, f.dlit) >= 0


def test_daily_system_matches_single_day_path():
    drv = synthetic_drivers(20)
    sys = daily_system(SIM_PARAMS, drv)
    for k in (0, 7, 19):
        m, off = transition_matrix(SIM_PARAMS, drv.record(k), float(sys.g[k]))
        assert np.allclose(sys.m[k], m, rtol=0, atol=0)
        assert np.allclose(sys.offset[k], off, rtol=1e-15, atol=0)


def test_deterministic_run_shape_and_warning():
    drv = synthetic_drivers(30)
    out = run_deterministic([100, 9000, 100, 500, 11000], SIM_PARAMS, drv)
    assert out.shape == (31, 5) and np.isfinite(out).all()


def test_driver_csv_roundtrip(tmp_path):
    drv = synthetic_drivers(15)
    write_drivers(drv, tmp_path / "d.csv")
    back = read_drivers(tmp_path / "d.csv")
    assert np.array_equal(back.t_mean, drv.t_mean) and np.array_equal(back.day, drv.day)
    with pytest.raises(ConfigError, match="not found"):
        read_drivers(tmp_path / "missing.csv")
    (tmp_path / "bad.csv").write_text("day,t_max\n1,3\n")
    with pytest.raises(ConfigError, match="missing driver columns"):
        read_drivers(tmp_path / "bad.csv")


def test_drivers_reject_unsorted_days():
    with pytest.raises(ConfigError):
        Drivers([2, 1], [1, 1], [0, 0], [0.5, 0.5], [1, 1], [400, 400])
