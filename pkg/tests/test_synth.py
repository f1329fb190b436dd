import numpy as np
import pytest

from dalec_ssm.model import SIM_PARAMS, run_deterministic, synthetic_drivers
from dalec_ssm.synth import (DEFAULT_INIT_MEAN, NoiseDefaults, Scenario, generate_study, load_dataset,
                             make_dataset, observe, simulate_truth, stock_observation_times, write_dataset)

DRV = synthetic_drivers(730)
NOISE = NoiseDefaults()


def test_zero_process_noise_follows_deterministic_run():
    tr = simulate_truth(SIM_PARAMS, DRV, DEFAULT_INIT_MEAN, NOISE.init_precision(DEFAULT_INIT_MEAN),
                        np.full(5, np.inf), 4)
    assert np.array_equal(tr.states, run_deterministic(tr.states[0], SIM_PARAMS, DRV))


def test_truth_is_reproducible():
    args = (SIM_PARAMS, DRV, DEFAULT_INIT_MEAN, NOISE.init_precision(DEFAULT_INIT_MEAN),
            NOISE.process_precision(DEFAULT_INIT_MEAN))
    a, b = simulate_truth(*args, 8), simulate_truth(*args, 8)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.fluxes, b.fluxes)


def test_one_step_residual_variance_matches_process_precision():
    phi = NOISE.process_precision(DEFAULT_INIT_MEAN)
    tr = simulate_truth(SIM_PARAMS, DRV, DEFAULT_INIT_MEAN, NOISE.init_precision(DEFAULT_INIT_MEAN), phi, 21)
    from dalec_ssm.model import daily_system

    sys = daily_system(SIM_PARAMS, DRV)
    pred = np.einsum("kij,kj->ki", sys.m, tr.states[:-1]) + sys.offset
    var = (tr.states[1:] - pred).var(axis=0)
    assert np.allclose(var * phi, 1.0, atol=0.2)


def test_observation_times_and_exact_observations():
    assert len(stock_observation_times("daily", 730)) == 731
    assert list(stock_observation_times("annual", 730)) == [0, 365, 730]
    ds = make_dataset(Scenario("annual", "all"), DRV, 3)
    exact = observe(ds.truth, np.full(5, np.inf), {f: np.inf for f in ds.obs.delta}, Scenario("annual", "all"), 1)
    t, v = exact.stock_obs["cw"]
    assert np.array_equal(v, ds.truth.states[t, 1])
    t, v = exact.flux_obs["nee"]
    assert np.array_equal(v, ds.truth.fluxes[t - 1, 11])


def test_coarser_scenarios_keep_finer_values():
    daily = make_dataset(Scenario("daily", "all"), DRV, 12)
    annual = make_dataset(Scenario("annual", "neon_nee"), DRV, 12)
    t, v = annual.obs.stock_obs["cf"]
    assert np.array_equal(v, daily.obs.stock_obs["cf"][1][t])
    assert annual.obs.active_fluxes == ("nee", "sr")
    assert np.array_equal(annual.obs.flux_obs["nee"][1], daily.obs.flux_obs["nee"][1])


def test_study_seeds_are_distinct_and_manifest_echoes_parameters():
    study = generate_study(Scenario("daily", "all", horizon_days=60, replicates=15, seed=7), DRV.head(60))
    starts = {tuple(ds.truth.states[0]) for ds in study}
    assert len(starts) == 15
    man = study[0].manifest
    assert (man["params"]["p1"], man["params"]["p2"], man["params"]["p11"]) == (0.002, 0.27, 3.0)


def test_foliage_stays_plausible():
    study = generate_study(Scenario("daily", "all", replicates=10, seed=3), DRV)
    ok = [np.all((ds.truth.states[:, 0] > 10.0) & (ds.truth.states[:, 0] < 1000.0)) for ds in study]
    assert np.mean(ok) >= 0.9


def test_dataset_roundtrip(tmp_path):
    ds = make_dataset(Scenario("monthly", "neon_gpp", horizon_days=90), DRV.head(90), 5)
    back = load_dataset(write_dataset(ds, tmp_path / "d"))
    assert np.array_equal(back.truth.states, ds.truth.states)
    assert back.obs.active_fluxes == ds.obs.active_fluxes
    for name, (t, v) in ds.obs.stock_obs.items():
        assert np.array_equal(back.obs.stock_obs[name][1], v)


def test_scenario_validation():
    with pytest.raises(ValueError):
        Scenario("weekly")
    with pytest.raises(ValueError):
        Scenario("annual", horizon_days=400)
    with pytest.raises(ValueError):
        Scenario(flux_mask="neon_all")
