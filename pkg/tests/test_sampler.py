import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from scipy.integrate import trapezoid

from dalec_ssm.likelihood import StateSpaceProblem
from dalec_ssm.model import PARAM_LOWER, PARAM_UPPER, SIM_PARAMS, synthetic_drivers
from dalec_ssm.ndlm import AffineTransition, LatentGrid
from dalec_ssm.sampler import (BlockProposal, MCMCConfig, NumericalError, PriorSpec, block_covariance,
                               correlation_blocks, gibbs_latent_boundary, gibbs_latent_interior,
                               gibbs_precision, latent_conditional_interior, precision_conditional,
                               _LatentEngine, run_chain, rwmh_params, truncated_gamma)
from dalec_ssm.synth import DEFAULT_INIT_MEAN, NoiseDefaults, Scenario, make_dataset

N_DRAWS = 100_000


def toy_log_joint(x, trans, phi, mu0, kappa, obs, tau):
    """Unnormalised log posterior of a single-stock chain with a Jeffreys precision prior.

    ``x`` has one path per row; ``phi`` may vary along the rows too.
    """
    x = np.atleast_2d(x)
    lp = -0.5 * kappa * (x[:, 0] - mu0) ** 2
    for t, tr in enumerate(trans):
        lp = lp + 0.5 * np.log(phi) - 0.5 * phi * (x[:, t + 1] - tr.a * x[:, t] - tr.b) ** 2
    for t, y in obs.items():
        lp = lp - 0.5 * tau * (x[:, t] - y) ** 2
    return lp - np.log(phi)


def grid_moments(logdens, grid):
    w = np.exp(logdens - logdens.max())
    w /= trapezoid(w, grid)
    mean = trapezoid(grid * w, grid)
    return mean, trapezoid((grid - mean) ** 2 * w, grid)


def assert_moments_match(draws, mean, var, k=3.0):
    n = len(draws)
    m, v = draws.mean(), draws.var()
    se_mean = np.sqrt(v / n)
    se_var = np.sqrt(max(np.mean((draws - m) ** 4) - v * v, 0.0) / n)
    assert abs(m - mean) < k * se_mean, (m, mean, se_mean)
    assert abs(v - var) < k * se_var, (v, var, se_var)


toy = st.fixed_dictionaries({
    "T": st.integers(2, 4),
    "a": st.lists(st.floats(0.6, 1.2), min_size=4, max_size=4),
    "b": st.lists(st.floats(-2, 2), min_size=4, max_size=4),
    "phi": st.floats(0.3, 4.0),
    "tau": st.floats(0.5, 5.0),
    "seed": st.integers(0, 2 ** 31),
})


def build_toy(spec):
    rng = np.random.default_rng(spec["seed"])
    T = spec["T"]
    trans = [AffineTransition(a, b, spec["phi"]) for a, b in zip(spec["a"][:T], spec["b"][:T])]
    x = rng.normal(0, 2, T + 1)
    obs = {t: float(x[t] + rng.normal()) for t in range(T + 1) if rng.random() < 0.6}
    return trans, x, obs, rng


@settings(max_examples=4, deadline=None, derandomize=True)
@given(toy)
def test_latent_samplers_match_grid_integration(spec):
    trans, x, obs, rng = build_toy(spec)
    phi, tau, mu0, kappa = spec["phi"], spec["tau"], 0.5, 0.8
    T = len(trans)
    for t in range(T + 1):
        grid = np.linspace(-40, 40, 40001)
        xs = np.tile(x, (len(grid), 1))
        xs[:, t] = grid
        ld = toy_log_joint(xs, trans, phi, mu0, kappa, obs, tau)
        mean, var = grid_moments(ld, grid)
        y = obs.get(t)
        kw = dict(tau=tau if y is not None else None, obs=y, rng=rng)
        if t == 0:
            draws = np.array([gibbs_latent_boundary("initial", x, trans, phi, mu0, kappa, **kw)
                              for _ in range(N_DRAWS)])
        elif t == T:
            draws = np.array([gibbs_latent_boundary("final", x, trans, phi, **kw) for _ in range(N_DRAWS)])
        else:
            draws = np.array([gibbs_latent_interior(t, x, trans, phi, **kw) for _ in range(N_DRAWS)])
        assert_moments_match(draws, mean, var)


@settings(max_examples=4, deadline=None, derandomize=True)
@given(toy)
def test_precision_sampler_matches_grid_integration(spec):
    trans, x, obs, rng = build_toy(spec)
    log_phi = np.linspace(-12, 8, 40001)
    phis = np.exp(log_phi)
    paths = np.tile(x, (len(phis), 1))
    ld = toy_log_joint(paths, trans, phis, 0.0, 1.0, obs, 1.0) + log_phi  # dphi = phi dlog(phi)
    w = np.exp(ld - ld.max())
    w /= trapezoid(w, log_phi)
    mean = trapezoid(phis * w, log_phi)
    var = trapezoid((phis - mean) ** 2 * w, log_phi)
    draws = np.array([gibbs_precision(x, trans, rng) for _ in range(N_DRAWS)])
    assert_moments_match(draws, mean, var)


def test_interior_conditional_closed_form():
    trans = [AffineTransition(0.5, 1.0, 2.0), AffineTransition(2.0, -1.0, 2.0)]
    mean, prec = latent_conditional_interior(1, [2.0, 0.0, 3.0], trans, 2.0)
    # 0.5*2+1 = 2 from the left, (3+1)/2 = 2 from the right weighted by a^2 = 4
    assert prec == pytest.approx(2.0 * 5.0)
    assert mean == pytest.approx((2.0 * 2.0 + 2.0 * 2.0 * 4.0) / 10.0)
    with pytest.raises(ValueError):
        latent_conditional_interior(0, [1.0, 2.0, 3.0], trans, 1.0)
    with pytest.raises(NumericalError):
        latent_conditional_interior(1, [1.0, 2.0, 3.0], trans, 0.0)


def test_precision_conditional_gamma_example():
    # two unit residuals under the Jeffreys prior give Gamma(1, 1), i.e. Exp(1)
    assert precision_conditional([1.0, -1.0]) == (1.0, 1.0)
    shape, rate = precision_conditional([2.0, 2.0], [4.0, 4.0])
    assert (shape, rate) == (1.0, 1.0)
    with pytest.raises(ValueError):
        precision_conditional([])


@pytest.mark.parametrize("shape,rate,lo,hi", [(3.0, 2.0, 0.5, 2.5), (0.5, 10.0, 1e-3, 0.2),
                                              (50.0, 1.0, 40.0, np.inf), (2.0, 1.0, 0.0, 1.0)])
def test_truncated_gamma_distribution(shape, rate, lo, hi):
    rng = np.random.default_rng(3)
    draws = np.array([truncated_gamma(shape, rate, lo, hi, rng) for _ in range(5000)])
    assert draws.min() >= lo and draws.max() <= hi
    dist = stats.gamma(shape, scale=1 / rate)
    fa, fb = dist.cdf(lo), dist.cdf(hi)
    cdf = lambda v: (dist.cdf(v) - fa) / (fb - fa)  # noqa: E731
    assert stats.kstest(draws, cdf).pvalue > 0.01


def test_truncated_gamma_far_tail_returns_bound():
    rng = np.random.default_rng(0)
    assert truncated_gamma(2.0, 1.0, 1e4, 2e4, rng) == 1e4
    assert truncated_gamma(2.0, 1e6, 10.0, 20.0, rng) == 10.0
    assert truncated_gamma(50.0, 1.0, 1e-12, 1e-10, rng) == 1e-10


def test_vanishing_proposal_keeps_the_chain_in_place():
    rng = np.random.default_rng(1)
    blk = BlockProposal([0], [[1e-30]], PARAM_LOWER, PARAM_UPPER)
    theta = SIM_PARAMS.copy()
    acc = 0
    for _ in range(200):
        new, _, a = rwmh_params(theta, lambda th: -np.sum((th - SIM_PARAMS) ** 2), [blk], rng)
        acc += a[0]
        assert new[0] == pytest.approx(theta[0], abs=1e-12)
    assert acc == 200


def test_flat_target_samples_are_uniform():
    rng = np.random.default_rng(2)
    cov = np.diag((0.3 * (PARAM_UPPER - PARAM_LOWER)) ** 2)
    blk = BlockProposal(range(11), cov, PARAM_LOWER, PARAM_UPPER, seed=5)
    theta = SIM_PARAMS.copy()
    draws, acc = [], 0
    for _ in range(4000):
        theta, _, a = rwmh_params(theta, lambda th: 0.0, [blk], rng)
        acc += a[0]
        draws.append(theta)
    draws = np.array(draws)[::4]
    # the truncation normalisers differ between centres, so acceptance stays below one
    assert 0.5 < acc / 4000 < 1.0
    for j in range(11):
        u = (draws[:, j] - PARAM_LOWER[j]) / (PARAM_UPPER[j] - PARAM_LOWER[j])
        assert stats.kstest(u, "uniform").pvalue > 0.01


def test_univariate_flat_target_is_exactly_uniform():
    rng = np.random.default_rng(4)
    blk = BlockProposal([1], [[0.2 ** 2]], PARAM_LOWER, PARAM_UPPER)
    theta = SIM_PARAMS.copy()
    draws, acc = [], 0
    for _ in range(6000):
        theta, _, a = rwmh_params(theta, lambda th: 0.0, [blk], rng)
        acc += a[0]
        draws.append(theta[1])
    u = (np.array(draws[::3]) - 0.2) / 0.5
    assert stats.kstest(u, "uniform").pvalue > 0.01


def test_symmetric_interior_proposal_ratio_is_likelihood_ratio():
    blk = BlockProposal([1], [[1e-8]], PARAM_LOWER, PARAM_UPPER)
    assert blk.log_normaliser([0.45]) == pytest.approx(0.0, abs=1e-15)
    assert blk.log_normaliser([0.2]) == pytest.approx(np.log(0.5), abs=1e-12)


def test_correlation_blocks_and_covariance():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((500, 4))
    z[:, 1] = z[:, 0] + 0.1 * z[:, 1]
    assert correlation_blocks(z) == [[0, 1], [2], [3]]
    cov = block_covariance(z, [0, 1], np.ones(4))
    assert np.allclose(cov, cov.T) and np.all(np.linalg.eigvalsh(cov) > 0)
    const = np.ones((50, 2))
    assert np.allclose(block_covariance(const, [0, 1], np.array([0.1, 0.2])),
                       2.38 ** 2 / 2 * np.diag([0.01, 0.04]))
    # a block that barely moved keeps at least the floor
    tiny = 1e-9 * rng.standard_normal((50, 2))
    cov = block_covariance(tiny, [0, 1], np.ones(2), floor_sd=np.array([0.1, 0.2]))
    assert np.allclose(np.sqrt(np.diag(cov)), 2.38 / np.sqrt(2) * np.array([0.1, 0.2]))


def test_prior_spec_validation_and_bounds():
    pri = PriorSpec()
    b = pri.precision_bounds
    assert b.shape == (5, 2) and np.all(b[:, 0] < b[:, 1])
    assert b[0, 0] == pytest.approx(1 / 100.0 ** 2) and b[0, 1] == pytest.approx(1 / 0.01 ** 2)
    assert np.all(PriorSpec(precision_sd_range=None).precision_bounds[:, 1] == np.inf)
    with pytest.raises(ValueError):
        PriorSpec(precision_sd_range=(1.0, 0.5))
    with pytest.raises(ValueError):
        MCMCConfig(total_iterations=10, burn_in=10)


def small_problem(grid="daily", T=12):
    drv = synthetic_drivers(T)
    ds = make_dataset(Scenario("daily", "all", horizon_days=T), drv, 11)
    nd = NoiseDefaults()
    prob = StateSpaceProblem(ds.obs, drv, LatentGrid.parse(grid, T), DEFAULT_INIT_MEAN,
                             nd.init_precision(DEFAULT_INIT_MEAN))
    return prob, ds


def test_latent_sweep_targets_the_gaussian_conditional():
    prob, ds = small_problem()
    phi = ds.truth.phi
    eng = _LatentEngine(prob)
    eng.set_params(SIM_PARAMS, phi)
    rng = np.random.default_rng(0)
    x = prob.to_flat(ds.truth.states)
    draws = []
    for it in range(4000):
        eng.sweep(x, phi, rng)
        if it >= 500:
            draws.append(x.copy())
    draws = np.array(draws)
    L, m, _ = prob.conditional_gaussian(prob.assemble(SIM_PARAMS, phi=phi), phi)
    Q = np.zeros((prob.n_x, prob.n_x))
    for i in range(prob.n_x):
        for j in range(L.shape[1]):
            if i - j >= 0:
                Q[i, i - j] = L[i, j]
    cov = np.linalg.inv(Q @ Q.T)
    sd = np.sqrt(np.diag(cov))
    z = (draws.mean(0) - m) / sd
    # autocorrelated draws: allow a generous band on the standardized error
    assert np.abs(z).max() < 0.5
    assert np.allclose(draws.std(0) / sd, 1.0, atol=0.15)


def test_run_chain_shapes_determinism_and_bounds():
    prob, ds = small_problem("explicit:[0,3,7,12]")
    cfg = MCMCConfig(total_iterations=300, burn_in=100, block_refresh=100, thin=5)
    pri = PriorSpec()
    states = ds.truth.states[prob.grid.times]
    a = run_chain(prob, cfg, pri, SIM_PARAMS, states, ds.truth.phi, 9)
    b = run_chain(prob, cfg, pri, SIM_PARAMS, states, ds.truth.phi, 9)
    assert a.param_samples.shape == (300, 11) and a.precision_samples.shape == (300, 5)
    assert a.latent_samples.shape == (60, 4, 5)
    assert np.array_equal(a.param_samples, b.param_samples)
    assert np.array_equal(a.precision_samples, b.precision_samples)
    assert np.all(a.param_samples >= pri.lower) and np.all(a.param_samples <= pri.upper)
    pb = pri.precision_bounds
    assert np.all(a.precision_samples > 0)
    assert np.all((a.precision_samples >= pb[:, 0]) & (a.precision_samples <= pb[:, 1]))
    assert set(a.acceptance_rates) >= {f"p{i}" for i in range(1, 12)}


def test_precision_chain_recovers_known_posterior_on_daily_grid():
    # states pinned at the truth: the Gibbs precision draws are exact Gamma(n/2, SS/2)
    prob, ds = small_problem(T=60)
    x = prob.to_flat(ds.truth.states)
    eng = _LatentEngine(prob)
    eng.set_params(SIM_PARAMS, ds.truth.phi)
    prob.evaluate(eng.cur, x, ds.truth.phi, eng.e, eng.prec)
    rng = np.random.default_rng(3)
    phi = ds.truth.phi.copy()
    bounds = np.tile([0.0, np.inf], (5, 1))
    draws = []
    for _ in range(20000):
        eng.gibbs_precisions(x, phi, rng, bounds)
        draws.append(phi.copy())
    draws = np.array(draws)
    res = ds.truth.states[1:] - np.array([eng.cur.system.m[k] @ ds.truth.states[k] + eng.cur.system.offset[k]
                                          for k in range(60)])
    rate = 0.5 * (res ** 2).sum(0)
    for s in range(5):
        assert_moments_match(draws[:, s], 30 / rate[s], 30 / rate[s] ** 2, k=4.0)


def test_short_burn_in_keeps_parameters_moving():
    prob, ds = small_problem("explicit:[0,6,12]")
    cfg = MCMCConfig(total_iterations=300, burn_in=60, block_refresh=500)
    out = run_chain(prob, cfg, PriorSpec(), SIM_PARAMS, ds.truth.states[prob.grid.times], ds.truth.phi, 4)
    moved = np.mean(np.any(np.diff(out.post_burn("params"), axis=0) != 0, axis=1))
    assert moved > 0.5
