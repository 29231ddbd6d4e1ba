import math
import warnings

import numpy as np
import pytest
from scipy.stats import chisquare, poisson

from walklab.base_experiment import BadFamilyParams, BudgetTooSmall, PopulationOverflow, RegimeMismatch, TooFewAccepted
from walklab.bpre import (
    HYBRID_GAMMA2_BOUND, Environment, EnvironmentModel, OffspringKind, OffspringLaw, _up_environments,
    check_condition_B2, estimate_theta, gamma_b, hill_tail_index, log_gamma_b, run_regime_experiment,
    sample_environment, simulate_bpre, simulate_bpre_replicas, small_deviation_experiment, survival_prob_given_env,
    survival_prob_linear_fractional, verify_Tcond, zhat_flatness
)
from walklab.walk_engine import make_family
from walklab.utils import substreams

LATTICE = make_family("lazy-lattice", {"p": 0.25})
STEPS = [1, 0, -1, 1, 1, 0, -1, 0, 1, -1]


@pytest.fixture
def hybrid():
    return EnvironmentModel(LATTICE, OffspringKind.HYBRID)


@pytest.fixture
def geometric():
    return EnvironmentModel(make_family("gaussian"), OffspringKind.GEOMETRIC)


def test_offspring_branches_and_pgf():
    for kind, mean in ((OffspringKind.HYBRID, 0.4), (OffspringKind.HYBRID, 2.5), (OffspringKind.GEOMETRIC, 1.3)):
        law = OffspringLaw(kind, mean)
        assert float(law.pgf(1.0)) == pytest.approx(1.0)
        # f'(1) = M
        h = 1e-6
        assert (float(law.pgf(1.0)) - float(law.pgf(1.0 - h))) / h == pytest.approx(mean, rel=1e-4)
    assert OffspringLaw(OffspringKind.HYBRID, 0.4).branch == "bernoulli"
    assert OffspringLaw(OffspringKind.HYBRID, 1.0).branch == "poisson"


def test_gamma_bernoulli_branch():
    assert OffspringLaw(OffspringKind.HYBRID, 0.5).gamma(1) == pytest.approx(2.0)
    assert OffspringLaw(OffspringKind.HYBRID, 0.5).gamma(2) == 0.0
    assert log_gamma_b(OffspringKind.HYBRID, [-800.0], 2)[0] == -np.inf
    assert log_gamma_b(OffspringKind.HYBRID, [-800.0], 1)[0] == pytest.approx(800.0)
    with pytest.raises(ValueError):
        log_gamma_b(OffspringKind.HYBRID, [0.0], 0)


def test_gamma_poisson_against_direct_sums():
    mean = 1.7
    k = np.arange(0, 200)
    pk = poisson.pmf(k, mean)
    for b in (1, 2, 3, 5):
        tail = k >= b
        expected = np.sum(k[tail] ** 2 * pk[tail]) / np.sum(k[tail] * pk[tail]) ** 2
        assert OffspringLaw(OffspringKind.HYBRID, mean).gamma(b) == pytest.approx(expected, rel=1e-10)


def test_gamma_geometric_against_direct_sums():
    mean = 0.8
    r = mean / (1 + mean)
    k = np.arange(0, 4_000)
    pk = (1 - r) * r ** k
    for b in (1, 2, 3):
        tail = k >= b
        expected = np.sum(k[tail] ** 2 * pk[tail]) / np.sum(k[tail] * pk[tail]) ** 2
        assert OffspringLaw(OffspringKind.GEOMETRIC, mean).gamma(b) == pytest.approx(expected, rel=1e-9)
    assert OffspringLaw(OffspringKind.GEOMETRIC, mean).gamma(1) == pytest.approx(2 + 1 / mean)


def test_hybrid_gamma2_bound():
    means = np.concatenate([np.linspace(0.01, 0.99, 50), np.linspace(1.0, 60.0, 600)])
    values = gamma_b(OffspringKind.HYBRID, means, 2)
    assert values.max() <= HYBRID_GAMMA2_BOUND * (1 + 1e-12)
    assert float(gamma_b(OffspringKind.HYBRID, [1.0], 2)[0]) == pytest.approx(HYBRID_GAMMA2_BOUND)
    assert HYBRID_GAMMA2_BOUND == pytest.approx(4.085, abs=1e-3)


def test_environment_positions(hybrid):
    env = sample_environment(hybrid, 40, substreams(0, 1)[0])
    assert env.n == 40
    assert env.positions[0] == 0.0
    assert np.allclose(np.diff(env.positions), env.steps)
    assert np.allclose(np.log(env.means), env.steps)
    assert len(env.laws()) == 40
    with pytest.raises(ValueError):
        sample_environment(hybrid, 0, substreams(0, 1)[0])


def test_extinction_is_absorbing(hybrid):
    env = Environment.from_steps(hybrid, [-1.0] * 30)
    rng = substreams(4, 1)[0]
    for _ in range(20):
        traj = simulate_bpre(env, 1, rng)
        sizes = traj.sizes
        dead = np.nonzero(sizes == 0)[0]
        if dead.size:
            assert np.all(sizes[dead[0]:] == 0)
            assert not traj.survived
    with pytest.raises(ValueError):
        simulate_bpre(env, 0, rng)


def test_conditional_mean_given_environment(hybrid):
    env = Environment.from_steps(hybrid, STEPS)
    sizes, saturated = simulate_bpre_replicas(env, 1, 20_000, substreams(6, 1)[0])
    assert not saturated.any()
    zhat = sizes[:, -1] * math.exp(-env.positions[-1])
    assert abs(zhat.mean() - 1.0) <= 4 * zhat.std(ddof=1) / math.sqrt(zhat.size)


def test_poisson_generation_law(hybrid):
    env = Environment.from_steps(hybrid, [math.log(2.0)])
    sizes, _ = simulate_bpre_replicas(env, 1, 100_000, substreams(7, 1)[0])
    counts = np.bincount(sizes[:, 1].astype(np.int64), minlength=9)
    observed = np.append(counts[:8], counts[8:].sum())
    expected = np.append(poisson.pmf(np.arange(8), 2.0), poisson.sf(7, 2.0)) * sizes.shape[0]
    assert chisquare(observed, expected).pvalue > 1e-3


def test_population_cap(hybrid):
    env = Environment.from_steps(hybrid, [3.0] * 12)
    traj = simulate_bpre(env, 1, substreams(1, 1)[0], cap=1e4)
    assert traj.saturated_at is not None
    assert traj.sizes[-1] > 1e4
    with pytest.raises(PopulationOverflow):
        simulate_bpre(env, 1, substreams(1, 1)[0], cap=1e4, on_overflow="raise")


def test_survival_of_bernoulli_environment(hybrid):
    steps = [-0.5, -1.0, -0.2, -0.3]
    env = Environment.from_steps(hybrid, steps)
    assert survival_prob_given_env(env, 1) == pytest.approx(math.exp(sum(steps)), rel=1e-12)
    assert survival_prob_given_env(env, 3) == pytest.approx(1 - (1 - math.exp(sum(steps))) ** 3, rel=1e-12)


def test_survival_horizons(hybrid):
    env = Environment.from_steps(hybrid, STEPS)
    assert survival_prob_given_env(env, 1, horizon=0) == 1.0
    values = [survival_prob_given_env(env, 1, horizon=h) for h in range(env.n + 1)]
    assert np.all(np.diff(values) <= 1e-15)
    assert survival_prob_given_env(env, 5) >= survival_prob_given_env(env, 1)
    with pytest.raises(ValueError):
        survival_prob_given_env(env, 1, horizon=env.n + 1)


def test_linear_fractional_closed_form(geometric):
    env = sample_environment(geometric, 60, substreams(2, 1)[0])
    for horizon in (1, 10, 60):
        exact = survival_prob_linear_fractional(env, horizon)
        assert survival_prob_given_env(env, 1, horizon) == pytest.approx(exact, rel=1e-10)


def test_linear_fractional_needs_geometric(hybrid):
    with pytest.raises(BadFamilyParams):
        survival_prob_linear_fractional(Environment.from_steps(hybrid, STEPS))


def test_condition_b2_verdicts():
    pareto = make_family("two-sided-pareto", {"alpha": 1.5})
    report = check_condition_B2(EnvironmentModel(LATTICE, OffspringKind.HYBRID), b=2, budget=20_000, seed=1)
    assert report.verdict == "PASS"
    assert report.sup_gamma <= HYBRID_GAMMA2_BOUND * (1 + 1e-9)
    assert report.tail_index == math.inf
    assert not report.mismatch
    heavy_hybrid = check_condition_B2(EnvironmentModel(pareto, OffspringKind.HYBRID), b=2, budget=20_000)
    assert heavy_hybrid.verdict == heavy_hybrid.empirical_verdict == "PASS"
    gaussian = check_condition_B2(EnvironmentModel(make_family("gaussian"), OffspringKind.GEOMETRIC),
                                  b=1, budget=100_000, seed=2)
    assert gaussian.verdict == "PASS"
    assert gaussian.stabilized
    assert not gaussian.mismatch
    assert gaussian.budgets == [25_000, 50_000, 100_000]
    with pytest.raises(ValueError):
        check_condition_B2(EnvironmentModel(LATTICE), b=0)


@pytest.mark.parametrize("seed", [1, 2, 3, 4])
def test_condition_b2_fails_on_heavy_left_tail(seed):
    model = EnvironmentModel(make_family("two-sided-pareto", {"alpha": 1.5}), OffspringKind.GEOMETRIC)
    with warnings.catch_warnings():
        warnings.simplefilter("error", RuntimeWarning)
        report = check_condition_B2(model, b=1, budget=400_000, seed=seed)
    assert report.verdict == "FAIL"
    assert not report.stabilized
    assert report.empirical_verdict == "FAIL"
    assert not report.mismatch
    # log+ gamma(1) follows the negative part of X, so its tail index is alpha
    assert report.tail_index == pytest.approx(1.5, abs=0.08)
    assert report.tail_index < report.order
    assert math.isfinite(report.log_sup_gamma)


def test_hill_tail_index():
    u = substreams(7, 1)[0].random(200_000)
    index, stderr = hill_tail_index((1.0 - u) ** -0.5)
    assert index == pytest.approx(2.0, abs=5 * stderr)
    assert stderr == pytest.approx(2.0 / math.sqrt(4_000), rel=0.1)
    assert hill_tail_index(np.r_[np.full(1_000, 2.0), np.linspace(0.5, 1.0, 1_000)])[0] == math.inf
    assert hill_tail_index(np.ones(10))[0] == math.inf
    assert hill_tail_index(np.r_[-np.inf, np.zeros(100)])[0] == math.inf


@pytest.fixture(scope="module")
def up_environments():
    model = EnvironmentModel(LATTICE, OffspringKind.HYBRID)
    steps, weights = _up_environments(model, 200, 300, substreams(3, 1)[0])
    return model, steps, weights


def test_up_environments_stay_nonnegative(up_environments):
    _, steps, weights = up_environments
    assert steps.shape == (300, 200)
    assert np.all(np.cumsum(steps, axis=1) >= 0)
    assert np.all(weights == 1.0)


def test_theta_truncations_are_monotone(up_environments):
    model, steps, weights = up_environments
    theta = estimate_theta(model, J=10, K=20, horizon=50, budget=2_000, seed=1, up_steps=steps, up_weights=weights)
    assert theta.value > 0
    assert theta.value >= theta.first_term > 0
    assert theta.at(10, 20) == pytest.approx(theta.value)
    assert theta.at(5, 20) <= theta.at(10, 20)
    assert theta.at(10, 10) <= theta.at(10, 20)
    assert theta.horizon_delta >= 0
    assert np.all(np.diff(theta.h_values[1:]) >= -1e-12)


def test_theta_decreases_with_horizon(up_environments):
    model, steps, weights = up_environments
    short = estimate_theta(model, J=10, K=20, horizon=50, budget=2_000, seed=1, up_steps=steps, up_weights=weights)
    long = estimate_theta(model, J=10, K=20, horizon=100, budget=2_000, seed=1, up_steps=steps, up_weights=weights)
    assert long.value <= short.value


def test_theta_weak_convention_counts_more_minima(up_environments):
    model, steps, weights = up_environments
    strict = estimate_theta(model, J=10, K=20, horizon=50, budget=2_000, seed=1, up_steps=steps, up_weights=weights)
    weak = estimate_theta(model, J=10, K=20, horizon=50, budget=2_000, seed=1, up_steps=steps, up_weights=weights,
                          convention="weak")
    assert weak.value >= strict.value


def test_theta_budget_floor(up_environments):
    model, steps, weights = up_environments
    with pytest.raises(BudgetTooSmall):
        estimate_theta(model, budget=5, up_steps=steps, up_weights=weights)
    with pytest.raises(ValueError):
        estimate_theta(model, horizon=500, budget=100, up_steps=steps, up_weights=weights)


def test_regime_experiment_report(hybrid):
    report = run_regime_experiment(hybrid, 200, 20, 2, regime=1, budget=800, seed=5, min_accepted=50)
    assert report.accepted >= 50
    assert report.accepted + report.saturated <= report.budget
    assert np.all((report.empirical >= 0) & (report.empirical <= 1))
    assert np.all(np.diff(report.empirical) >= 0)
    assert np.all(np.diff(report.reference) >= -1e-9)
    assert 0 <= report.ks <= 1
    assert 0 < report.frequency < 1
    assert math.isnan(report.predicted_frequency)
    payload = report.to_dict()
    assert payload['regime'] == 1 and len(payload['z_grid']) == report.z_grid.size


def test_regime_experiment_guards(hybrid):
    with pytest.raises(RegimeMismatch):
        run_regime_experiment(hybrid, 100, 50, 2, regime=1, budget=100)
    with pytest.raises(TooFewAccepted):
        run_regime_experiment(hybrid, 100, 10, 2, regime=1, budget=20, min_accepted=10**6)
    with pytest.raises(ValueError):
        run_regime_experiment(hybrid, 100, 10, 2, regime=1, budget=20, sampler="importance")


def test_small_deviation_report(hybrid):
    with pytest.raises(RegimeMismatch):
        small_deviation_experiment(hybrid, 300, 5, budget=100)
    report = small_deviation_experiment(hybrid, 300, 3, budget=400, seed=2, min_accepted=20)
    assert report.regime == 0
    assert report.reference[-1] == 1.0
    mid = np.argmin(np.abs(report.z_grid - 0.5))
    assert report.reference[mid] == pytest.approx(report.z_grid[mid] ** 2)
    assert np.all(np.diff(report.empirical) >= 0)


def test_tcond_quantities(hybrid):
    result = verify_Tcond(hybrid, 60, 10, 2, 1.0, budget=400, up_budget=200, horizon=200, seed=3)
    assert 0 <= result.lhs <= result.conditional_probability <= 1
    assert 0 < result.up_survival <= 1
    assert result.rhs == pytest.approx(result.limit_value * result.up_survival)
    with pytest.raises(ValueError):
        verify_Tcond(hybrid, 60, 10, 2, 1.0, k=0)


def test_normalized_population_flattens(hybrid):
    short = zhat_flatness(hybrid, 200, 20, 2, budget=300, seed=1)
    long = zhat_flatness(hybrid, 600, 60, 2, budget=300, seed=1)
    assert long.iqr < short.iqr
    assert short.quartiles[0] <= short.quartiles[1] <= short.quartiles[2]
    with pytest.raises(ValueError):
        zhat_flatness(hybrid, 100, 50, 2, budget=10)


def test_log_gamma_hybrid_stays_finite_for_huge_means():
    with warnings.catch_warnings():
        warnings.simplefilter("error", RuntimeWarning)
        values = log_gamma_b(OffspringKind.HYBRID, [800.0, 1e4], 2)
    assert values == pytest.approx([0.0, 0.0], abs=1e-12)
