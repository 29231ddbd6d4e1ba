import math

import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.stats import norm

from walklab.base_experiment import InadmissiblePair, NonpositiveScale
from walklab.stable_core import (
    char_function, closed_form_rho, density_table, empirical_char_function, is_admissible, make_params,
    positivity_parameter, sample_stable, stable_cdf, stable_density
)
from walklab.utils import substreams


def test_admissible_set():
    assert is_admissible(1.5, 0.5)
    assert is_admissible(0.7, -0.9)
    assert is_admissible(2.0, 0.0)
    assert is_admissible(1.0, 0.0)
    assert not is_admissible(1.0, 0.3)
    assert not is_admissible(2.0, 0.1)
    assert not is_admissible(1.5, 1.0)


def test_make_params_rejects_bad_input():
    with pytest.raises(InadmissiblePair):
        make_params(1.0, 0.5, 1.0)
    with pytest.raises(NonpositiveScale):
        make_params(1.5, 0.0, 0.0)
    with pytest.raises(NonpositiveScale):
        make_params(1.5, 0.0, -1.0)


def test_symmetric_laws_have_rho_one_half():
    assert closed_form_rho(1.3, 0.0) == 0.5
    assert positivity_parameter(make_params(1.3, 0.0, 1.0)).rho == 0.5


def test_rho_closed_form_value():
    expected = 0.5 + math.atan(0.5 * math.tan(0.75 * math.pi)) / (1.5 * math.pi)
    assert closed_form_rho(1.5, 0.5) == pytest.approx(expected, abs=1e-15)
    assert closed_form_rho(1.5, 0.5) == pytest.approx(0.4016, abs=1e-3)


def test_rho_monte_carlo_agrees_with_closed_form():
    est = positivity_parameter(make_params(1.5, 0.5, 1.0), budget=400_000, seed=11, partitions=4)
    assert abs(est.rho - est.closed_form) <= max(4 * est.stderr, 1e-3)
    assert est.draws == 400_000


def test_negated_params_flip_rho():
    params = make_params(1.5, 0.5, 1.0)
    neg = params.negated()
    assert neg.beta == -0.5
    assert neg.rho == pytest.approx(1.0 - params.rho)
    assert neg.rho == pytest.approx(closed_form_rho(1.5, -0.5))


def test_char_function_at_zero_is_one():
    assert char_function(make_params(0.8, 0.4, 2.0), 0.0) == pytest.approx(1.0)


def test_gaussian_density_and_cdf():
    # c = 1/2 gives the standard normal
    params = make_params(2.0, 0.0, 0.5)
    for x in (-3.0, -1.0, 0.0, 0.4, 2.5):
        assert stable_density(params, x) == pytest.approx(norm.pdf(x), abs=1e-6)
        assert stable_cdf(params, x) == pytest.approx(norm.cdf(x), abs=1e-6)


def test_cauchy_closed_forms():
    params = make_params(1.0, 0.0, 1.0)
    for x in (-20.0, -2.0, 0.0, 0.5, 3.0, 60.0):
        assert stable_density(params, x) == pytest.approx(1.0 / (math.pi * (1 + x * x)), abs=1e-6)
        assert stable_cdf(params, x) == pytest.approx(0.5 + math.atan(x) / math.pi, abs=1e-6)


def test_symmetric_cdf_at_zero_is_one_half():
    assert stable_cdf(make_params(1.2, 0.0, 1.0), 0.0) == pytest.approx(0.5, abs=1e-12)


def test_skewed_cdf_at_zero_is_one_minus_rho():
    params = make_params(1.5, 0.5, 1.0)
    assert stable_cdf(params, 0.0) == pytest.approx(1.0 - params.rho, abs=1e-6)


def test_density_table_mass_and_interpolation():
    params = make_params(2.0, 0.0, 0.5)
    table = density_table(params, np.linspace(-10, 10, 401))
    assert table.mass() == pytest.approx(1.0, abs=1e-6)
    assert table(0.0) == pytest.approx(norm.pdf(0.0), abs=1e-6)
    assert table(50.0) == 0.0


def test_density_table_requires_increasing_grid():
    with pytest.raises(ValueError):
        density_table(make_params(2.0, 0.0, 0.5), [0.0, 0.0, 1.0])


def test_cdf_matches_integrated_density():
    params = make_params(1.5, 0.5, 1.0)
    grid = np.linspace(-1.0, 2.0, 301)
    table = density_table(params, grid)
    increment = stable_cdf(params, 2.0) - stable_cdf(params, -1.0)
    assert increment == pytest.approx(trapezoid(table.values, grid), abs=1e-4)


def test_sampler_char_function():
    params = make_params(1.5, 0.5, 1.0)
    rng = substreams(5, 1)[0]
    samples = sample_stable(params, rng, 200_000)
    w = np.array([-2.0, -0.5, 0.25, 1.0, 3.0])
    diff = np.abs(empirical_char_function(samples, w) - char_function(params, w))
    assert diff.max() <= 0.01


def test_sampler_cauchy_quartiles():
    params = make_params(1.0, 0.0, 1.0)
    samples = sample_stable(params, substreams(9, 1)[0], 100_000)
    q1, q3 = np.quantile(samples, [0.25, 0.75])
    assert q1 == pytest.approx(-1.0, abs=0.03)
    assert q3 == pytest.approx(1.0, abs=0.03)


def test_sampler_is_deterministic_per_seed():
    params = make_params(0.7, -0.3, 2.0)
    a = sample_stable(params, substreams(1, 2)[1], 100)
    b = sample_stable(params, substreams(1, 2)[1], 100)
    assert np.array_equal(a, b)
