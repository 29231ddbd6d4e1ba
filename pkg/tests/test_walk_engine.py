import numpy as np
import pytest

from walklab.base_experiment import BadFamilyParams, BudgetTooSmall, DependencyMissing, HorizonTooLarge, ImpossibleEvent
from walklab.harness import chi_square_homogeneity
from walklab.limit_laws import LimitLawEval, local_limit_prediction
from walklab.walk_engine import (
    EndSpec, FamilyKind, PairedEstimate, RenewalKind, WalkPath, backward_survival, cache_key, cached_kernel,
    dual_path, dual_positions, estimate_renewal, estimate_zeta, exact_kernel, forward_distribution,
    h_transform_horizons, h_transform_identity, ladder_counts, ladder_stats, ladder_tail, lattice_renewal_exact,
    make_family, pin_scale_by_cf, prop4h_constant, prop4h_violations, renewal_scaling, sample_conditioned_batch,
    sample_h_transform_batch, scaling_constants, self_normalised, simulate_paths
)
from walklab.utils import substreams

P = 0.25


@pytest.fixture
def lattice():
    return make_family("lazy-lattice", {"p": P})


def test_make_family_rejects_bad_parameters():
    with pytest.raises(BadFamilyParams):
        make_family("lazy-lattice", {"p": 0.5})
    with pytest.raises(BadFamilyParams):
        make_family("gaussian", {"sigma": 0})
    with pytest.raises(BadFamilyParams):
        make_family("two-sided-pareto", {"alpha": 2.5})
    with pytest.raises(BadFamilyParams):
        make_family("two-sided-pareto", {"alpha": 1.0, "balance": 0.7})
    with pytest.raises(BadFamilyParams):
        make_family("levy-flight")


def test_family_targets(lattice):
    assert lattice.kind == FamilyKind.LAZY_LATTICE
    assert lattice.stable_target.alpha == 2
    assert lattice.a_coeff == pytest.approx(np.sqrt(2 * P))
    pareto = make_family("two-sided-pareto", {"alpha": 1.5, "balance": 0.75})
    assert pareto.stable_target.beta == pytest.approx(0.5)
    assert pareto.reflected().stable_target.rho == pytest.approx(1 - pareto.stable_target.rho)
    assert pareto.centering == pytest.approx(0.5 * 1.5 / 0.5)


def test_scaling_constants(lattice):
    a_n, b_n = scaling_constants(lattice, 800)
    assert a_n == pytest.approx(np.sqrt(2 * P * 800))
    assert b_n == pytest.approx(1 / (800 * a_n))
    with pytest.raises(ValueError):
        scaling_constants(lattice, 0)


def test_cf_matching_recovers_gaussian_norming():
    family = make_family("gaussian", {"sigma": 1.0})
    pinned = pin_scale_by_cf(family, n=100, budget=20_000, seed=3)
    assert pinned.a_coeff == pytest.approx(1.0, rel=0.05)
    assert pinned.norming.startswith("cf-matched")
    assert family.norming == "analytic"


def test_paths_start_at_x0(lattice):
    paths = simulate_paths(lattice, 30, 50, substreams(0, 1)[0], x0=4)
    assert paths.shape == (50, 31)
    assert np.all(paths[:, 0] == 4)
    assert set(np.unique(np.diff(paths, axis=1))) <= {-1, 0, 1}


def test_minima_and_dual_path():
    path = WalkPath.from_positions([0, 1, 1, 2, 1, 3])
    assert list(path.minima) == [1, 1, 1, 1, 1]
    assert list(path.minima_star) == [0, 0, 0, 0, 0, 0]
    assert path.stays_nonnegative()
    assert list(dual_path(path).positions) == [0, 2, 1, 2, 2, 3]


def test_ladder_epochs_weak_and_strict():
    stats = ladder_stats(WalkPath.from_positions([0, 1, 1, 2, 1, 3]))
    assert list(stats.weak_asc.epochs) == [1, 2, 3, 5]
    assert list(stats.weak_asc.heights) == [1, 1, 2, 3]
    assert list(stats.strict_asc.epochs) == [1, 3, 5]
    assert stats.weak_desc.epochs.size == 0
    assert stats.strict_desc.epochs.size == 0


def test_ladder_epochs_are_relative_to_start():
    stats = ladder_stats(WalkPath.from_positions([5, 4, 4, 6]))
    assert list(stats.weak_desc.epochs) == [1, 2]
    assert list(stats.strict_desc.epochs) == [1]
    assert list(stats.weak_asc.epochs) == [3]


def test_ladder_counts_match_ladder_stats():
    positions = np.array([[0, 1, 1, 2, 1, 3], [5, 4, 4, 6, 6, 6]])
    for row in positions:
        stats = ladder_stats(WalkPath.from_positions(row))
        counts = [stats.strict_asc.epochs.size, stats.weak_asc.epochs.size,
                  stats.strict_desc.epochs.size, stats.weak_desc.epochs.size]
        got = [ladder_counts(row[None, :], 1, True)[0], ladder_counts(row[None, :], 1, False)[0],
               ladder_counts(row[None, :], -1, True)[0], ladder_counts(row[None, :], -1, False)[0]]
        assert got == counts
    dual = dual_positions(positions)
    assert dual[0].tolist() == [0, 2, 1, 2, 2, 3]
    assert np.all(dual[:, -1] == positions[:, -1] - positions[:, 0])
    assert list(ladder_counts(dual[:1], 1, True)) == [2]


def test_walk_and_dual_have_the_same_ladder_counts(lattice):
    first, second = substreams(11, 2)
    direct = simulate_paths(lattice, 100, 10_000, first)
    dual = dual_positions(simulate_paths(lattice, 100, 10_000, second))
    for sign, strict in ((1, True), (-1, False)):
        a, b = ladder_counts(direct, sign, strict), ladder_counts(dual, sign, strict)
        top = int(max(a.max(), b.max())) + 1
        p = chi_square_homogeneity(np.bincount(a, minlength=top), np.bincount(b, minlength=top), pool_below=10)
        assert p > 1e-3


def test_zeta_of_lazy_lattice(lattice):
    est = estimate_zeta(lattice)
    assert est.value == pytest.approx(1 - P, abs=1e-12)
    assert est.truncation_bound == 0.0
    assert estimate_zeta(make_family("gaussian")).value == 0.0


def test_zeta_monte_carlo(lattice):
    est = estimate_zeta(lattice, budget=20_000, horizon=200, method="mc", seed=3)
    assert abs(est.value - (1 - P)) <= 4 * est.stderr + est.truncation_bound


def test_lattice_renewal_closed_forms(lattice):
    heights = np.arange(0, 12)
    v_plus = lattice_renewal_exact(lattice, RenewalKind.V_PLUS, heights)
    v_hat = lattice_renewal_exact(lattice, RenewalKind.VHAT_PLUS, heights)
    assert v_plus.zeta == pytest.approx(1 - P)
    assert np.allclose(v_plus.values, (heights + 1) / P)
    assert np.allclose(v_hat.values, heights + 1)
    assert np.allclose(v_hat.values, (1 - v_plus.zeta) * v_plus.values)
    assert float(v_plus(2.5)) == pytest.approx(3 / P)


def test_v_minus_is_harmonic_for_the_killed_walk(lattice):
    v = lattice_renewal_exact(lattice, RenewalKind.V_MINUS, max_height=40)
    for x in range(0, 30):
        step = sum(p * float(v(x + o)) for o, p in zip(lattice.offsets, lattice.probs) if x + o >= 0)
        assert step == pytest.approx(float(v(x)), rel=1e-12)


def test_monte_carlo_renewal_for_gaussian():
    family = make_family("gaussian")
    table = estimate_renewal(family, RenewalKind.V_PLUS, [0.0, 0.5, 1.0, 2.0], budget=400, seed=4, horizon=2_000)
    assert table.method == "mc"
    assert table.values[0] == 1.0
    assert np.all(np.diff(table.values) > 0)
    with pytest.raises(ValueError):
        estimate_renewal(family, RenewalKind.V_PLUS, [1.0, 0.5])


def test_renewal_scaling_lattice(lattice):
    scaling = renewal_scaling(lattice, [100, 1_000, 10_000, 100_000])
    assert scaling.method == "exact"
    assert scaling.v_plus[0] == pytest.approx(32.0)
    assert scaling.slope == pytest.approx(0.5, abs=0.05)
    products = renewal_scaling(lattice, [1_000, 4_000, 16_000])
    assert products.products[-1] == pytest.approx(8.1)
    assert products.product_spread < 0.15
    with pytest.raises(ValueError):
        renewal_scaling(lattice, [10, 10])


def test_ladder_tail_lattice(lattice):
    tail = ladder_tail(lattice, 50, sign=-1)
    assert tail.at(0) == 1.0
    # weak descending epoch: S_1 > 0 is required, i.e. an up-step
    assert tail.at(1) == pytest.approx(P)
    assert np.all(np.diff(tail.probs) <= 0)


def test_kernel_first_rows(lattice):
    kernel = exact_kernel(lattice, 5, 0)
    assert kernel.q(0, 0) == 1.0
    assert np.allclose(kernel.tables[1], [1 - 2 * P, P])
    assert kernel.q(1, 7) == 0.0
    assert kernel.row_sum(1) == pytest.approx(1 - P)


def test_kernel_row_sums_match_backward_survival(lattice):
    N = 40
    survival = backward_survival(lattice, N)
    for x in (0, 3, 7):
        assert exact_kernel(lattice, N, x).row_sum(N) == pytest.approx(survival[x], rel=1e-12)
        row, lost = forward_distribution(lattice, N, x)
        assert lost == 0.0
        assert row.sum() == pytest.approx(survival[x], rel=1e-12)


def test_kernel_cell_limit(lattice):
    with pytest.raises(HorizonTooLarge):
        exact_kernel(lattice, 1_000, 0, max_cells=1_000)
    with pytest.raises(BadFamilyParams):
        exact_kernel(make_family("gaussian"), 10, 0)


def test_conditioned_samples_satisfy_the_event(lattice):
    rng = substreams(2, 1)[0]
    for mode in ("dp_backward", "rejection"):
        paths = sample_conditioned_batch(lattice, 30, 1, EndSpec.at_most(3), mode, rng, 200)
        assert paths.shape == (200, 31)
        assert np.all(paths[:, 0] == 1)
        assert np.all(paths[:, 1:] >= 0)
        assert np.all(paths[:, -1] <= 3)
        assert set(np.unique(np.diff(paths, axis=1))) <= {-1, 0, 1}


def test_dp_and_rejection_agree(lattice):
    rng_a, rng_b = substreams(8, 2)
    N = 20
    dp = sample_conditioned_batch(lattice, N, 0, EndSpec.free(), "dp_backward", rng_a, 4_000)
    rej = sample_conditioned_batch(lattice, N, 0, EndSpec.free(), "rejection", rng_b, 4_000)
    for k in (N // 2, N):
        bins = np.arange(N + 2)
        counts_a = np.bincount(dp[:, k], minlength=bins.size)
        counts_b = np.bincount(rej[:, k], minlength=bins.size)
        assert chi_square_homogeneity(counts_a, counts_b) > 1e-3


def test_impossible_end_condition(lattice):
    rng = substreams(0, 1)[0]
    with pytest.raises(ImpossibleEvent):
        sample_conditioned_batch(lattice, 5, 0, EndSpec.exact(9), "dp_backward", rng, 1)
    with pytest.raises(ImpossibleEvent):
        sample_conditioned_batch(make_family("gaussian"), 5, 0.0, EndSpec.exact(1.0), "rejection", rng, 1)


def test_h_transform_chain(lattice):
    renewal = lattice_renewal_exact(lattice, RenewalKind.V_MINUS, max_height=61)
    paths, weights = sample_h_transform_batch(lattice, 60, 0, substreams(1, 1)[0], renewal, 300, mode="chain")
    assert paths.shape == (300, 61)
    assert np.all(paths >= 0)
    assert np.all(weights == 1.0)
    # the conditioned walk drifts away from zero
    assert paths[:, -1].mean() > 3


def test_h_transform_chain_needs_exact_table():
    family = make_family("gaussian")
    table = estimate_renewal(family, RenewalKind.V_MINUS, [0.0, 1.0], budget=50, seed=0, horizon=500,
                             max_rel_error=1.0)
    with pytest.raises(BadFamilyParams):
        sample_h_transform_batch(family, 10, 0.0, substreams(0, 1)[0], table, 5, mode="chain")


def test_self_normalised_mean():
    mean, se = self_normalised([1.0, 0.0], [3.0, 1.0])
    assert mean == pytest.approx(0.75)
    assert se == pytest.approx(np.sqrt(0.75 ** 2 + 0.75 ** 2) / 4)
    with pytest.raises(BudgetTooSmall):
        self_normalised([1.0, 2.0], [0.0, 0.0])
    assert PairedEstimate(1.0, 0.3, 0.5, 0.4).z_score == pytest.approx(1.0)
    assert PairedEstimate(0.2, 0.0, 0.2, 0.0).z_score == 0.0


def test_h_transform_matches_direct_weighting(lattice):
    renewal = lattice_renewal_exact(lattice, RenewalKind.V_MINUS, max_height=41)
    est = h_transform_identity(lattice, 40, 0, renewal, 20_000, substreams(3, 1)[0])
    assert 0 < est.first < 1
    assert est.z_score < 4


def test_h_transform_horizons_agree(lattice):
    renewal = lattice_renewal_exact(lattice, RenewalKind.V_MINUS, max_height=81)
    est = h_transform_horizons(lattice, 20, 0, renewal, 5_000, substreams(4, 1)[0])
    assert 0 < est.first < 1 and 0 < est.second < 1
    assert est.z_score < 4
    with pytest.raises(ValueError):
        h_transform_horizons(lattice, 0, 0, renewal, 10, substreams(4, 1)[0])


def test_kernel_bound_constant(lattice):
    heights = list(range(0, 11))
    fit = prop4h_constant(lattice, 400, heights, heights)
    assert 0 < fit.constant < np.inf
    assert 1 <= fit.argmax[0] <= 400
    assert prop4h_violations(lattice, fit.constant, 400, heights, heights) == 0
    assert prop4h_violations(lattice, 0.5 * fit.constant, 400, heights, heights) > 0


def test_local_limit_small_heights(lattice):
    n = 2_000
    kernel = exact_kernel(lattice, n, 0)
    ev = LimitLawEval.brownian()
    for y in (0, 1, 2):
        predicted = local_limit_prediction("XYsmall", lattice, n, 0, y, ev)
        assert kernel.q(n, y) == pytest.approx(predicted, rel=0.15)


def test_kernel_cache_roundtrip_and_tamper(lattice, tmp_path):
    directory = str(tmp_path)
    kernel, path = cached_kernel(directory, lattice, 25, 2)
    again, path_again = cached_kernel(directory, lattice, 25, 2)
    assert path == path_again
    assert again.digest() == kernel.digest()
    assert cache_key(lattice, 25, 2) in path

    with np.load(path) as data:
        flat, lengths = data['flat'].copy(), data['lengths']
        digest, key = data['digest'], data['key']
    flat[3] += 1e-3
    np.savez_compressed(path, flat=flat, lengths=lengths, digest=digest, key=key)
    with pytest.raises(DependencyMissing):
        cached_kernel(directory, lattice, 25, 2)


def test_no_cache_directory_builds_in_memory(lattice):
    kernel, path = cached_kernel(None, lattice, 5, 0)
    assert path is None
    assert kernel.N == 5
