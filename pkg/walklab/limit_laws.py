#!/usr/bin/env python3
#! -*- coding: utf-8 -*-
#
# WalkLab
# Copyright (C) 2024-2025 ScooterTeam
#
# This work is licensed under the Creative Commons Attribution-NonCommercial-ShareAlike 4.0 International License.
# To view a copy of this license, visit http://creativecommons.org/licenses/by-nc-sa/4.0/
# or send a letter to Creative Commons, PO Box 1866, Mountain View, CA 94042, USA.
#
# You are free to:
# - Share — copy and redistribute the material in any medium or format
# - Adapt — remix, transform, and build upon the material
#
# Under the following terms:
# - Attribution — You must give appropriate credit, provide a link to the license, and indicate if changes were made.
# - NonCommercial — You may not use the material for commercial purposes.
# - ShareAlike — If you remix, transform, or build upon the material, you must distribute your contributions under the same license as the original.
#

"""Meander densities, bridge positivity, limit constants and the A1/A2/B conditional limit laws."""

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np
from scipy.integrate import IntegrationWarning, cumulative_trapezoid, dblquad, quad, trapezoid
from scipy.interpolate import RegularGridInterpolator
from scipy.stats import gaussian_kde, norm

from walklab.base_experiment import (
    BudgetTooSmall, DependencyMissing, EmptyBin, InconsistentEstimates,
    QuadratureFailure, RegimeMismatch
)
from walklab.stable_core import StableParams, density_table, make_params, stable_cdf
from walklab.utils import split_budget, substreams, write_csv
from walklab.walk_engine import (
    CHUNK_CELLS, EndSpec, IncrementFamily, RenewalKind, RenewalTable, backward_survival,
    estimate_renewal, forward_distribution, ladder_tail, lattice_renewal_exact,
    sample_conditioned_batch, scaling_constants
)

DEFAULT_QUAD_TOL = 1e-8
# roughness of the Gaussian kernel, int K^2
KERNEL_ROUGHNESS = 1.0 / (2.0 * math.sqrt(math.pi))


class HalfLineKde(gaussian_kde):
    """Gaussian KDE on [0, inf) with the mass leaking below 0 reflected back."""

    def evaluate(self, points):
        points = np.atleast_1d(points)
        return super().evaluate(points) + super().evaluate(-points)

    __call__ = evaluate

    @property
    def bandwidth(self) -> float:
        return float(np.sqrt(self.covariance[0, 0]))


# --- meander --------------------------------------------------------------------------------


@dataclass
class MeanderTable:
    sign: int
    params: StableParams
    grid: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    atoms: np.ndarray
    weights: np.ndarray
    provenance: Dict = field(default_factory=dict)

    def __call__(self, w):
        return np.interp(w, self.grid, self.values, left=0.0, right=0.0)

    def mass(self) -> float:
        return float(trapezoid(self.values, self.grid))

    def moment(self, power: float):
        """(E[W^power], standard error) under the meander law, from the underlying atoms."""
        vals = self.atoms ** power
        mean = float(np.sum(self.weights * vals))
        if self.provenance.get('method') == 'dp':
            return mean, 0.0
        var = float(np.sum(self.weights * (vals - mean) ** 2))
        return mean, math.sqrt(var / max(self.atoms.size, 1))

    def to_csv(self, path: str) -> str:
        return write_csv(path, ["z", "value", "stderr"], zip(self.grid, self.values, self.stderr))


def estimate_meander_density(family: IncrementFamily, sign: int, grid, n_steps: int = 1_000, budget: int = 4_000,
                             seed: int = 0, partitions: int = 1, method: str = "auto",
                             bandwidth: Optional[float] = None, norming_factor: float = 1.0,
                             progress=None) -> MeanderTable:
    """
    Time-one meander density of the limit process from S_n / a_n given L_n >= 0.
    sign=-1 works with the reflected walk. Lattice families use the exact
    forward DP, others rejection sampling smoothed by a reflected KDE.
    """
    grid = np.asarray(grid, dtype=float)
    walk = family if sign > 0 else family.reflected()
    a_n, _ = scaling_constants(walk, n_steps)
    a_n *= norming_factor
    params = walk.stable_target

    if method == "auto":
        method = "dp" if walk.lattice else "rejection"

    if method == "dp":
        row, _ = forward_distribution(walk, n_steps, 0)
        pmf = row / row.sum()
        atoms = np.arange(row.size) / a_n
        values = np.interp(grid, atoms, pmf * a_n, left=0.0, right=0.0)
        return MeanderTable(
            sign, params, grid, values, np.zeros_like(values), atoms, pmf,
            dict(family=family.key(), norming=family.norming, n_steps=n_steps, samples=0,
                 bandwidth=1.0 / a_n, method="dp", norming_factor=norming_factor)
        )

    samples = []
    streams = substreams(seed, partitions)
    for i, (rng, part) in enumerate(zip(streams, split_budget(budget, partitions))):
        if part:
            paths = sample_conditioned_batch(walk, n_steps, 0.0, EndSpec.free(), "rejection", rng, part)
            samples.append(paths[:, -1] / a_n)
        if progress:
            progress(i + 1, partitions)
    samples = np.concatenate(samples) if samples else np.zeros(0)
    if samples.size < 100:
        raise BudgetTooSmall(f"Meander estimate needs at least 100 conditioned walks, got {samples.size}")

    kde = HalfLineKde(samples, bw_method=bandwidth if bandwidth is not None else 'silverman')
    values = kde(grid)
    stderr = np.sqrt(values * KERNEL_ROUGHNESS / (samples.size * kde.bandwidth))
    return MeanderTable(
        sign, params, grid, values, stderr, samples, np.full(samples.size, 1.0 / samples.size),
        dict(family=family.key(), norming=family.norming, n_steps=n_steps, samples=int(samples.size),
             bandwidth=kde.bandwidth, method="rejection", seed=seed, norming_factor=norming_factor)
    )


# --- bridge positivity ----------------------------------------------------------------------


@dataclass
class BridgePositivityTable:
    params: StableParams
    a_values: np.ndarray
    b_values: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    binning_bias: np.ndarray
    provenance: Dict = field(default_factory=dict)

    def __post_init__(self):
        self._interp = None
        if self.a_values.size > 1 and self.b_values.size > 1:
            self._interp = RegularGridInterpolator((self.a_values, self.b_values), self.values)

    def __call__(self, a, b):
        if self._interp is None:
            raise DependencyMissing("Bridge positivity interpolation needs at least a 2x2 grid")
        a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
        a = np.clip(a, self.a_values[0], self.a_values[-1])
        b = np.clip(b, self.b_values[0], self.b_values[-1])
        out = self._interp(np.stack([a.ravel(), b.ravel()], axis=-1))
        return np.clip(out, 0.0, 1.0).reshape(a.shape)

    def to_csv(self, path: str) -> str:
        rows = ((a, b, self.values[i, j], self.stderr[i, j], self.binning_bias[i, j])
                for i, a in enumerate(self.a_values) for j, b in enumerate(self.b_values))
        return write_csv(path, ["a", "b", "value", "stderr", "binning_bias"], rows)


def _free_pmf(family: IncrementFamily, n: int):
    """Law of S_n from 0 for a lattice family; index i is height i - n * max down-step."""
    pmf = np.ones(1)
    for _ in range(n):
        pmf = np.convolve(pmf, family.probs)
    return pmf, n * int(-family.offsets.min())


def _endpoint_and_min(family: IncrementFamily, n: int, count: int, rng: np.random.Generator, x0: float):
    ends = np.empty(count)
    mins = np.empty(count)
    rows = max(1, min(count, CHUNK_CELLS // max(n, 1)))
    for start in range(0, count, rows):
        r = min(rows, count - start)
        pos = np.full(r, float(x0))
        low = np.full(r, np.inf)
        block = max(1, CHUNK_CELLS // r)
        remaining = n
        while remaining:
            b = min(block, remaining)
            s = pos[:, None] + np.cumsum(family.sample(rng, (r, b)), axis=1)
            low = np.minimum(low, s.min(axis=1))
            pos = s[:, -1]
            remaining -= b
        ends[start:start + r] = pos
        mins[start:start + r] = low
    return ends, mins


def estimate_bridge_positivity(family: IncrementFamily, a_values, b_values, n_steps: int = 10_000,
                               budget: int = 200_000, bin_width: Optional[float] = None, seed: int = 0,
                               method: str = "auto") -> BridgePositivityTable:
    """
    C(a,b) as P_a(L_n >= 0, S_n / a_n in bin(b)) / P_a(S_n / a_n in bin(b)).
    The bias of the binning is reported as the change when the bin is halved.
    """
    a_values = np.asarray(a_values, dtype=float)
    b_values = np.asarray(b_values, dtype=float)
    params = family.stable_target
    width = bin_width if bin_width is not None else 0.05 * params.sigma
    a_n, _ = scaling_constants(family, n_steps)
    values = np.zeros((a_values.size, b_values.size))
    stderr = np.zeros_like(values)
    bias = np.zeros_like(values)
    if method == "auto":
        method = "dp" if family.lattice else "mc"

    if method == "dp":
        free, shift = _free_pmf(family, n_steps)
        for i, a in enumerate(a_values):
            x = int(round(a * a_n))
            killed, _ = forward_distribution(family, n_steps, x)
            for j, b in enumerate(b_values):
                ratios = []
                for w in (width, width / 2):
                    lo = max(int(math.ceil((b - w / 2) * a_n)), 0)
                    hi = int(math.floor((b + w / 2) * a_n))
                    ys = np.arange(lo, hi + 1)
                    idx = ys - x + shift
                    denom = float(free[idx[(idx >= 0) & (idx < free.size)]].sum())
                    if denom <= 0:
                        raise EmptyBin(f"No endpoint mass near b={b} from a={a} (n={n_steps})")
                    num = float(killed[ys[ys < killed.size]].sum())
                    ratios.append(num / denom)
                values[i, j], bias[i, j] = ratios[0], abs(ratios[0] - ratios[1])
    else:
        rng = substreams(seed, 1)[0]
        for i, a in enumerate(a_values):
            ends, mins = _endpoint_and_min(family, n_steps, budget, rng, a * a_n)
            z = ends / a_n
            for j, b in enumerate(b_values):
                ratios = []
                for w in (width, width / 2):
                    in_bin = np.abs(z - b) <= w / 2
                    hits = int(np.count_nonzero(in_bin))
                    if hits == 0:
                        raise EmptyBin(f"No simulated endpoints near b={b} from a={a}; widen the bin or raise the budget")
                    ratios.append((np.count_nonzero(in_bin & (mins >= 0)) / hits, hits))
                (r, hits), (r2, _) = ratios
                values[i, j], bias[i, j] = r, abs(r - r2)
                stderr[i, j] = math.sqrt(r * (1 - r) / hits)

    return BridgePositivityTable(
        params, a_values, b_values, values, stderr, bias,
        dict(family=family.key(), norming=family.norming, n_steps=n_steps, bin_width=width, method=method,
             budget=budget if method == "mc" else 0, seed=seed)
    )


# --- constants ------------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstantEstimate:
    name: str
    route1: float
    err1: float
    route2: float
    err2: float

    @property
    def value(self) -> float:
        return self.route1

    def discrepancy(self) -> float:
        return abs(self.route1 - self.route2)

    def allowed(self, rel_tol: float) -> float:
        return max(3.0 * math.hypot(self.err1, self.err2), rel_tol * abs(0.5 * (self.route1 + self.route2)))

    def consistent(self, rel_tol: float) -> bool:
        return self.discrepancy() <= self.allowed(rel_tol)


@dataclass
class LimitConstants:
    c_star: ConstantEstimate
    c_star_star: ConstantEstimate
    c_star3: ConstantEstimate
    c_hat: ConstantEstimate
    provenance: Dict = field(default_factory=dict)

    def all(self):
        return [self.c_star, self.c_star_star, self.c_star3, self.c_hat]

    def rows(self):
        return [[c.name, c.route1, c.err1, c.route2, c.err2] for c in self.all()]


def _renewal_at(family, kind, points, budget, seed) -> RenewalTable:
    if family.lattice:
        return lattice_renewal_exact(family, kind, points)
    return estimate_renewal(family, kind, points, budget=budget, seed=seed, horizon=int(50 * max(points) ** 2) + 1000)


def estimate_constants(family: IncrementFamily, ns: Sequence[int] = (1_000, 4_000, 16_000),
                       meander_plus: Optional[MeanderTable] = None, meander_minus: Optional[MeanderTable] = None,
                       tail_budget: int = 20_000, renewal_budget: int = 400, seed: int = 0,
                       norming_factor: float = 1.0, rel_tol: float = 0.1, strict: bool = True) -> LimitConstants:
    """
    C*, C**, C*** and C-hat, each by two routes: ladder tails times renewal
    functions at the largest n, and meander moments (or products of the others).
    """
    params = family.stable_target
    ar = params.alpha_rho
    ns = sorted(int(n) for n in ns)
    a_ns = np.array([scaling_constants(family, n)[0] * norming_factor for n in ns])

    up = ladder_tail(family, ns[-1], sign=1, budget=tail_budget, seed=seed)
    down = ladder_tail(family, ns[-1], sign=-1, budget=tail_budget, seed=seed + 1)
    v_plus = _renewal_at(family, RenewalKind.V_PLUS, a_ns, renewal_budget, seed + 2)
    v_minus = _renewal_at(family, RenewalKind.V_MINUS, a_ns, renewal_budget, seed + 3)
    vp, vm = np.asarray(v_plus(a_ns)), np.asarray(v_minus(a_ns))
    vp_err, vm_err = np.asarray(v_plus.stderr), np.asarray(v_minus.stderr)
    tp = np.array([up.at(n) for n in ns])
    tm = np.array([down.at(n) for n in ns])
    tp_err = np.array([up.stderr[n] for n in ns])
    tm_err = np.array([down.stderr[n] for n in ns])

    def last_with_drift(series, rel_err):
        drift = abs(series[-1] - series[-2]) if series.size > 1 else 0.0
        return float(series[-1]), float(math.hypot(drift, series[-1] * rel_err))

    def rel(err, val):
        return float(err / val) if val > 0 else 0.0

    cs1, cs1_err = last_with_drift(tp * vp, math.hypot(rel(tp_err[-1], tp[-1]), rel(vp_err[-1], vp[-1])))
    css1, css1_err = last_with_drift(tm * vm, math.hypot(rel(tm_err[-1], tm[-1]), rel(vm_err[-1], vm[-1])))
    n_arr = np.array(ns, dtype=float)
    c3_1, c3_1_err = last_with_drift(vp * vm / n_arr, math.hypot(rel(vp_err[-1], vp[-1]), rel(vm_err[-1], vm[-1])))
    ch1, ch1_err = last_with_drift(n_arr * tp * tm, math.hypot(rel(tp_err[-1], tp[-1]), rel(tm_err[-1], tm[-1])))

    meander_steps = ns[-1] if family.lattice else min(ns[-1], 1_000)
    if meander_minus is None:
        meander_minus = estimate_meander_density(family, -1, np.linspace(0, 8, 401), n_steps=meander_steps,
                                                 seed=seed + 4, norming_factor=norming_factor)
    if meander_plus is None:
        meander_plus = estimate_meander_density(family, 1, np.linspace(0, 8, 401), n_steps=meander_steps,
                                                seed=seed + 5, norming_factor=norming_factor)
    m_minus, m_minus_err = meander_minus.moment(ar)
    m_plus, m_plus_err = meander_plus.moment(params.alpha - ar)
    cs2, cs2_err = 1.0 / m_minus, m_minus_err / m_minus ** 2
    css2, css2_err = 1.0 / m_plus, m_plus_err / m_plus ** 2
    c3_2 = cs2 * css2 / ch1
    c3_2_err = c3_2 * math.sqrt(rel(cs2_err, cs2) ** 2 + rel(css2_err, css2) ** 2 + rel(ch1_err, ch1) ** 2)
    ch2 = cs2 * css2 / c3_1
    ch2_err = ch2 * math.sqrt(rel(cs2_err, cs2) ** 2 + rel(css2_err, css2) ** 2 + rel(c3_1_err, c3_1) ** 2)

    constants = LimitConstants(
        ConstantEstimate("C*", cs1, cs1_err, cs2, cs2_err),
        ConstantEstimate("C**", css1, css1_err, css2, css2_err),
        ConstantEstimate("C***", c3_1, c3_1_err, c3_2, c3_2_err),
        ConstantEstimate("C-hat", ch1, ch1_err, ch2, ch2_err),
        dict(family=family.key(), norming=family.norming, norming_factor=norming_factor, ns=ns,
             tail_method=up.method, renewal_method=v_plus.method, meander_method=meander_minus.provenance.get('method'))
    )
    if strict:
        for c in constants.all():
            if not c.consistent(rel_tol):
                raise InconsistentEstimates(
                    f"{c.name}: routes give {c.route1:.6g} and {c.route2:.6g}, "
                    f"difference {c.discrepancy():.3g} exceeds {c.allowed(rel_tol):.3g}"
                )
    return constants


# --- limit laws -----------------------------------------------------------------------------


@dataclass
class LimitLawEval:
    """Backing objects for A1, A2 and B: density g, meander densities, bridge positivity C and C*."""
    params: StableParams
    g: Callable
    g_plus: Callable
    g_minus: Callable
    bridge: Callable
    c_star: float
    reach: float
    quad_tol: float = DEFAULT_QUAD_TOL
    a1_curve: Optional[tuple] = None
    provenance: Dict = field(default_factory=dict)

    @classmethod
    def brownian(cls, quad_tol: float = DEFAULT_QUAD_TOL) -> "LimitLawEval":
        def rayleigh(w):
            w = np.asarray(w, dtype=float)
            return np.where(w >= 0, w * np.exp(-0.5 * w * w), 0.0)

        def bridge(a, b):
            a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
            return np.where((a >= 0) & (b >= 0), -np.expm1(-2.0 * a * b), 0.0)

        return cls(make_params(2.0, 0.0, 0.5), norm.pdf, rayleigh, rayleigh, bridge,
                   math.sqrt(2.0 / math.pi), 12.0, quad_tol, provenance=dict(backing="brownian closed forms"))

    @classmethod
    def from_tables(cls, meander_minus: MeanderTable, meander_plus: MeanderTable, bridge: BridgePositivityTable,
                    constants: Optional[LimitConstants] = None, density=None,
                    quad_tol: float = 1e-6) -> "LimitLawEval":
        params = meander_plus.params
        reach = float(max(meander_minus.grid[-1], meander_plus.grid[-1]))
        if density is None:
            density = density_table(params, np.linspace(-reach, reach, 801), quad_tol=max(quad_tol, 1e-8))
        if constants is not None:
            c_star = constants.c_star.route2
        else:
            c_star = 1.0 / meander_minus.moment(params.alpha_rho)[0]
        w = meander_minus.grid
        cum = c_star * cumulative_trapezoid(w ** params.alpha_rho * meander_minus.values, w, initial=0.0)
        return cls(params, density, meander_plus, meander_minus, bridge, c_star, reach, quad_tol,
                   a1_curve=(w, cum),
                   provenance=dict(meander=meander_minus.provenance, bridge=bridge.provenance,
                                   constants=constants.provenance if constants else None))


def _integrate(func, a, b, tol):
    if b <= a:
        return 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IntegrationWarning)
        value, abserr = quad(func, a, b, epsabs=tol, epsrel=1e-10, limit=500)
    if not np.isfinite(value) or abserr > 10 * tol:
        raise QuadratureFailure(f"Quadrature on [{a:g}, {b:g}] did not converge (error {abserr:.3g})")
    return value


def eval_A1(z: float, ev: LimitLawEval) -> float:
    """C* int_0^z w^{alpha rho} g-(w) dw."""
    if z <= 0:
        return 0.0
    ar = ev.params.alpha_rho
    if ev.a1_curve is not None:
        grid, cum = ev.a1_curve
        return float(min(max(np.interp(z, grid, cum), 0.0), 1.0 + ev.quad_tol))
    value = ev.c_star * _integrate(lambda w: w ** ar * float(ev.g_minus(w)), 0.0, min(z, ev.reach), ev.quad_tol)
    return min(max(value, 0.0), 1.0 + ev.quad_tol)


def _a2_integrand(ev: LimitLawEval, t: float):
    ar = ev.params.alpha_rho
    return lambda w: w ** ar * float(ev.g(t - w)) * float(ev.bridge(w, t))


def eval_A2(z: float, t: float, ev: LimitLawEval) -> float:
    """t^{-alpha rho} int_0^z w^{alpha rho} g(t - w) C(w, t) dw."""
    if t <= 0:
        raise ValueError(f"A2 needs t > 0, got {t}")
    if z <= 0:
        return 0.0
    value = _integrate(_a2_integrand(ev, t), 0.0, min(z, t + ev.reach), ev.quad_tol)
    return min(max(value / t ** ev.params.alpha_rho, 0.0), 1.0 + ev.quad_tol)


def eval_curve(kind: str, z_grid, ev: LimitLawEval, param: Optional[float] = None) -> np.ndarray:
    """A1, A2(., t) or B(., T) on an increasing grid, built from nonnegative increments."""
    z_grid = np.asarray(z_grid, dtype=float)
    if kind == "A1":
        return np.array([eval_A1(z, ev) for z in z_grid])
    if kind == "B":
        return np.array([eval_B(z, param, ev, cross_check=False) for z in z_grid])
    integrand = _a2_integrand(ev, param)
    cap = param + ev.reach
    out, acc, prev = [], 0.0, 0.0
    for z in z_grid:
        z = min(max(z, 0.0), cap)
        acc += max(_integrate(integrand, prev, z, ev.quad_tol), 0.0)
        prev = max(prev, z)
        out.append(min(acc / param ** ev.params.alpha_rho, 1.0 + ev.quad_tol))
    return np.array(out)


def eval_B(z: float, T: float, ev: LimitLawEval, cross_check: bool = True, cross_tol: float = 1e-6) -> float:
    """((a rho + 1)/T^{a rho + 1}) int_0^z w^{a rho} dw int_0^T g(t - w) C(w, t) dt."""
    if T <= 0:
        raise ValueError(f"B needs T > 0, got {T}")
    if z <= 0:
        return 0.0
    ar = ev.params.alpha_rho
    norming = (ar + 1.0) / T ** (ar + 1.0)
    upper = min(z, T + ev.reach)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IntegrationWarning)
        value, abserr = dblquad(
            lambda t, w: w ** ar * float(ev.g(t - w)) * float(ev.bridge(w, t)),
            0.0, upper, 0.0, T, epsabs=ev.quad_tol, epsrel=1e-10
        )
    if not np.isfinite(value) or abserr > 10 * ev.quad_tol:
        raise QuadratureFailure(f"B({z:g}, {T:g}) double quadrature did not converge (error {abserr:.3g})")
    value *= norming

    if cross_check:
        mixture = eval_B_mixture(z, T, ev)
        if abs(mixture - value) > max(cross_tol, 10 * ev.quad_tol):
            raise QuadratureFailure(
                f"B({z:g}, {T:g}) = {value:.9g} disagrees with its A2 mixture {mixture:.9g} by more than {cross_tol:g}"
            )
    return min(max(value, 0.0), 1.0 + ev.quad_tol)


def eval_B_mixture(z: float, T: float, ev: LimitLawEval) -> float:
    """B(z, T) as the mixture ((a rho + 1)/T^{a rho + 1}) int_0^T t^{a rho} A2(z, t) dt."""
    if T <= 0:
        raise ValueError(f"B needs T > 0, got {T}")
    if z <= 0:
        return 0.0
    ar = ev.params.alpha_rho
    # t^{a rho} A2(z, t) is the inner w-integral itself
    inner = _integrate(
        lambda t: _integrate(_a2_integrand(ev, t), 0.0, min(z, t + ev.reach), ev.quad_tol),
        0.0, T, ev.quad_tol
    )
    return (ar + 1.0) / T ** (ar + 1.0) * inner


# --- local limit predictions ----------------------------------------------------------------


LOCAL_CASES = ("Xsmall", "Ysmall", "XYsmall", "XYbig")


def local_limit_prediction(case: str, family: IncrementFamily, n: int, x: float, y: float, ev: LimitLawEval,
                           v_minus: Optional[RenewalTable] = None, v_plus: Optional[RenewalTable] = None,
                           tail_budget: int = 20_000, delta: float = 0.25, D: float = 10.0, seed: int = 0) -> float:
    """
    Asymptotic q_n(x, y) (a probability for lattice families, a density otherwise)
    for one of the four uniformity windows.
    """
    if case not in LOCAL_CASES:
        raise ValueError(f"Unknown local-limit case: {case}")
    a_n, b_n = scaling_constants(family, n)
    if case in ("Xsmall", "XYsmall") and x > delta * a_n:
        raise RegimeMismatch(f"{case}: x={x} is not small against a_n={a_n:.4g} (window {delta:g} a_n)")
    if case in ("Ysmall", "XYsmall") and y > delta * a_n:
        raise RegimeMismatch(f"{case}: y={y} is not small against a_n={a_n:.4g} (window {delta:g} a_n)")
    if case == "XYbig" and not all(a_n / D < v < D * a_n for v in (x, y)):
        raise RegimeMismatch(f"XYbig: x={x}, y={y} are not within ({a_n / D:.4g}, {D * a_n:.4g})")

    if case == "XYbig":
        return float(ev.g((y - x) / a_n) * ev.bridge(x / a_n, y / a_n) / a_n)

    if family.lattice:
        v_minus = v_minus or lattice_renewal_exact(family, RenewalKind.V_MINUS, [x])
        v_plus = v_plus or lattice_renewal_exact(family, RenewalKind.V_PLUS, [y])
    elif v_minus is None or v_plus is None:
        raise DependencyMissing("Continuous families need V- and V+ tables for local-limit predictions")
    zeta = v_plus.zeta if family.lattice else 0.0

    if case == "Xsmall":
        tail = ladder_tail(family, n, sign=-1, budget=tail_budget, seed=seed).at(n)
        return float(tail / a_n * v_minus(x) * ev.g_plus(y / a_n))
    if case == "Ysmall":
        tail = ladder_tail(family, n, sign=1, budget=tail_budget, seed=seed).at(n)
        return float(tail / a_n * v_plus(y) * ev.g_minus(x / a_n))
    return float((1.0 - zeta) * ev.g(0.0) * b_n * v_minus(x) * v_plus(y))


# --- conditional laws at a fixed horizon ----------------------------------------------------


@dataclass
class ConditionalCdf:
    z: np.ndarray
    values: np.ndarray
    regime: int
    N: int
    m: int
    x: float
    y: float
    event_mass: float
    stderr: Optional[np.ndarray] = None

    def to_csv(self, path: str) -> str:
        err = self.stderr if self.stderr is not None else np.zeros_like(self.values)
        return write_csv(path, ["z", "value", "stderr"], zip(self.z, self.values, err))


def conditional_cdf_exact(family: IncrementFamily, N: int, m: int, x: int, y: float, z_grid, regime: int,
                          cap: Optional[int] = None) -> ConditionalCdf:
    """
    Exact lattice conditional laws given {L_N >= 0, S_N <= y}: of S_{N-m} / a_m
    (regimes 1 and 2) and of (S_{N-m} - S_N) / a_m (regime 3).
    """
    if not 0 < m < N:
        raise ValueError(f"need 0 < m < N, got m={m}, N={N}")
    z_grid = np.asarray(z_grid, dtype=float)
    a_m, _ = scaling_constants(family, m)
    head, lost = forward_distribution(family, N - m, x, cap)
    k = np.arange(head.size)
    down = -int(family.offsets.min())

    if regime in (1, 2):
        tail = backward_survival(family, m, y, cap=max(head.size - 1, int(math.floor(y)) + m * down))
        mass = head * tail[:head.size]
        total = mass.sum()
        if total <= 0:
            raise EmptyBin(f"P_x(L_N >= 0, S_N <= {y}) = 0 for x={x}, N={N}")
        cdf = np.cumsum(mass) / total
        idx = np.floor(z_grid * a_m).astype(np.int64)
        values = np.where(idx < 0, 0.0, cdf[np.clip(idx, 0, cdf.size - 1)])
        return ConditionalCdf(z_grid, values, regime, N, m, x, y, float(total))

    if regime != 3:
        raise ValueError(f"Unknown regime: {regime}")
    top = int(math.floor(y))
    size = max(head.size, top + m * down + 1)
    # F[k, j] = P_k(L_m >= 0, S_m = j), built backward from S_m = j
    F = np.zeros((size, top + 1))
    F[np.arange(top + 1), np.arange(top + 1)] = 1.0
    up = int(family.offsets.max())
    for _ in range(m):
        ext = np.vstack([np.zeros((down, top + 1)), F, np.zeros((up, top + 1))])
        nxt = np.zeros_like(F)
        for o, p in zip(family.offsets, family.probs):
            nxt += p * ext[down + int(o):down + int(o) + size]
        F = nxt
    joint = head[:, None] * F[:head.size]
    total = joint.sum()
    if total <= 0:
        raise EmptyBin(f"P_x(L_N >= 0, S_N <= {y}) = 0 for x={x}, N={N}")
    diff = k[:, None] - np.arange(top + 1)[None, :]
    offset = top
    by_diff = np.bincount((diff + offset).ravel(), weights=joint.ravel())
    cdf = np.cumsum(by_diff) / total
    idx = np.floor(z_grid * a_m).astype(np.int64) + offset
    values = np.where(idx < 0, 0.0, cdf[np.clip(idx, 0, cdf.size - 1)])
    return ConditionalCdf(z_grid, values, 3, N, m, x, y, float(total))


def conditional_cdf_rejection(family: IncrementFamily, N: int, m: int, x: float, y: float, z_grid, regime: int,
                              budget: int = 2_000, inner: int = 200, seed: int = 0,
                              progress=None) -> ConditionalCdf:
    """
    Monte Carlo analogue of conditional_cdf_exact: walks surviving the first N - m
    steps are drawn by rejection, and each is continued `inner` times; continuations
    that keep L_N >= 0 and S_N <= y are pooled.
    """
    z_grid = np.asarray(z_grid, dtype=float)
    a_m, _ = scaling_constants(family, m)
    rng = substreams(seed, 1)[0]
    stats, accepted_outer = [], 0
    for start in range(0, budget, 256):
        r = min(256, budget - start)
        heads = sample_conditioned_batch(family, N - m, x, EndSpec.free(), "rejection", rng, r)[:, -1]
        s = heads[:, None, None] + np.cumsum(family.sample(rng, (r, inner, m)), axis=2)
        ok = (s.min(axis=2) >= 0) & (s[:, :, -1] <= y)
        stat = np.broadcast_to(heads[:, None], ok.shape) if regime in (1, 2) else heads[:, None] - s[:, :, -1]
        stats.append(stat[ok])
        accepted_outer += int(np.count_nonzero(ok.any(axis=1)))
        if progress:
            progress(start + r, budget)
    pooled = np.concatenate(stats) / a_m
    if pooled.size == 0:
        raise EmptyBin(f"No continuation reached S_N <= {y}; raise the budget")
    pooled.sort()
    values = np.searchsorted(pooled, z_grid, side='right') / pooled.size
    stderr = np.sqrt(values * (1 - values) / max(accepted_outer, 1))
    return ConditionalCdf(z_grid, values, regime, N, m, x, y, float(pooled.size), stderr)


def regime3_reference(params: StableParams, z) -> np.ndarray:
    """Law of -Y_1, the limit of (S_{N-m} - S_N) / a_m."""
    return np.array([1.0 - stable_cdf(params, -zz) for zz in np.atleast_1d(z)])
