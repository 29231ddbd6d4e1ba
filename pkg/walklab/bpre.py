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

"""Branching processes in random environment driven by the walk families."""

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import gammainc

from walklab.base_experiment import (
    BadFamilyParams, BudgetTooSmall, DependencyMissing, PopulationOverflow,
    RegimeMismatch, TooFewAccepted
)
from walklab.harness import ks_statistic
from walklab.limit_laws import LimitLawEval, eval_A1, eval_B, regime3_reference
from walklab.utils import substreams, write_csv
from walklab.walk_engine import (
    CHUNK_CELLS, EndSpec, IncrementFamily, RenewalKind, estimate_renewal, exact_kernel, lattice_renewal_exact,
    sample_conditioned_batch, sample_h_transform_batch, scaling_constants
)

POPULATION_CAP = 1e12
# sup of gamma(2) over the Poisson branch, attained at mean 1
HYBRID_GAMMA2_BOUND = (2.0 - math.exp(-1.0)) / (1.0 - math.exp(-1.0)) ** 2


class OffspringKind(Enum):
    HYBRID = "hybrid"
    GEOMETRIC = "geometric"


@dataclass(frozen=True)
class OffspringLaw:
    """Hybrid: Bernoulli(M) for M < 1, Poisson(M) otherwise. Geometric: f(s) = 1 / (1 + M - M s)."""
    kind: OffspringKind
    mean: float

    @property
    def branch(self) -> str:
        if self.kind == OffspringKind.GEOMETRIC:
            return "geometric"
        return "bernoulli" if self.mean < 1 else "poisson"

    def pgf(self, s):
        s = np.asarray(s, dtype=float)
        m = self.mean
        if self.branch == "bernoulli":
            return 1.0 - m + m * s
        if self.branch == "poisson":
            return np.exp(m * (s - 1.0))
        return 1.0 / (1.0 + m - m * s)

    def gamma(self, b: int) -> float:
        """sum_{k>=b} k^2 p_k / (sum_{k>=b} k p_k)^2, and 0 when no mass sits at k >= b."""
        return float(np.exp(log_gamma_b(self.kind, [math.log(self.mean)], b)[0]))


def log_gamma_b(kind: OffspringKind, x, b: int) -> np.ndarray:
    """
    log gamma(b) as a function of X = log M, without forming M when X is very negative.
    Zero gamma (no offspring mass at k >= b) maps to -inf.
    """
    if b < 1:
        raise ValueError(f"b must be >= 1, got {b}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty_like(x)
    if kind == OffspringKind.GEOMETRIC:
        # p_k = (1 - r) r^k with r = M / (1 + M)
        log_r = -np.logaddexp(0.0, -x)
        r = np.exp(log_r)
        poly1 = b - (b - 1) * r
        poly2 = b * b - (2 * b * b - 2 * b - 1) * r + (b - 1) ** 2 * r * r
        return np.log(poly2) - 2 * np.log(poly1) - b * log_r
    low = x < 0
    # Bernoulli branch: mass at 1 only
    out[low] = -x[low] if b == 1 else -np.inf
    # sum k^2 p_k = M^2 tail2 + M tail1 and sum k p_k = M tail1 over k >= b; both tails are 1 once X >= 700
    m = np.exp(np.minimum(x[~low], 700.0))
    tail1 = gammainc(b - 1, m) if b >= 2 else np.ones_like(m)
    tail2 = gammainc(b - 2, m) if b >= 3 else np.ones_like(m)
    out[~low] = np.log(tail2 + tail1 * np.exp(-x[~low])) - 2 * np.log(tail1)
    return out


def gamma_b(kind: OffspringKind, means, b: int) -> np.ndarray:
    return np.exp(log_gamma_b(kind, np.log(np.atleast_1d(np.asarray(means, dtype=float))), b))


def _extinction_step(kind: OffspringKind, means: np.ndarray, t: np.ndarray) -> np.ndarray:
    """t -> 1 - f(1 - t), written to keep precision when t is small."""
    if kind == OffspringKind.GEOMETRIC:
        return means * t / (1.0 + means * t)
    return np.where(means < 1, means * t, -np.expm1(-means * t))


@dataclass(frozen=True)
class EnvironmentModel:
    family: IncrementFamily
    offspring: OffspringKind = OffspringKind.HYBRID

    @property
    def scaling(self):
        return self.family.scaling

    def describe(self) -> str:
        return f"{self.offspring.value} offspring, X ~ {self.family.key()}"


@dataclass
class Environment:
    model: EnvironmentModel
    steps: np.ndarray
    positions: np.ndarray

    @property
    def n(self) -> int:
        return int(self.steps.size)

    @property
    def means(self) -> np.ndarray:
        return np.exp(self.steps)

    def laws(self) -> List[OffspringLaw]:
        return [OffspringLaw(self.model.offspring, float(m)) for m in self.means]

    @classmethod
    def from_steps(cls, model: EnvironmentModel, steps) -> "Environment":
        steps = np.asarray(steps, dtype=float)
        return cls(model, steps, np.concatenate([[0.0], np.cumsum(steps)]))


@dataclass
class BpreTrajectory:
    environment: Environment
    sizes: np.ndarray
    saturated_at: Optional[int] = None

    @property
    def zhat(self) -> np.ndarray:
        return np.exp(-self.environment.positions) * self.sizes

    @property
    def survived(self) -> bool:
        return bool(self.sizes[-1] > 0)


def sample_environment(model: EnvironmentModel, n: int, rng: np.random.Generator) -> Environment:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return Environment.from_steps(model, model.family.sample(rng, n))


def _offspring_step(kind: OffspringKind, z: np.ndarray, means: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One generation for a vector of populations with per-row offspring means (z below the cap)."""
    zi = z.astype(np.int64)
    out = np.zeros(z.shape)
    alive = zi > 0
    if kind == OffspringKind.GEOMETRIC:
        if alive.any():
            out[alive] = rng.negative_binomial(zi[alive], 1.0 / (1.0 + means[alive]))
        return out
    low = alive & (means < 1)
    high = alive & ~(means < 1)
    if low.any():
        out[low] = rng.binomial(zi[low], means[low])
    if high.any():
        out[high] = rng.poisson(means[high] * zi[high])
    return out


def _evolve(kind: OffspringKind, steps: np.ndarray, z0, rng: np.random.Generator, cap: float = POPULATION_CAP,
            keep=None):
    """
    Populations for environments given row-wise by `steps`. Rows that pass the cap continue
    as Z * M without sampling and are flagged. Returns (sizes at `keep` times or all, saturated).
    """
    rows, n = steps.shape
    z = np.full(rows, float(z0))
    saturated = np.zeros(rows, dtype=bool)
    keep = list(range(n + 1)) if keep is None else list(keep)
    record = np.zeros((rows, len(keep)))
    slots = {t: i for i, t in enumerate(keep)}
    if 0 in slots:
        record[:, slots[0]] = z
    for k in range(n):
        means = np.exp(steps[:, k])
        expected = z * means
        # populations whose mean already passes the cap are not sampled
        draw = ~saturated & (expected <= cap)
        nxt = expected.copy()
        nxt[draw] = _offspring_step(kind, z[draw], means[draw], rng)
        saturated |= nxt > cap
        z = nxt
        if k + 1 in slots:
            record[:, slots[k + 1]] = z
    return record, saturated


def simulate_bpre(env: Environment, z0: int, rng: np.random.Generator, cap: float = POPULATION_CAP,
                  on_overflow: str = "saturate") -> BpreTrajectory:
    if z0 < 1:
        raise ValueError(f"z0 must be >= 1, got {z0}")
    sizes, saturated = _evolve(env.model.offspring, env.steps[None, :], z0, rng, cap)
    sizes = sizes[0]
    saturated_at = None
    if saturated[0]:
        saturated_at = int(np.argmax(sizes > cap))
        if on_overflow == "raise":
            raise PopulationOverflow(f"Population passed the cap {cap:g} at generation {saturated_at}")
    return BpreTrajectory(env, sizes, saturated_at)


def simulate_bpre_replicas(env: Environment, z0: int, count: int, rng: np.random.Generator,
                           cap: float = POPULATION_CAP):
    """`count` independent trajectories on one frozen environment, shape (count, n + 1)."""
    steps = np.broadcast_to(env.steps, (count, env.n))
    return _evolve(env.model.offspring, np.ascontiguousarray(steps), z0, rng, cap)


def _survival_rows(kind: OffspringKind, steps: np.ndarray, horizon: int) -> np.ndarray:
    """P(Z_horizon > 0 | E, Z_0 = 1) for each row of steps, by backward iteration on 1 - s."""
    t = np.ones(steps.shape[0])
    for i in range(horizon - 1, -1, -1):
        t = _extinction_step(kind, np.exp(steps[:, i]), t)
    return t


def _survival_from_one(t, z0):
    """1 - (1 - t)^z0."""
    return -np.expm1(z0 * np.log1p(-np.minimum(t, 1.0)))


def survival_prob_given_env(env: Environment, z0: int, horizon: Optional[int] = None) -> float:
    horizon = env.n if horizon is None else horizon
    if horizon > env.n:
        raise ValueError(f"horizon {horizon} exceeds environment length {env.n}")
    if horizon == 0:
        return 1.0
    t = _survival_rows(env.model.offspring, env.steps[None, :], horizon)[0]
    return float(_survival_from_one(t, z0))


def survival_prob_linear_fractional(env: Environment, horizon: Optional[int] = None) -> float:
    """Geometric offspring, Z_0 = 1: 1 / sum_{k=0}^{horizon} exp(-S_k)."""
    if env.model.offspring != OffspringKind.GEOMETRIC:
        raise BadFamilyParams("The closed form holds for geometric offspring laws only")
    horizon = env.n if horizon is None else horizon
    return float(1.0 / np.sum(np.exp(-env.positions[:horizon + 1])))


# --- condition B2 -------------------------------------------------------------------------


TAIL_FRACTION = 0.02
MIN_TAIL_POINTS = 50


def hill_tail_index(values, fraction: float = TAIL_FRACTION) -> Tuple[float, float]:
    """
    Hill estimate of the tail index of the positive finite values, from the top
    `fraction` of them, with its standard error. A bounded sample whose top
    values tie gives inf.
    """
    y = np.asarray(values, dtype=float)
    y = np.sort(y[np.isfinite(y) & (y > 0)])
    if y.size <= MIN_TAIL_POINTS:
        return math.inf, 0.0
    k = min(max(MIN_TAIL_POINTS, int(fraction * y.size)), y.size - 1)
    spread = float(np.log(y[-k:] / y[-k - 1]).mean())
    if spread <= 0:
        return math.inf, 0.0
    return 1.0 / spread, 1.0 / (spread * math.sqrt(k))


@dataclass
class B2Report:
    """
    Analytic verdict for the known families next to the empirical one. The
    empirical verdict is PASS when the tail index of log+ gamma(b) exceeds
    alpha + eps, i.e. when the moment of that order is finite.
    """
    b: int
    eps: float
    order: float
    verdict: str
    reason: str
    log_sup_gamma: float
    tail_index: float
    tail_index_se: float
    budgets: List[int]
    moments: List[float]

    @property
    def sup_gamma(self) -> float:
        return math.exp(self.log_sup_gamma) if self.log_sup_gamma < 700 else math.inf

    @property
    def stabilized(self) -> bool:
        return self.tail_index > self.order

    @property
    def empirical_verdict(self) -> str:
        return "PASS" if self.stabilized else "FAIL"

    @property
    def mismatch(self) -> bool:
        return self.verdict != self.empirical_verdict

    @property
    def moment_drift(self) -> float:
        """Relative change of the truncated moment from budget/4 to the full budget."""
        a, c = self.moments[0], self.moments[-1]
        return abs(c - a) / max(abs(c), 1e-12)


def check_condition_B2(model: EnvironmentModel, b: int = 2, eps: float = 0.1, budget: int = 1_000_000,
                       seed: int = 0) -> B2Report:
    """
    Analytic verdict, the Hill tail index of log+ gamma(b) over `budget` sampled
    environments, and the empirical mean of (log+ gamma(b))^(alpha+eps) at
    budget/4, budget/2 and budget.
    """
    if b < 1 or eps <= 0:
        raise ValueError(f"need b >= 1 and eps > 0, got b={b}, eps={eps}")
    alpha = model.family.stable_target.alpha
    order = alpha + eps
    rng = substreams(seed, 1)[0]
    x = model.family.sample(rng, budget).astype(float)
    log_gammas = log_gamma_b(model.offspring, x, b)
    log_plus = np.maximum(log_gammas, 0.0)
    powered = log_plus ** order
    budgets = [max(budget // 4, 1), max(budget // 2, 1), budget]
    moments = [float(powered[:k].mean()) for k in budgets]
    tail_index, tail_se = hill_tail_index(log_plus)

    bounded = model.offspring == OffspringKind.HYBRID and b >= 2
    light = model.family.kind.value in ("lazy-lattice", "gaussian")
    if bounded:
        verdict, reason = "PASS", f"gamma({b}) is uniformly bounded: 0 on the Bernoulli branch, finite on the Poisson branch"
    elif light:
        verdict, reason = "PASS", "log+ gamma grows like the negative part of X, which has all moments"
    else:
        verdict, reason = "FAIL", f"log+ gamma grows like the negative part of X, whose tail index {alpha:g} < alpha + eps"
    return B2Report(b, eps, order, verdict, reason, float(log_gammas.max()), tail_index, tail_se, budgets, moments)


# --- environments under conditioning ---------------------------------------------------------


def _conditioned_walks(model: EnvironmentModel, n: int, phi: float, count: int, rng: np.random.Generator,
                       kernel=None) -> np.ndarray:
    """Walks drawn from P_0(. | L_n >= 0, S_n <= phi); exact kernel for lattice families."""
    mode = "dp_backward" if model.family.lattice else "rejection"
    x0 = 0 if model.family.lattice else 0.0
    return sample_conditioned_batch(model.family, n, x0, EndSpec.at_most(phi), mode, rng, count, kernel=kernel)


def _up_environments(model: EnvironmentModel, horizon: int, count: int, rng: np.random.Generator):
    """Environment walks under P^up from 0 with their self-normalising weights."""
    family = model.family
    if family.lattice:
        renewal = lattice_renewal_exact(family, RenewalKind.V_MINUS, max_height=horizon + 1)
        positions, weights = sample_h_transform_batch(family, horizon, 0, rng, renewal, count, mode="chain")
    else:
        a_h, _ = scaling_constants(family, horizon)
        grid = np.linspace(0.0, 4.0 * a_h, 41)
        renewal = estimate_renewal(family, RenewalKind.V_MINUS, grid, budget=400, seed=int(rng.integers(2**31)),
                                   horizon=horizon * 20)
        positions, weights = sample_h_transform_batch(family, horizon, 0.0, rng, renewal, count)
    return np.diff(positions.astype(float), axis=1), weights


# --- Theta ----------------------------------------------------------------------------------


@dataclass
class ThetaEstimate:
    value: float
    stderr: float
    J: int
    K: int
    horizon: int
    convention: str
    contributions: np.ndarray
    h_values: np.ndarray
    horizon_delta: float
    replicas: int

    def at(self, J: int, K: int) -> float:
        """The truncated double sum for J' <= J and K' <= K from the same replicas."""
        return float(self.contributions[:J + 1, 1:K + 1].sum())

    @property
    def first_term(self) -> float:
        return float(self.contributions[0, 1])


def estimate_theta(model: EnvironmentModel, J: int = 20, K: int = 50, horizon: int = 1_000, budget: int = 20_000,
                   up_budget: int = 2_000, seed: int = 0, convention: str = "strict",
                   up_steps: Optional[np.ndarray] = None, up_weights: Optional[np.ndarray] = None) -> ThetaEstimate:
    """
    Theta = sum_{j<=J} sum_{k<=K} P(Z_j = k, tau_j = j) P^up(survival to horizon | Z_0 = k).
    tau_j = j means S_j is a new minimum: strict (<) or weak (<=) against S_0..S_{j-1}.
    """
    if budget < 10:
        raise BudgetTooSmall(f"Theta needs at least 10 replicas, got {budget}")
    streams = substreams(seed, 2)
    if up_steps is None:
        up_steps, up_weights = _up_environments(model, 2 * horizon, up_budget, streams[1])
    up_weights = np.ones(up_steps.shape[0]) if up_weights is None else np.asarray(up_weights, dtype=float)
    if up_steps.shape[1] < horizon:
        raise ValueError(f"P^up environments of length {up_steps.shape[1]} are shorter than the horizon {horizon}")
    ks = np.arange(K + 1)

    def h_table(h):
        t = _survival_rows(model.offspring, up_steps, h)
        surv = _survival_from_one(t[:, None], ks[None, :])
        return (up_weights[:, None] * surv).sum(axis=0) / up_weights.sum()

    h_values = h_table(horizon)
    h_doubled = h_table(2 * horizon) if up_steps.shape[1] >= 2 * horizon else h_values

    rng = streams[0]
    steps = model.family.sample(rng, (budget, max(J, 1))).astype(float)[:, :J]
    sizes, saturated = _evolve(model.offspring, steps, 1, rng)
    walk = np.concatenate([np.zeros((budget, 1)), np.cumsum(steps, axis=1)], axis=1)
    prev_min = np.minimum.accumulate(walk, axis=1)[:, :-1]
    new_min = walk[:, 1:] < prev_min if convention == "strict" else walk[:, 1:] <= prev_min
    at_min = np.concatenate([np.ones((budget, 1), dtype=bool), new_min], axis=1)

    contributions = np.zeros((J + 1, K + 1))
    doubled = np.zeros((J + 1, K + 1))
    per_replica = np.zeros(budget)
    for j in range(J + 1):
        z = sizes[:, j]
        hit = at_min[:, j] & (z >= 1) & (z <= K) & ~saturated
        kk = z[hit].astype(np.int64)
        np.add.at(contributions[j], kk, h_values[kk] / budget)
        np.add.at(doubled[j], kk, h_doubled[kk] / budget)
        per_replica[hit] += h_values[kk]
    value = float(contributions[:, 1:].sum())
    return ThetaEstimate(
        value, float(per_replica.std(ddof=1) / math.sqrt(budget)), J, K, horizon, convention,
        contributions, h_values, float(value - doubled[:, 1:].sum()), budget
    )


# --- regime experiments -----------------------------------------------------------------------


@dataclass
class RegimeReport:
    regime: int
    n: int
    m: int
    phi: float
    sampler: str
    budget: int
    accepted: int
    saturated: int
    z_grid: np.ndarray
    empirical: np.ndarray
    reference: np.ndarray
    ks: float
    frequency: float
    frequency_stderr: float
    predicted_frequency: float
    residual_share: float = 0.0
    statistic: str = ""
    provenance: Dict = field(default_factory=dict)

    @property
    def frequency_ratio(self) -> float:
        return self.frequency / self.predicted_frequency if self.predicted_frequency > 0 else math.inf

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("z_grid", "empirical", "reference"):
            out[key] = [float(v) for v in out[key]]
        out['frequency_ratio'] = self.frequency_ratio
        return out

    def to_json(self, path: str) -> str:
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2, default=str)
        return path

    def to_csv(self, path: str) -> str:
        return write_csv(path, ["z", "empirical", "reference"], zip(self.z_grid, self.empirical, self.reference))


def _default_laws(model: EnvironmentModel, laws: Optional[LimitLawEval]) -> LimitLawEval:
    if laws is not None:
        return laws
    if model.family.stable_target.alpha == 2:
        return LimitLawEval.brownian()
    raise DependencyMissing("Limit laws for alpha < 2 need meander and bridge tables; pass a LimitLawEval")


def _renewal_sum(model: EnvironmentModel, phi: float) -> float:
    """sum_{j<=phi} V+(j) for lattice families, int_0^phi V+ otherwise."""
    family = model.family
    if family.lattice:
        table = lattice_renewal_exact(family, RenewalKind.V_PLUS, max_height=int(math.floor(phi)) + 1)
        return float(np.sum(table(np.arange(int(math.floor(phi)) + 1))))
    grid = np.linspace(0.0, phi, 21)
    table = estimate_renewal(family, RenewalKind.V_PLUS, grid, budget=400, horizon=int(50 * phi ** 2) + 1000)
    return float(trapezoid(table.values, grid))


def predicted_frequency(model: EnvironmentModel, n: int, phi: float, theta: float, laws: LimitLawEval) -> float:
    """Theta g(0) b_n sum_{j<=phi} V+(j)."""
    _, b_n = scaling_constants(model.family, n)
    return float(theta * float(laws.g(0.0)) * b_n * _renewal_sum(model, phi))


@dataclass
class _Replicas:
    walks: np.ndarray
    sizes: np.ndarray
    saturated: np.ndarray
    attempts: int
    event_mass: float
    survival_rate: float


def _collect(model: EnvironmentModel, n: int, phi: float, budget: int, sampler: str, keep, rng: np.random.Generator):
    """
    Replicas on {S_n <= phi, Z_n > 0}: keep[-1] must be n. brute_force simulates
    everything unconditionally; env_importance draws the walk from {L_n >= 0, S_n <= phi}.
    """
    keep = list(keep)
    walks, sizes, sats = [], [], []
    attempts = 0
    if sampler == "brute_force":
        rows = max(1, CHUNK_CELLS // n)
        for start in range(0, budget, rows):
            r = min(rows, budget - start)
            steps = model.family.sample(rng, (r, n)).astype(float)
            s = np.cumsum(steps, axis=1)
            z, sat = _evolve(model.offspring, steps, 1, rng, keep=keep)
            ok = (s[:, -1] <= phi) & (z[:, -1] > 0)
            walks.append(np.concatenate([np.zeros((r, 1)), s], axis=1)[ok][:, keep])
            sizes.append(z[ok])
            sats.append(sat[ok])
            attempts += r
        event_mass, survival_rate = 1.0, 1.0
    elif sampler == "env_importance":
        kernel = exact_kernel(model.family, n, 0) if model.family.lattice else None
        if kernel is not None:
            final = kernel.tables[n]
            event_mass = float(final[:int(math.floor(phi)) + 1].sum())
        else:
            event_mass = math.nan
        rows = max(1, min(budget, CHUNK_CELLS // n))
        survivors = 0
        for start in range(0, budget, rows):
            r = min(rows, budget - start)
            positions = _conditioned_walks(model, n, phi, r, rng, kernel).astype(float)
            steps = np.diff(positions, axis=1)
            z, sat = _evolve(model.offspring, steps, 1, rng, keep=keep)
            ok = z[:, -1] > 0
            survivors += int(np.count_nonzero(ok))
            walks.append(positions[ok][:, keep])
            sizes.append(z[ok])
            sats.append(sat[ok])
            attempts += r
        survival_rate = survivors / max(attempts, 1)
    else:
        raise ValueError(f"Unknown sampler: {sampler}")
    return _Replicas(np.concatenate(walks), np.concatenate(sizes), np.concatenate(sats), attempts,
                     event_mass, survival_rate)


def _frequency(model, n, phi, sampler, reps: _Replicas, theta: Optional[ThetaEstimate]):
    if sampler == "brute_force":
        f = reps.sizes.shape[0] / reps.attempts
        return f, math.sqrt(f * (1 - f) / reps.attempts), 0.0
    stratum = reps.event_mass * reps.survival_rate
    err = reps.event_mass * math.sqrt(reps.survival_rate * (1 - reps.survival_rate) / max(reps.attempts, 1))
    if theta is None or theta.first_term <= 0:
        return stratum, err, math.nan
    scale = theta.value / theta.first_term
    return stratum * scale, err * scale, 1.0 - theta.first_term / theta.value


def run_regime_experiment(model: EnvironmentModel, n: int, m: int, phi: float, regime: int, budget: int,
                          sampler: str = "env_importance", seed: int = 0, laws: Optional[LimitLawEval] = None,
                          theta: Optional[ThetaEstimate] = None, z_grid=None, min_accepted: int = 100,
                          progress=None) -> RegimeReport:
    """
    Law of log Z_{n-m} / a_m (regimes 1, 2) or (log Z_{n-m} - S_n) / a_m (regime 3)
    given {S_n <= phi, Z_n > 0}, against A1, B(., phi / a_m) or the law of -Y_1.
    """
    if m > n // 5:
        raise RegimeMismatch(f"m={m} must be at most n/5={n // 5}")
    if regime not in (1, 2, 3):
        raise ValueError(f"Unknown regime: {regime}")
    laws = _default_laws(model, laws)
    a_m, _ = scaling_constants(model.family, m)
    rng = substreams(seed, 1)[0]
    reps = _collect(model, n, phi, budget, sampler, [n - m, n], rng)
    if progress:
        progress(1, 2)
    usable = ~reps.saturated
    accepted = int(np.count_nonzero(usable))
    if accepted < min_accepted:
        raise TooFewAccepted(f"Only {accepted} replicas satisfied S_n <= {phi}, Z_n > 0 (floor {min_accepted})")
    log_z = np.log(reps.sizes[usable, 0])
    if regime == 3:
        sample = (log_z - reps.walks[usable, -1]) / a_m
        grid = np.asarray(z_grid if z_grid is not None else np.linspace(-4, 4, 81), dtype=float)
        reference = regime3_reference(model.family.stable_target, grid)
        statistic = "(log Z_{n-m} - S_n) / a_m"
    else:
        sample = log_z / a_m
        grid = np.asarray(z_grid if z_grid is not None else np.linspace(0, 4, 81), dtype=float)
        if regime == 1:
            reference = np.array([eval_A1(z, laws) for z in grid])
        else:
            reference = np.array([eval_B(z, phi / a_m, laws, cross_check=False) for z in grid])
        statistic = "log Z_{n-m} / a_m"

    sample.sort()
    empirical = np.searchsorted(sample, grid, side='right') / sample.size
    ks = ks_statistic(sample, lambda x: np.interp(x, grid, reference))
    freq, freq_err, residual = _frequency(model, n, phi, sampler, reps, theta)
    predicted = predicted_frequency(model, n, phi, theta.value, laws) if theta is not None else math.nan
    if progress:
        progress(2, 2)
    return RegimeReport(
        regime, n, m, float(phi), sampler, budget, accepted, int(np.count_nonzero(reps.saturated)),
        grid, empirical, reference, float(ks), freq, freq_err, predicted, residual, statistic,
        dict(model=model.describe(), seed=seed, laws=laws.provenance, a_m=a_m,
             theta=theta.value if theta is not None else None)
    )


def small_deviation_experiment(model: EnvironmentModel, n: int, phi: float, budget: int,
                               sampler: str = "env_importance", seed: int = 0, min_accepted: int = 100,
                               theta: Optional[ThetaEstimate] = None, laws: Optional[LimitLawEval] = None,
                               grid=None) -> RegimeReport:
    """Law of log Z_n / phi given {S_n <= phi, Z_n > 0} against y^(alpha rho + 1)."""
    a_n, _ = scaling_constants(model.family, n)
    if phi > a_n / 4:
        raise RegimeMismatch(f"phi={phi} must be at most a_n/4={a_n / 4:.4g}")
    rng = substreams(seed, 1)[0]
    reps = _collect(model, n, phi, budget, sampler, [n], rng)
    usable = ~reps.saturated
    accepted = int(np.count_nonzero(usable))
    if accepted < min_accepted:
        raise TooFewAccepted(f"Only {accepted} replicas satisfied S_n <= {phi}, Z_n > 0 (floor {min_accepted})")
    sample = np.sort(np.log(reps.sizes[usable, 0]) / phi)
    power = model.family.stable_target.alpha_rho + 1.0
    grid = np.asarray(grid if grid is not None else np.linspace(0, 1.5, 61), dtype=float)
    reference = np.clip(grid, 0.0, 1.0) ** power
    empirical = np.searchsorted(sample, grid, side='right') / sample.size
    ks = ks_statistic(sample, lambda y: np.clip(y, 0.0, 1.0) ** power)
    freq, freq_err, residual = _frequency(model, n, phi, sampler, reps, theta)
    predicted = math.nan
    if theta is not None:
        predicted = predicted_frequency(model, n, phi, theta.value, _default_laws(model, laws))
    return RegimeReport(
        0, n, 0, float(phi), sampler, budget, accepted, int(np.count_nonzero(reps.saturated)),
        grid, empirical, reference, float(ks), freq, freq_err, predicted, residual, "log Z_n / phi",
        dict(model=model.describe(), seed=seed, power=power)
    )


@dataclass
class TcondResult:
    lhs: float
    lhs_stderr: float
    rhs: float
    rhs_stderr: float
    conditional_probability: float
    limit_value: float
    up_survival: float
    regime: int
    samples: int


def verify_Tcond(model: EnvironmentModel, n: int, m: int, phi: float, z: float, k: int = 1, budget: int = 5_000,
                 seed: int = 0, regime: int = 1, laws: Optional[LimitLawEval] = None,
                 horizon: Optional[int] = None, up_budget: int = 2_000) -> TcondResult:
    """
    lhs = E[H_n; statistic <= z | S_n <= phi, L_n >= 0] with H_n = P(Z_n > 0 | E, Z_0 = k);
    rhs = limit law at z times E^up[H_horizon(k)].
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    laws = _default_laws(model, laws)
    a_m, _ = scaling_constants(model.family, m)
    streams = substreams(seed, 2)
    kernel = exact_kernel(model.family, n, 0) if model.family.lattice else None
    positions = _conditioned_walks(model, n, phi, budget, streams[0], kernel).astype(float)
    steps = np.diff(positions, axis=1)
    h_n = _survival_from_one(_survival_rows(model.offspring, steps, n), k)
    if regime == 3:
        stat = positions[:, n - m] - positions[:, n]
        limit_value = float(regime3_reference(model.family.stable_target, z)[0])
    else:
        stat = positions[:, n - m]
        limit_value = eval_A1(z, laws) if regime == 1 else eval_B(z, phi / a_m, laws, cross_check=False)
    inside = stat <= z * a_m
    values = h_n * inside
    if values.size < 2:
        raise TooFewAccepted("verify_Tcond needs at least two conditioned environments")

    horizon = horizon or 10 * n
    up_steps, up_weights = _up_environments(model, horizon, up_budget, streams[1])
    surv = _survival_from_one(_survival_rows(model.offspring, up_steps, horizon), k)
    w = up_weights / up_weights.sum()
    up_mean = float(np.sum(w * surv))
    up_err = float(math.sqrt(np.sum(w * (surv - up_mean) ** 2) / surv.size))
    return TcondResult(
        float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size)),
        limit_value * up_mean, limit_value * up_err, float(inside.mean()), limit_value, up_mean, regime, budget
    )


@dataclass
class FlatnessReport:
    n: int
    m: int
    accepted: int
    iqr: float
    quartiles: tuple


def zhat_flatness(model: EnvironmentModel, n: int, m: int, phi: float, budget: int,
                  sampler: str = "env_importance", seed: int = 0) -> FlatnessReport:
    """Spread of Zhat(n - m) / Zhat(n - 2m) on {S_n <= phi, Z_n > 0}."""
    if 2 * m >= n:
        raise ValueError(f"need 2m < n, got m={m}, n={n}")
    rng = substreams(seed, 1)[0]
    reps = _collect(model, n, phi, budget, sampler, [n - 2 * m, n - m, n], rng)
    usable = ~reps.saturated & (reps.sizes[:, 0] > 0)
    if not usable.any():
        raise TooFewAccepted("No unsaturated replicas survived to compute the flatness ratio")
    zhat = np.exp(-reps.walks[usable, :2]) * reps.sizes[usable, :2]
    ratio = zhat[:, 1] / zhat[:, 0]
    q1, q2, q3 = np.quantile(ratio, [0.25, 0.5, 0.75])
    return FlatnessReport(n, m, int(usable.sum()), float(q3 - q1), (float(q1), float(q2), float(q3)))
