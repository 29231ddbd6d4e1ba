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

"""Increment families, walk simulation, ladder variables, renewal functions and conditioned sampling."""

import hashlib
import math
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import gamma as gamma_fn

from walklab.base_experiment import (
    BadFamilyParams, BudgetTooSmall, DependencyMissing, HorizonTooLarge,
    ImpossibleEvent, IoFailure, RejectionBudgetExceeded
)
from walklab.stable_core import StableParams, make_params
from walklab.utils import array_digest, ensure_dir, split_budget, substreams, write_csv

# upper bound on the number of float cells simulated at once
CHUNK_CELLS = 2_000_000
DEFAULT_MAX_KERNEL_CELLS = 50_000_000
DEFAULT_REJECTION_ATTEMPTS = 10_000_000


class FamilyKind(Enum):
    LAZY_LATTICE = "lazy-lattice"
    TWO_SIDED_PARETO = "two-sided-pareto"
    GAUSSIAN = "gaussian"


class RenewalKind(Enum):
    """Renewal functions of the weak (V), left-continuous (Vlow) and strict (Vhat) ladder heights"""
    V_PLUS = "V+"
    V_MINUS = "V-"
    VLOW_PLUS = "Vlow+"
    VLOW_MINUS = "Vlow-"
    VHAT_PLUS = "Vhat+"
    VHAT_MINUS = "Vhat-"

    @property
    def sign(self) -> int:
        return 1 if self.value.endswith('+') else -1

    @property
    def lower(self) -> bool:
        return self.value.startswith("Vlow")

    @property
    def strict(self) -> bool:
        return self.value.startswith("Vhat")


@dataclass(frozen=True)
class ScalingLaw:
    alpha: float
    a_coeff: float

    def a(self, n):
        return self.a_coeff * np.asarray(n, dtype=float) ** (1.0 / self.alpha)

    def b(self, n):
        n = np.asarray(n, dtype=float)
        return 1.0 / (n * self.a(n))


@dataclass(frozen=True)
class IncrementFamily:
    kind: FamilyKind
    stable_target: StableParams
    a_coeff: float
    lattice: bool = False
    p: float = 0.0
    sigma: float = 1.0
    alpha: float = 2.0
    balance: float = 0.5
    centering: float = 0.0
    norming: str = "analytic"

    @property
    def scaling(self) -> ScalingLaw:
        return ScalingLaw(self.stable_target.alpha, self.a_coeff)

    @property
    def offsets(self) -> np.ndarray:
        if not self.lattice:
            raise BadFamilyParams(f"{self.key()} has no lattice support")
        return np.array([-1, 0, 1], dtype=np.int64)

    @property
    def probs(self) -> np.ndarray:
        if not self.lattice:
            raise BadFamilyParams(f"{self.key()} has no lattice support")
        return np.array([self.p, 1.0 - 2.0 * self.p, self.p])

    @property
    def upward_skip_free(self) -> bool:
        return self.lattice and int(self.offsets.max()) == 1

    def pmf(self, k: int) -> float:
        hits = np.nonzero(self.offsets == k)[0]
        return float(self.probs[hits[0]]) if hits.size else 0.0

    def sample(self, rng: np.random.Generator, size):
        if self.kind == FamilyKind.LAZY_LATTICE:
            return rng.choice(self.offsets, size=size, p=self.probs)
        if self.kind == FamilyKind.GAUSSIAN:
            return rng.normal(0.0, self.sigma, size)
        magnitude = (1.0 - rng.random(size)) ** (-1.0 / self.alpha)
        sign = np.where(rng.random(size) < self.balance, 1.0, -1.0)
        return sign * magnitude - self.centering

    def reflected(self) -> "IncrementFamily":
        """The family of -X."""
        if self.kind != FamilyKind.TWO_SIDED_PARETO:
            return self
        return replace(self, balance=1.0 - self.balance, centering=-self.centering,
                       stable_target=self.stable_target.negated())

    def key(self) -> str:
        if self.kind == FamilyKind.LAZY_LATTICE:
            return f"{self.kind.value}(p={self.p!r})"
        if self.kind == FamilyKind.GAUSSIAN:
            return f"{self.kind.value}(sigma={self.sigma!r})"
        return f"{self.kind.value}(alpha={self.alpha!r},balance={self.balance!r},a={self.a_coeff!r})"

    def describe(self) -> str:
        return f"{self.key()} -> {self.stable_target.describe()}, a_n = {self.a_coeff:.6g} n^(1/{self.stable_target.alpha:g}) [{self.norming}]"


def make_family(kind, params: Optional[dict] = None) -> IncrementFamily:
    params = dict(params or {})
    try:
        kind = FamilyKind(kind) if not isinstance(kind, FamilyKind) else kind
    except ValueError:
        raise BadFamilyParams(f"Unknown increment family: {kind}")

    if kind == FamilyKind.LAZY_LATTICE:
        p = float(params.get('p', 0.25))
        if not 0 < p < 0.5:
            raise BadFamilyParams(f"LazyLattice needs 0 < p < 1/2, got p={p}")
        return IncrementFamily(kind, make_params(2.0, 0.0, 0.5), math.sqrt(2 * p), lattice=True, p=p)

    if kind == FamilyKind.GAUSSIAN:
        sigma = float(params.get('sigma', 1.0))
        if not sigma > 0:
            raise BadFamilyParams(f"Gaussian needs sigma > 0, got sigma={sigma}")
        return IncrementFamily(kind, make_params(2.0, 0.0, 0.5), sigma, sigma=sigma)

    alpha = float(params.get('alpha', 1.5))
    balance = float(params.get('balance', 0.5))
    if not 0 < balance < 1:
        raise BadFamilyParams(f"TwoSidedPareto needs 0 < balance < 1, got {balance}")
    if not 0 < alpha < 2 or (alpha == 1 and balance != 0.5):
        raise BadFamilyParams(f"TwoSidedPareto needs alpha in (0,1) or (1,2) (or alpha=1 symmetric), got alpha={alpha}")
    centering = (2 * balance - 1) * alpha / (alpha - 1) if alpha > 1 else 0.0
    if alpha == 1:
        a_coeff = math.pi / 2
    else:
        a_coeff = (gamma_fn(1 - alpha) * math.cos(math.pi * alpha / 2)) ** (1 / alpha)
    family = IncrementFamily(
        kind, make_params(alpha, 2 * balance - 1, 1.0), float(a_coeff),
        alpha=alpha, balance=balance, centering=centering
    )
    if params.get('norming', 'analytic') == 'cf':
        family = pin_scale_by_cf(
            family,
            n=int(params.get('cf_n', 10_000)),
            budget=int(params.get('cf_budget', 2_000)),
            seed=int(params.get('seed', 0))
        )
    return family


def pin_scale_by_cf(family: IncrementFamily, n: int = 10_000, budget: int = 2_000, seed: int = 0,
                    w: float = 1.0) -> IncrementFamily:
    """
    Fix a_coeff so that the empirical |CF| of S_n / a_n at frequency w matches
    |G(w)| = exp(-c |w|^alpha). The matching (n, w, budget) is kept in `norming`.
    """
    target = family.stable_target
    rng = substreams(seed, 1)[0]
    z = simulate_endpoints(family, n, budget, rng) / n ** (1.0 / target.alpha)
    modulus = abs(np.mean(np.exp(1j * w * z)))
    if not 0 < modulus < 1:
        raise BudgetTooSmall(f"Empirical characteristic function modulus {modulus} is degenerate; raise the budget")
    k_hat = -math.log(modulus) / abs(w) ** target.alpha
    a_coeff = (k_hat / target.scale) ** (1.0 / target.alpha)
    return replace(family, a_coeff=a_coeff, norming=f"cf-matched(n={n}, w={w}, budget={budget}, seed={seed})")


def scaling_constants(family: IncrementFamily, n: int) -> Tuple[float, float]:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    a_n = family.a_coeff * n ** (1.0 / family.stable_target.alpha)
    return a_n, 1.0 / (n * a_n)


# --- paths ---------------------------------------------------------------------------------


@dataclass
class WalkPath:
    x0: float
    steps: np.ndarray
    positions: np.ndarray

    @property
    def n(self) -> int:
        return int(self.steps.size)

    @property
    def minima(self) -> np.ndarray:
        """L_k = min(S_1..S_k) for k = 1..n."""
        return np.minimum.accumulate(self.positions[1:])

    @property
    def minima_star(self) -> np.ndarray:
        """L*_k = min(S_0..S_k) for k = 0..n."""
        return np.minimum.accumulate(self.positions)

    def stays_nonnegative(self) -> bool:
        return self.n == 0 or bool(self.positions[1:].min() >= 0)

    @classmethod
    def from_positions(cls, positions) -> "WalkPath":
        positions = np.asarray(positions)
        return cls(positions[0], np.diff(positions), positions)


def simulate_paths(family: IncrementFamily, n: int, count: int, rng: np.random.Generator, x0=0):
    """Positions of `count` independent walks, shape (count, n + 1)."""
    steps = family.sample(rng, (count, n))
    positions = np.empty((count, n + 1), dtype=steps.dtype if family.lattice else float)
    positions[:, 0] = x0
    positions[:, 1:] = x0 + np.cumsum(steps, axis=1)
    return positions


def simulate_path(family: IncrementFamily, n: int, x0, rng: np.random.Generator) -> WalkPath:
    if n < 1 or x0 < 0:
        raise ValueError(f"need n >= 1 and x0 >= 0, got n={n}, x0={x0}")
    return WalkPath.from_positions(simulate_paths(family, n, 1, rng, x0)[0])


def simulate_endpoints(family: IncrementFamily, n: int, count: int, rng: np.random.Generator, x0=0.0):
    """S_n for `count` walks without holding whole paths in memory."""
    out = np.empty(count)
    rows = max(1, min(count, CHUNK_CELLS // max(n, 1)))
    for start in range(0, count, rows):
        r = min(rows, count - start)
        total = np.zeros(r)
        block = max(1, CHUNK_CELLS // r)
        remaining = n
        while remaining:
            b = min(block, remaining)
            total += family.sample(rng, (r, b)).sum(axis=1)
            remaining -= b
        out[start:start + r] = x0 + total
    return out


def dual_positions(positions: np.ndarray) -> np.ndarray:
    """Row-wise time reversal S_n - S_{n-k}, k = 0..n, of a (count, n + 1) position array."""
    rel = positions - positions[:, :1]
    return rel[:, -1:] - rel[:, ::-1]


def dual_path(path: WalkPath) -> WalkPath:
    """The time-reversed walk S_n - S_{n-k}, k = 0..n."""
    return WalkPath.from_positions(dual_positions(path.positions[None, :])[0])


def ladder_counts(positions: np.ndarray, sign: int = 1, strict: bool = True) -> np.ndarray:
    """Number of ladder epochs in each row of a (count, n + 1) position array."""
    s = sign * (positions - positions[:, :1])
    prev = np.maximum.accumulate(s, axis=1)[:, :-1]
    hit = s[:, 1:] > prev if strict else s[:, 1:] >= prev
    return np.count_nonzero(hit, axis=1)


# --- ladder variables ----------------------------------------------------------------------


@dataclass
class Ladder:
    epochs: np.ndarray
    heights: np.ndarray


@dataclass
class LadderStats:
    weak_asc: Ladder
    strict_asc: Ladder
    weak_desc: Ladder
    strict_desc: Ladder


def _ladder(rel: np.ndarray, sign: int, strict: bool) -> Ladder:
    s = sign * rel
    prev = np.maximum.accumulate(s)[:-1]
    hit = s[1:] > prev if strict else s[1:] >= prev
    epochs = np.nonzero(hit)[0] + 1
    return Ladder(epochs, s[epochs])


def ladder_stats(path: WalkPath) -> LadderStats:
    if path.positions.size < 1:
        raise ValueError("ladder_stats needs a nonempty path")
    rel = path.positions - path.positions[0]
    return LadderStats(
        weak_asc=_ladder(rel, 1, False),
        strict_asc=_ladder(rel, 1, True),
        weak_desc=_ladder(rel, -1, False),
        strict_desc=_ladder(rel, -1, True),
    )


# --- lattice dynamic programming -----------------------------------------------------------


def _lattice_steps(family: IncrementFamily, sign: int = 1):
    offsets, probs = family.offsets, family.probs
    if sign < 0:
        return -offsets[::-1], probs[::-1]
    return offsets, probs


def _advance_nonneg(dist: np.ndarray, offsets, probs) -> np.ndarray:
    """One step of the walk killed below 0; dist[i] is the mass at height i."""
    lo, hi = int(offsets.min()), int(offsets.max())
    out = np.zeros(dist.size + hi - lo)
    for o, p in zip(offsets, probs):
        start = int(o) - lo
        out[start:start + dist.size] += p * dist
    # out[i] is the mass at height lo + i
    if lo < 0:
        return out[-lo:]
    return np.concatenate([np.zeros(lo), out])


def _killed_survival(offsets, probs, start: int, n: int) -> np.ndarray:
    """P(G_1 >= 0, ..., G_k >= 0) for k = 0..n, G a lattice walk from `start`."""
    survival = np.ones(n + 1)
    if n == 0:
        return survival
    dist = np.zeros(max(start, 0) + int(offsets.max()) + 1)
    for o, p in zip(offsets, probs):
        h = start + int(o)
        if h >= 0:
            dist[h] += p
    survival[1] = dist.sum()
    for k in range(2, n + 1):
        dist = _advance_nonneg(dist, offsets, probs)
        survival[k] = dist.sum()
    return survival


def _weak_ladder_exit_law(offsets, probs, horizon: int, tol: float = 0.0):
    """
    Law of the first weak ascending ladder height, accumulated over `horizon` steps.
    Returns (law over heights 0..max step, mass still below 0, steps taken).
    """
    hi = int(offsets.max())
    law = np.zeros(hi + 1)
    # below[i] is the mass at height -(i + 1)
    below = np.zeros(max(-int(offsets.min()), 1))
    for o, p in zip(offsets, probs):
        if o >= 0:
            law[int(o)] += p
        else:
            below[-int(o) - 1] += p
    steps = 1
    while steps < horizon and below.sum() > tol:
        grow = max(-int(offsets.min()), 0)
        nxt = np.zeros(below.size + grow)
        for o, p in zip(offsets, probs):
            o = int(o)
            if o <= 0:
                nxt[-o:-o + below.size] += p * below
            else:
                if below.size > o:
                    nxt[:below.size - o] += p * below[o:]
                for i in range(min(o, below.size)):
                    law[o - i - 1] += p * below[i]
        below = np.trim_zeros(nxt, 'b')
        steps += 1
    return law, float(below.sum()), steps


@dataclass(frozen=True)
class ZetaEstimate:
    value: float
    truncation_bound: float
    series_sum: float
    horizon: int
    method: str
    stderr: float = 0.0


def estimate_zeta(family: IncrementFamily, budget: int = 0, horizon: int = 2_000, side: str = "ascending",
                  method: str = "dp", seed: int = 0) -> ZetaEstimate:
    """
    zeta = P(H_1 = 0) for the first weak ladder height on the given side.
    The dp method sums the series term by term up to `horizon`; the mass not yet
    returned is the truncation bound, and it is closed exactly for skip-free families.
    """
    if not family.lattice:
        return ZetaEstimate(0.0, 0.0, 0.0, 0, "atomless")
    sign = 1 if side == "ascending" else -1
    offsets, probs = _lattice_steps(family, sign)

    if method == "mc":
        if budget < 1:
            raise BudgetTooSmall("Monte Carlo zeta needs a positive budget")
        rng = substreams(seed, 1)[0]
        zeros, unresolved = 0, 0
        for part in split_budget(budget, max(1, budget * horizon // CHUNK_CELLS)):
            if not part:
                continue
            s = sign * simulate_paths(family, horizon, part, rng)[:, 1:]
            hit = s >= 0
            first = np.argmax(hit, axis=1)
            resolved = hit[np.arange(part), first]
            unresolved += int(np.count_nonzero(~resolved))
            zeros += int(np.count_nonzero(resolved & (s[np.arange(part), first] == 0)))
        value = zeros / budget
        return ZetaEstimate(value, unresolved / budget, value, horizon, "mc",
                            math.sqrt(value * (1 - value) / budget))

    law, remaining, steps = _weak_ladder_exit_law(offsets, probs, horizon)
    series = float(law[0])
    if int(offsets.max()) == 1:
        # skip-free upward: every excursion below 0 returns exactly to 0
        return ZetaEstimate(series + remaining, 0.0, series, steps, "dp-skip-free")
    return ZetaEstimate(series, remaining, series, steps, "dp")


# --- renewal functions ---------------------------------------------------------------------


@dataclass
class RenewalTable:
    kind: RenewalKind
    grid: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    zeta: float
    method: str
    tail_index: float
    truncation: float = 0.0
    zeta_stderr: float = 0.0
    lattice_values: Optional[np.ndarray] = None

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.lattice_values is not None:
            idx = (np.ceil(x) - 1 if self.kind.lower else np.floor(x)).astype(np.int64)
            top = self.lattice_values.size - 1
            inside = self.lattice_values[np.clip(idx, 0, top)]
            beyond = self.lattice_values[top] * ((idx + 1.0) / (top + 1.0)) ** self.tail_index
            return np.where(idx < 0, 0.0, np.where(idx > top, beyond, inside))
        inside = np.interp(x, self.grid, self.values)
        beyond = self.values[-1] * (np.maximum(x, 1e-300) / self.grid[-1]) ** self.tail_index
        return np.where(x > self.grid[-1], beyond, inside)

    def to_csv(self, path: str) -> str:
        return write_csv(path, ["x", "value", "stderr"], zip(self.grid, self.values, self.stderr))


def _tail_index(family: IncrementFamily, kind: RenewalKind) -> float:
    target = family.stable_target
    rho = target.rho if kind.sign > 0 else 1.0 - target.rho
    return target.alpha * rho


def lattice_renewal_exact(family: IncrementFamily, kind: RenewalKind, grid=None, max_height: Optional[int] = None,
                          horizon: int = 20_000) -> RenewalTable:
    """
    Renewal functions of a bounded-support lattice family from the exact law of
    the first weak ladder height and the discrete renewal equation.
    """
    kind = RenewalKind(kind)
    grid = np.asarray(grid if grid is not None else np.arange(0, 11), dtype=float)
    top = int(max_height if max_height is not None else max(np.ceil(grid.max()), 1))
    offsets, probs = _lattice_steps(family, kind.sign)
    law, remaining, _ = _weak_ladder_exit_law(offsets, probs, 1 if int(offsets.max()) == 1 else horizon)
    if int(offsets.max()) == 1:
        law[0] += remaining
        remaining = 0.0
    zeta = float(law[0])
    strict_law = law / (1.0 - zeta)
    strict_law[0] = 0.0

    # u(0) = 1, u(x) = sum_j strict_law[j] u(x - j)
    u = np.zeros(top + 1)
    u[0] = 1.0
    for x in range(1, top + 1):
        j = np.arange(1, min(x, strict_law.size - 1) + 1)
        u[x] = np.dot(strict_law[j], u[x - j])
    cumulative = np.cumsum(u)
    if not kind.strict:
        cumulative = cumulative / (1.0 - zeta)

    table = RenewalTable(
        kind, grid, np.zeros_like(grid), np.zeros_like(grid), zeta, "exact",
        _tail_index(family, kind), truncation=remaining, lattice_values=cumulative
    )
    table.values = np.asarray(table(grid), dtype=float)
    return table


def estimate_renewal(family: IncrementFamily, kind, grid, budget: int = 1_000, seed: int = 0, partitions: int = 1,
                     horizon: int = 100_000, method: str = "auto", max_rel_error: float = 0.1,
                     progress=None) -> RenewalTable:
    """Monte Carlo renewal function from ladder-height counts; exact DP for lattice families unless method='mc'."""
    kind = RenewalKind(kind)
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0 or grid.min() < 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("renewal grid must be nonnegative and strictly increasing")
    if family.lattice and method in ("auto", "exact"):
        return lattice_renewal_exact(family, kind, grid)
    if budget < 2:
        raise BudgetTooSmall(f"Renewal estimation needs at least 2 walks, got {budget}")

    gmax = grid.max()
    counts = np.zeros((budget, grid.size))
    first_zero = np.zeros(budget, dtype=bool)
    open_rows = 0
    row = 0
    streams = substreams(seed, partitions)
    for part_index, (rng, part) in enumerate(zip(streams, split_budget(budget, partitions))):
        rows_per = max(1, min(part, CHUNK_CELLS // 1_000))
        for start in range(0, part, rows_per):
            r = min(rows_per, part - start)
            pos = np.zeros(r)
            run_max = np.zeros(r)
            first = np.full(r, np.nan)
            block = max(1, min(horizon, CHUNK_CELLS // r))
            done = 0
            while done < horizon and run_max.min() <= gmax:
                b = min(block, horizon - done)
                s = pos[:, None] + np.cumsum(kind.sign * family.sample(rng, (r, b)), axis=1)
                run = np.maximum.accumulate(np.concatenate([run_max[:, None], s], axis=1), axis=1)
                hit = s > run[:, :-1] if kind.strict else s >= run[:, :-1]
                missing = np.isnan(first) & hit.any(axis=1)
                if missing.any():
                    idx = np.argmax(hit[missing], axis=1)
                    first[missing] = s[missing][np.arange(idx.size), idx]
                for gi, g in enumerate(grid):
                    below = s < g if kind.lower else s <= g
                    counts[row:row + r, gi] += np.count_nonzero(hit & below, axis=1)
                pos, run_max = s[:, -1], run[:, -1]
                done += b
            open_rows += int(np.count_nonzero(run_max <= gmax))
            first_zero[row:row + r] = first == 0
            row += r
        if progress:
            progress(part_index + 1, partitions)

    # the k = 0 term: H_0 = 0
    counts += (grid > 0) if kind.lower else 1.0
    values = counts.mean(axis=0)
    stderr = counts.std(axis=0, ddof=1) / math.sqrt(budget)
    rel = np.divide(stderr, values, out=np.zeros_like(values), where=values > 0)
    if np.any(rel > max_rel_error):
        raise BudgetTooSmall(f"Renewal estimate relative error {rel.max():.3g} exceeds {max_rel_error:g}; raise the budget")
    zeta = float(first_zero.mean()) if family.lattice else 0.0
    return RenewalTable(
        kind, grid, values, stderr, zeta, "mc", _tail_index(family, kind),
        truncation=open_rows / budget,
        zeta_stderr=math.sqrt(zeta * (1 - zeta) / budget) if family.lattice else 0.0
    )


@dataclass
class RenewalScaling:
    """V+ and V- evaluated at the norming sequence a_n."""
    ns: np.ndarray
    a_n: np.ndarray
    v_plus: np.ndarray
    v_minus: np.ndarray
    method: str

    @property
    def slope(self) -> float:
        """Least-squares slope of log V+(a_n) against log n; rho for a regularly varying V+."""
        return float(np.polyfit(np.log(self.ns), np.log(self.v_plus), 1)[0])

    @property
    def products(self) -> np.ndarray:
        return self.v_plus * self.v_minus / self.ns

    @property
    def product_spread(self) -> float:
        """(max - min) / min of V+(a_n) V-(a_n) / n."""
        p = self.products
        return float((p.max() - p.min()) / p.min())


def renewal_scaling(family: IncrementFamily, ns, budget: int = 1_000, seed: int = 0, partitions: int = 1,
                    horizon: int = 100_000) -> RenewalScaling:
    ns = np.asarray(ns, dtype=np.int64)
    if ns.size < 2 or ns.min() < 1 or np.any(np.diff(ns) <= 0):
        raise ValueError("renewal scaling needs at least two strictly increasing n >= 1")
    a_n = np.array([scaling_constants(family, int(n))[0] for n in ns])
    plus = estimate_renewal(family, RenewalKind.V_PLUS, a_n, budget, seed, partitions, horizon)
    minus = estimate_renewal(family, RenewalKind.V_MINUS, a_n, budget, seed + 1, partitions, horizon)
    return RenewalScaling(ns.astype(float), a_n, np.asarray(plus.values, dtype=float),
                          np.asarray(minus.values, dtype=float), plus.method)


@dataclass(frozen=True)
class LadderTail:
    sign: int
    strict: bool
    probs: np.ndarray
    stderr: np.ndarray
    method: str

    def at(self, n: int) -> float:
        return float(self.probs[n])


def ladder_tail(family: IncrementFamily, n: int, sign: int = 1, strict: bool = False, budget: int = 100_000,
                seed: int = 0) -> LadderTail:
    """
    P(tau_1 > k), k = 0..n, for the first ladder epoch on the given side.
    sign=+1: weak ascending (S stays < 0) or strict (S stays <= 0);
    sign=-1: weak descending (S stays > 0) or strict (S stays >= 0).
    """
    top = 0 if strict else -1
    if family.lattice:
        offsets, probs = _lattice_steps(family, -sign)
        survival = _killed_survival(offsets, probs, top, n)
        return LadderTail(sign, strict, survival, np.zeros(n + 1), "exact")

    # ties have probability zero, so weak and strict epochs coincide
    rng = substreams(seed, 1)[0]
    alive_counts = np.zeros(n + 1)
    rows_per = max(1, min(budget, CHUNK_CELLS // max(n, 1)))
    for start in range(0, budget, rows_per):
        r = min(rows_per, budget - start)
        g = -sign * np.cumsum(family.sample(rng, (r, n)), axis=1)
        alive = np.logical_and.accumulate(g >= 0, axis=1)
        alive_counts[0] += r
        alive_counts[1:] += alive.sum(axis=0)
    probs = alive_counts / budget
    return LadderTail(sign, strict, probs, np.sqrt(probs * (1 - probs) / budget), "mc")


# --- exact kernel ---------------------------------------------------------------------------


@dataclass
class ConditionKernel:
    """q_n(x, y) = P_x(L_n >= 0, S_n = y) for n = 0..N; tables[n][y]."""
    family: IncrementFamily
    N: int
    x: int
    tables: List[np.ndarray] = field(repr=False)

    def q(self, n: int, y: int) -> float:
        row = self.tables[n]
        return float(row[y]) if 0 <= y < row.size else 0.0

    def row_sum(self, n: int) -> float:
        return float(self.tables[n].sum())

    def survival(self) -> np.ndarray:
        return np.array([t.sum() for t in self.tables])

    def digest(self) -> str:
        return array_digest(*self.tables)

    def to_csv(self, path: str) -> str:
        rows = ((n, y, q) for n, t in enumerate(self.tables) for y, q in enumerate(t))
        return write_csv(path, ["n", "y", "q"], rows)


def _check_lattice(family: IncrementFamily, x):
    if not family.lattice:
        raise BadFamilyParams(f"{family.key()} is not a bounded-support lattice family")
    if x < 0 or int(x) != x:
        raise ValueError(f"lattice start must be a nonnegative integer, got {x}")


def exact_kernel(family: IncrementFamily, N: int, x: int, max_cells: int = DEFAULT_MAX_KERNEL_CELLS) -> ConditionKernel:
    _check_lattice(family, x)
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    x = int(x)
    up = int(family.offsets.max())
    cells = (N + 1) * (x + 1) + up * N * (N + 1) // 2
    if cells > max_cells:
        raise HorizonTooLarge(f"Kernel for N={N}, x={x} needs {cells} cells (limit {max_cells})")
    row = np.zeros(x + 1)
    row[x] = 1.0
    tables = [row]
    for _ in range(N):
        row = _advance_nonneg(row, family.offsets, family.probs)
        tables.append(row)
    return ConditionKernel(family, N, x, tables)


def forward_distribution(family: IncrementFamily, n: int, x: int, cap: Optional[int] = None):
    """
    Row q_n(x, .) computed in a single pass. With `cap`, mass moving above
    height cap is dropped; returns (row, lost mass).
    """
    _check_lattice(family, x)
    row = np.zeros(int(x) + 1)
    row[int(x)] = 1.0
    lost = 0.0
    for _ in range(n):
        row = _advance_nonneg(row, family.offsets, family.probs)
        if cap is not None and row.size > cap + 1:
            lost += float(row[cap + 1:].sum())
            row = row[:cap + 1]
    return row, lost


def backward_survival(family: IncrementFamily, n: int, y: Optional[float] = None, cap: Optional[int] = None):
    """
    f(k) = P_k(L_n >= 0, S_n <= y) for starting heights k = 0..cap (y=None: no end constraint).
    The default cap makes the table exact; a smaller cap treats heights above it as
    certain survivors (y=None) or certain misses (finite y).
    """
    _check_lattice(family, 0)
    offsets, probs = family.offsets, family.probs
    down, up = -int(offsets.min()), int(offsets.max())
    if cap is None:
        cap = n * down + (int(math.floor(y)) if y is not None else 0)
    heights = np.arange(cap + 1)
    f = np.ones(cap + 1) if y is None else (heights <= y).astype(float)
    beyond = 1.0 if y is None else 0.0
    for _ in range(n):
        ext = np.concatenate([np.zeros(down), f, np.full(up, beyond)])
        nxt = np.zeros(cap + 1)
        for o, p in zip(offsets, probs):
            nxt += p * ext[down + int(o):down + int(o) + cap + 1]
        f = nxt
    return f


# --- conditioned sampling -------------------------------------------------------------------


@dataclass(frozen=True)
class EndSpec:
    """End condition on S_N: exact height, at most y, or free."""
    kind: str = "free"
    y: float = math.inf

    @classmethod
    def exact(cls, y) -> "EndSpec":
        return cls("exact", y)

    @classmethod
    def at_most(cls, y) -> "EndSpec":
        return cls("at_most", y)

    @classmethod
    def free(cls) -> "EndSpec":
        return cls()

    def holds(self, s):
        s = np.asarray(s)
        if self.kind == "exact":
            return s == self.y
        if self.kind == "at_most":
            return s <= self.y
        return np.ones(s.shape, dtype=bool)


def _pick(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Row-wise categorical draw from unnormalised weights."""
    cum = np.cumsum(weights, axis=1)
    u = rng.random(weights.shape[0]) * cum[:, -1]
    return np.minimum((cum <= u[:, None]).sum(axis=1), weights.shape[1] - 1)


def sample_conditioned_batch(family: IncrementFamily, N: int, x, end: EndSpec, mode: str, rng: np.random.Generator,
                             count: int, kernel: Optional[ConditionKernel] = None,
                             max_attempts: int = DEFAULT_REJECTION_ATTEMPTS) -> np.ndarray:
    """Positions of `count` paths drawn from P_x(. | L_N >= 0, end); shape (count, N + 1)."""
    if mode == "dp_backward":
        _check_lattice(family, x)
        kernel = kernel or exact_kernel(family, N, x)
        final = kernel.tables[N]
        weights = final * end.holds(np.arange(final.size))
        if weights.sum() <= 0:
            raise ImpossibleEvent(f"P_x(L_N >= 0, S_N {end.kind} {end.y}) = 0 for x={x}, N={N}")
        offsets, probs = family.offsets, family.probs
        pos = np.empty((count, N + 1), dtype=np.int64)
        pos[:, N] = rng.choice(final.size, size=count, p=weights / weights.sum())
        for k in range(N, 0, -1):
            prev = kernel.tables[k - 1]
            cand = pos[:, k][:, None] - offsets[None, :]
            valid = (cand >= 0) & (cand < prev.size)
            w = np.where(valid, prev[np.clip(cand, 0, prev.size - 1)], 0.0) * probs[None, :]
            pos[:, k - 1] = cand[np.arange(count), _pick(w, rng)]
        return pos

    if mode != "rejection":
        raise ValueError(f"Unknown sampling mode: {mode}")
    if end.kind == "exact" and not family.lattice:
        raise ImpossibleEvent("An exact end height has probability 0 for an atomless family")
    accepted, need, attempts = [], count, 0
    rows_per = max(1, CHUNK_CELLS // (N + 1))
    while need > 0:
        if attempts >= max_attempts:
            raise RejectionBudgetExceeded(f"Only {count - need}/{count} paths accepted after {attempts} attempts")
        r = min(rows_per, max_attempts - attempts)
        paths = simulate_paths(family, N, r, rng, x)
        ok = (paths[:, 1:].min(axis=1) >= 0) & end.holds(paths[:, -1])
        keep = paths[ok][:need]
        accepted.append(keep)
        need -= keep.shape[0]
        attempts += r
    return np.concatenate(accepted, axis=0)


def sample_conditioned(family: IncrementFamily, N: int, x, end: EndSpec, mode: str, rng: np.random.Generator,
                       kernel: Optional[ConditionKernel] = None,
                       max_attempts: int = DEFAULT_REJECTION_ATTEMPTS) -> WalkPath:
    positions = sample_conditioned_batch(family, N, x, end, mode, rng, 1, kernel, max_attempts)
    return WalkPath.from_positions(positions[0])


def sample_h_transform_batch(family: IncrementFamily, N: int, x, rng: np.random.Generator, renewal: RenewalTable,
                             count: int, mode: str = "rejection",
                             max_attempts: int = DEFAULT_REJECTION_ATTEMPTS):
    """
    Paths under P_x^up with weights. In rejection mode survivors of {L_N >= 0} carry
    V-(S_N)/V-(x) and averages must be self-normalised; chain mode (lattice, exact V-)
    runs the Doob-transformed chain and returns unit weights.
    """
    if mode == "chain":
        if not family.lattice or renewal.method != "exact":
            raise BadFamilyParams("The exact h-transform chain needs a lattice family and an exact renewal table")
        offsets, probs = family.offsets, family.probs
        pos = np.empty((count, N + 1), dtype=np.int64)
        pos[:, 0] = int(x)
        for k in range(1, N + 1):
            cand = pos[:, k - 1][:, None] + offsets[None, :]
            w = probs[None, :] * np.where(cand >= 0, renewal(cand), 0.0)
            pos[:, k] = cand[np.arange(count), _pick(w, rng)]
        return pos, np.ones(count)

    positions = sample_conditioned_batch(family, N, x, EndSpec.free(), "rejection", rng, count, max_attempts=max_attempts)
    weights = renewal(positions[:, -1]) / float(renewal(x))
    return positions, weights


def sample_h_transform(family: IncrementFamily, N: int, x, rng: np.random.Generator, renewal: RenewalTable,
                       mode: str = "rejection") -> Tuple[WalkPath, float]:
    positions, weights = sample_h_transform_batch(family, N, x, rng, renewal, 1, mode)
    return WalkPath.from_positions(positions[0]), float(weights[0])


def weighted_mean(values, weights) -> float:
    weights = np.asarray(weights, dtype=float)
    return float(np.sum(weights * np.asarray(values, dtype=float)) / np.sum(weights))


def self_normalised(values, weights) -> Tuple[float, float]:
    """Self-normalised weighted mean and its delta-method standard error."""
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    total = weights.sum()
    if not total > 0:
        raise BudgetTooSmall("All importance weights vanish")
    mean = float(np.sum(weights * values) / total)
    return mean, float(math.sqrt(np.sum((weights * (values - mean)) ** 2)) / total)


@dataclass
class PairedEstimate:
    """Two independent estimates of one quantity."""
    first: float
    first_stderr: float
    second: float
    second_stderr: float

    @property
    def z_score(self) -> float:
        se = math.hypot(self.first_stderr, self.second_stderr)
        if se == 0:
            return 0.0 if self.first == self.second else math.inf
        return abs(self.first - self.second) / se


def _h_mode(family: IncrementFamily, renewal: RenewalTable) -> str:
    return "chain" if family.lattice and renewal.method == "exact" else "rejection"


def h_transform_identity(family: IncrementFamily, N: int, x, renewal: RenewalTable, count: int,
                         rng: np.random.Generator, level: Optional[float] = None) -> PairedEstimate:
    """
    P_x^up(S_N <= level) from h-transformed paths (first) against
    E_x[V-(S_N); S_N <= level, L_N >= 0] / V-(x) over free walks (second).
    The level defaults to a_N.
    """
    level = scaling_constants(family, N)[0] if level is None else level
    up, weights = sample_h_transform_batch(family, N, x, rng, renewal, count, _h_mode(family, renewal))
    first, first_se = self_normalised(up[:, -1] <= level, weights)

    free = simulate_paths(family, N, count, rng, x0=x)
    keep = (free[:, 1:].min(axis=1) >= 0) & (free[:, -1] <= level)
    v = np.where(keep, renewal(free[:, -1]), 0.0) / float(renewal(x))
    return PairedEstimate(first, first_se, float(v.mean()), float(v.std(ddof=1) / math.sqrt(count)))


def h_transform_horizons(family: IncrementFamily, k: int, x, renewal: RenewalTable, count: int,
                         rng: np.random.Generator, level: Optional[float] = None) -> PairedEstimate:
    """P_x^up(S_k <= level) from weighted survivors of horizons N = 2k (first) and N = 4k (second)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    level = scaling_constants(family, k)[0] if level is None else level
    out = []
    for N in (2 * k, 4 * k):
        pos, weights = sample_h_transform_batch(family, N, x, rng, renewal, count, "rejection")
        out.extend(self_normalised(pos[:, k] <= level, weights))
    return PairedEstimate(*out)


# --- kernel bound ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelBoundFit:
    constant: float
    argmax: Tuple[int, int, int]
    N: int


def prop4h_constant(family: IncrementFamily, N: int, xs, ys) -> KernelBoundFit:
    """Smallest C with q_n(x,y) <= C b_n V-(x) V+(y) over n <= N and the given heights."""
    v_minus = lattice_renewal_exact(family, RenewalKind.V_MINUS, max_height=int(max(xs)))
    v_plus = lattice_renewal_exact(family, RenewalKind.V_PLUS, max_height=int(max(ys)))
    ys = np.asarray(ys, dtype=np.int64)
    best, where = 0.0, (0, 0, 0)
    for x in xs:
        row = np.zeros(int(x) + 1)
        row[int(x)] = 1.0
        for n in range(1, N + 1):
            row = _advance_nonneg(row, family.offsets, family.probs)
            q = np.where(ys < row.size, row[np.clip(ys, 0, row.size - 1)], 0.0)
            _, b_n = scaling_constants(family, n)
            ratio = q / (b_n * float(v_minus(x)) * v_plus(ys))
            k = int(np.argmax(ratio))
            if ratio[k] > best:
                best, where = float(ratio[k]), (n, int(x), int(ys[k]))
    return KernelBoundFit(best, where, N)


def prop4h_violations(family: IncrementFamily, constant: float, N: int, xs, ys) -> int:
    v_minus = lattice_renewal_exact(family, RenewalKind.V_MINUS, max_height=int(max(xs)))
    v_plus = lattice_renewal_exact(family, RenewalKind.V_PLUS, max_height=int(max(ys)))
    ys = np.asarray(ys, dtype=np.int64)
    violations = 0
    for x in xs:
        row = np.zeros(int(x) + 1)
        row[int(x)] = 1.0
        for n in range(1, N + 1):
            row = _advance_nonneg(row, family.offsets, family.probs)
            q = np.where(ys < row.size, row[np.clip(ys, 0, row.size - 1)], 0.0)
            _, b_n = scaling_constants(family, n)
            bound = constant * b_n * float(v_minus(x)) * v_plus(ys)
            violations += int(np.count_nonzero(q > bound * (1 + 1e-12)))
    return violations


# --- cache ---------------------------------------------------------------------------------


def cache_key(family: IncrementFamily, *parts) -> str:
    text = "|".join([family.key()] + [str(p) for p in parts])
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_kernel(kernel: ConditionKernel, directory: str) -> str:
    ensure_dir(directory)
    path = os.path.join(directory, f"kernel-{cache_key(kernel.family, kernel.N, kernel.x)}.npz")
    lengths = np.array([t.size for t in kernel.tables], dtype=np.int64)
    try:
        np.savez_compressed(path, flat=np.concatenate(kernel.tables), lengths=lengths,
                            digest=np.array(kernel.digest()), key=np.array(kernel.family.key()))
    except OSError as e:
        raise IoFailure(f"Cannot write kernel cache {path}: {e}")
    return path


def load_kernel(directory: str, family: IncrementFamily, N: int, x: int) -> ConditionKernel:
    path = os.path.join(directory, f"kernel-{cache_key(family, N, x)}.npz")
    if not os.path.exists(path):
        raise DependencyMissing(f"No cached kernel for {family.key()}, N={N}, x={x} in {directory}")
    with np.load(path) as data:
        tables = np.split(data['flat'], np.cumsum(data['lengths'])[:-1])
        kernel = ConditionKernel(family, N, x, list(tables))
        if str(data['digest']) != kernel.digest() or str(data['key']) != family.key():
            raise DependencyMissing(f"Cached kernel {path} fails its content hash")
    return kernel


def save_renewal(table: RenewalTable, family: IncrementFamily, directory: str) -> str:
    ensure_dir(directory)
    path = os.path.join(directory, f"renewal-{cache_key(family, table.kind.value, table.method)}.npz")
    lattice = table.lattice_values if table.lattice_values is not None else np.zeros(0)
    try:
        np.savez_compressed(
            path, grid=table.grid, values=table.values, stderr=table.stderr, lattice=lattice,
            scalars=np.array([table.zeta, table.tail_index, table.truncation, table.zeta_stderr]),
            digest=np.array(array_digest(table.grid, table.values, table.stderr, lattice))
        )
    except OSError as e:
        raise IoFailure(f"Cannot write renewal cache {path}: {e}")
    return path


def load_renewal(directory: str, family: IncrementFamily, kind, method: str = "exact") -> RenewalTable:
    kind = RenewalKind(kind)
    path = os.path.join(directory, f"renewal-{cache_key(family, kind.value, method)}.npz")
    if not os.path.exists(path):
        raise DependencyMissing(f"No cached {kind.value} table for {family.key()} in {directory}")
    with np.load(path) as data:
        if str(data['digest']) != array_digest(data['grid'], data['values'], data['stderr'], data['lattice']):
            raise DependencyMissing(f"Cached renewal table {path} fails its content hash")
        zeta, tail_index, truncation, zeta_stderr = (float(v) for v in data['scalars'])
        lattice = data['lattice'] if data['lattice'].size else None
        return RenewalTable(kind, data['grid'], data['values'], data['stderr'], zeta, method, tail_index,
                            truncation, zeta_stderr, lattice)


def cached_kernel(directory: Optional[str], family: IncrementFamily, N: int, x: int):
    """(kernel, cache path or None): loads a verified cached kernel, otherwise builds and stores it."""
    if not directory:
        return exact_kernel(family, N, x), None
    path = os.path.join(directory, f"kernel-{cache_key(family, N, x)}.npz")
    if os.path.exists(path):
        return load_kernel(directory, family, N, x), path
    kernel = exact_kernel(family, N, x)
    return kernel, save_kernel(kernel, directory)
