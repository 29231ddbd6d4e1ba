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

"""Strictly stable laws: admissible parameters, inversion and sampling."""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import IntegrationWarning, quad, trapezoid

from walklab.base_experiment import InadmissiblePair, NonpositiveScale, QuadratureFailure
from walklab.utils import split_budget, substreams, write_csv

DEFAULT_QUAD_TOL = 1e-8
# exp(-46) < 1e-20: the characteristic function is negligible past this
CF_CUTOFF = 46.0
# beyond this many radians of oscillation switch to the Fourier-weighted rule
OSCILLATION_LIMIT = 400.0


@dataclass(frozen=True)
class StableParams:
    alpha: float
    beta: float
    scale: float
    rho: float

    @property
    def sigma(self) -> float:
        """Scale of Y_1 in the units of x: c ** (1 / alpha)."""
        return self.scale ** (1.0 / self.alpha)

    @property
    def alpha_rho(self) -> float:
        return self.alpha * self.rho

    @property
    def skew_tan(self) -> float:
        """beta * tan(pi * alpha / 2), zero for the symmetric laws."""
        if self.beta == 0:
            return 0.0
        return self.beta * math.tan(math.pi * self.alpha / 2)

    def negated(self) -> "StableParams":
        """Parameters of -Y_1."""
        return StableParams(self.alpha, -self.beta, self.scale, 1.0 - self.rho)

    def describe(self) -> str:
        return f"alpha={self.alpha:g}, beta={self.beta:g}, c={self.scale:g}, rho={self.rho:.6g}"


@dataclass(frozen=True)
class PositivityEstimate:
    rho: float
    stderr: float
    closed_form: float
    draws: int


def is_admissible(alpha: float, beta: float) -> bool:
    if abs(beta) >= 1:
        return False
    if 0 < alpha < 1 or 1 < alpha < 2:
        return True
    return alpha in (1, 2) and beta == 0


def closed_form_rho(alpha: float, beta: float) -> float:
    """rho = 1/2 + arctan(beta tan(pi alpha / 2)) / (pi alpha)."""
    if beta == 0:
        return 0.5
    return 0.5 + math.atan(beta * math.tan(math.pi * alpha / 2)) / (math.pi * alpha)


def make_params(alpha: float, beta: float, scale: float) -> StableParams:
    if not scale > 0:
        raise NonpositiveScale(f"Scale must be positive, got {scale}")
    if not is_admissible(alpha, beta):
        raise InadmissiblePair(f"(alpha={alpha}, beta={beta}) is outside the admissible set")
    return StableParams(float(alpha), float(beta), float(scale), closed_form_rho(alpha, beta))


def char_function(params: StableParams, w):
    """G(w) = exp(-c|w|^alpha (1 - i beta sgn(w) tan(pi alpha / 2)))."""
    w = np.asarray(w, dtype=float)
    aw = np.abs(w) ** params.alpha
    return np.exp(-params.scale * aw * (1 - 1j * np.sign(w) * params.skew_tan))


def empirical_char_function(samples, w):
    samples = np.asarray(samples, dtype=float)
    w = np.atleast_1d(np.asarray(w, dtype=float))
    return np.array([np.mean(np.exp(1j * wk * samples)) for wk in w])


def positivity_parameter(params: StableParams, budget: int = 10**6, seed: int = 0,
                         partitions: int = 1) -> PositivityEstimate:
    """Monte Carlo estimate of P(Y_1 > 0); exactly 1/2 when beta = 0."""
    if params.beta == 0:
        return PositivityEstimate(0.5, 0.0, 0.5, 0)
    positives = 0
    for rng, part in zip(substreams(seed, partitions), split_budget(budget, partitions)):
        positives += int(np.count_nonzero(sample_stable(params, rng, part) > 0))
    rho = positives / budget
    stderr = math.sqrt(max(rho * (1 - rho), 0.0) / budget)
    return PositivityEstimate(rho, stderr, closed_form_rho(params.alpha, params.beta), budget)


def _quad(func, a, b, tol, **kwargs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IntegrationWarning)
        value, abserr = quad(func, a, b, epsabs=tol, epsrel=1e-12, **kwargs)[:2]
    if not np.isfinite(value):
        raise QuadratureFailure(f"Non-finite quadrature result on [{a}, {b}]")
    return value, abserr


def _cutoff(params: StableParams) -> float:
    return (CF_CUTOFF / params.scale) ** (1.0 / params.alpha)


def stable_density(params: StableParams, x: float, quad_tol: float = DEFAULT_QUAD_TOL) -> float:
    """g(x) = (1/pi) int_0^inf exp(-c w^a) cos(w x - c t w^a) dw."""
    a, c, t = params.alpha, params.scale, params.skew_tan
    x = float(x)
    upper = _cutoff(params)
    tol = quad_tol * math.pi / 2

    if abs(x) * upper <= OSCILLATION_LIMIT:
        value, abserr = _quad(
            lambda w: math.exp(-c * w**a) * math.cos(w * x - c * t * w**a),
            0.0, upper, tol, limit=2000
        )
    else:
        # cos(wx - phi) = cos(w|x|) cos(phi) + sgn(x) sin(w|x|) sin(phi)
        value, abserr = _quad(
            lambda w: math.exp(-c * w**a) * math.cos(c * t * w**a),
            0.0, np.inf, tol, weight='cos', wvar=abs(x), limlst=200
        )
        if t != 0:
            v2, e2 = _quad(
                lambda w: math.exp(-c * w**a) * math.sin(c * t * w**a),
                0.0, np.inf, tol, weight='sin', wvar=abs(x), limlst=200
            )
            value += math.copysign(1.0, x) * v2
            abserr += e2

    if abserr / math.pi > quad_tol:
        raise QuadratureFailure(f"Density at x={x} not resolved: error {abserr / math.pi:.3g} > {quad_tol:.3g}")
    return max(value / math.pi, 0.0)


def stable_cdf(params: StableParams, z: float, quad_tol: float = DEFAULT_QUAD_TOL) -> float:
    """Gil-Pelaez inversion: 1/2 + (1/pi) int_0^inf exp(-c w^a) sin(w z - c t w^a) / w dw."""
    a, c, t = params.alpha, params.scale, params.skew_tan
    z = float(z)
    upper = _cutoff(params)
    tol = quad_tol * math.pi / 3

    def integrand(w):
        return math.exp(-c * w**a) * math.sin(w * z - c * t * w**a) / w

    if abs(z) * upper <= OSCILLATION_LIMIT:
        value, abserr = _quad(integrand, 0.0, upper, tol, limit=2000)
    else:
        head = 2 * math.pi / abs(z)
        value, abserr = _quad(integrand, 0.0, head, tol, limit=200)
        # sin(wz - phi) / w = [sgn(z) sin(w|z|) cos(phi) - cos(w|z|) sin(phi)] / w
        v1, e1 = _quad(
            lambda w: math.exp(-c * w**a) * math.cos(c * t * w**a) / w,
            head, np.inf, tol, weight='sin', wvar=abs(z), limlst=200
        )
        value += math.copysign(1.0, z) * v1
        abserr += e1
        if t != 0:
            v2, e2 = _quad(
                lambda w: math.exp(-c * w**a) * math.sin(c * t * w**a) / w,
                head, np.inf, tol, weight='cos', wvar=abs(z), limlst=200
            )
            value -= v2
            abserr += e2

    if abserr / math.pi > quad_tol:
        raise QuadratureFailure(f"CDF at z={z} not resolved: error {abserr / math.pi:.3g} > {quad_tol:.3g}")
    return min(max(0.5 + value / math.pi, 0.0), 1.0)


@dataclass
class DensityTable:
    grid: np.ndarray
    values: np.ndarray
    params: StableParams
    quad_tol: float

    def __call__(self, x):
        return np.interp(x, self.grid, self.values, left=0.0, right=0.0)

    def mass(self) -> float:
        return float(trapezoid(self.values, self.grid))

    def to_csv(self, path: str) -> str:
        return write_csv(path, ["x", "g"], zip(self.grid, self.values))


def density_table(params: StableParams, grid, quad_tol: float = DEFAULT_QUAD_TOL) -> DensityTable:
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("density grid must be strictly increasing")
    values = np.array([stable_density(params, x, quad_tol) for x in grid])
    return DensityTable(grid, values, params, quad_tol)


def sample_stable(params: StableParams, rng: np.random.Generator, size=None):
    """
    Chambers-Mallows-Stuck construction in the form given by Weron (1996).
    Returns draws of Y_1 with characteristic function `char_function(params, .)`.
    """
    a = params.alpha
    v = rng.uniform(-np.pi / 2, np.pi / 2, size)
    w = rng.standard_exponential(size)
    if a == 1:
        x = np.tan(v)
    else:
        t = params.skew_tan
        shift = math.atan(t) / a
        factor = (1 + t * t) ** (1 / (2 * a))
        x = (factor * np.sin(a * (v + shift)) / np.cos(v) ** (1 / a)
             * (np.cos(v - a * (v + shift)) / w) ** ((1 - a) / a))
    return params.sigma * x
