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

import math

import numpy as np

from walklab.base_experiment import BaseExperiment, ExperimentKind, InvalidConfig, TooFewAccepted
from walklab.limit_laws import (
    LimitLawEval, conditional_cdf_exact, conditional_cdf_rejection, estimate_bridge_positivity, estimate_constants,
    estimate_meander_density, eval_curve, regime3_reference
)
from walklab.walk_engine import make_family, scaling_constants

TASKS = ("meander", "bridge", "constants", "laws", "brownian", "continuous")


def rayleigh(w):
    w = np.asarray(w, dtype=float)
    return np.where(w >= 0, w * np.exp(-0.5 * w * w), 0.0)


class LimitLawExperiment(BaseExperiment):
    """Meander, bridge, constants and the regime laws built on them"""

    def __init__(self, debug: bool = False, status_callback=None, progress_callback=None, log_callback=None):
        super().__init__(debug, status_callback, progress_callback, log_callback)
        self.family = None
        self.task = None
        self.results = {}
        self.accepted = 0

    def load_config(self, config):
        if self.detect_experiment_kind(config) != ExperimentKind.LIMIT_LAW:
            raise InvalidConfig(f"{config.kind} is not a limit-law config")
        self.task = config.params.get('task', 'laws')
        if self.task not in TASKS:
            raise InvalidConfig(f"Unknown limit-law task '{self.task}' (expected one of {', '.join(TASKS)})")
        self.family = make_family(config.family.get('kind', 'lazy-lattice'), config.family)
        if self.task in ("brownian", "continuous") and self.family.stable_target.alpha != 2:
            raise InvalidConfig(f"The {self.task} task compares against Brownian closed forms and needs alpha = 2")
        self.config = config

    def describe_target(self):
        return self.family.describe() if self.family else None

    @staticmethod
    def detect_experiment_kind(config) -> ExperimentKind:
        if config.kind == ExperimentKind.LIMIT_LAW.value:
            return ExperimentKind.LIMIT_LAW
        return ExperimentKind.UNKNOWN

    def simulate(self):
        getattr(self, f"_simulate_{self.task}")()

    def check(self):
        getattr(self, f"_check_{self.task}")()

    def _progress(self, done, total):
        self.partition_progress(done, total)

    # --- meander ----------------------------------------------------------------------------

    def _meanders(self, n_steps):
        cfg = self.config
        grid = np.linspace(0.0, float(cfg.params.get('reach', 6.0)), int(cfg.params.get('grid_points', 301)))
        tables = {}
        for sign in (1, -1):
            tables[sign] = estimate_meander_density(
                self.family, sign, grid, n_steps=n_steps, budget=cfg.budget('meander', 4_000),
                seed=cfg.seed + (sign > 0), partitions=cfg.partitions, progress=self._progress
            )
            self.log(f"meander {'+' if sign > 0 else '-'}: {tables[sign].provenance['method']}, "
                     f"mass {tables[sign].mass():.6f}")
        if self.family.stable_target.alpha == 2:
            rows = zip(grid, tables[1].values, tables[-1].values, tables[1].stderr, rayleigh(grid),
                       np.abs(tables[1].values - rayleigh(grid)))
        else:
            rows = zip(grid, tables[1].values, tables[-1].values, tables[1].stderr,
                       np.full(grid.size, math.nan), np.zeros(grid.size))
        self.add_table("meander", ["z", "g_plus", "g_minus", "g_plus_stderr", "rayleigh", "abs_diff"], rows)
        if tables[1].provenance['method'] != 'dp':
            self.report.replica_counts['meander'] = int(tables[1].atoms.size + tables[-1].atoms.size)
        return tables

    def _simulate_meander(self):
        self.results['meander'] = self._meanders(int(self.config.params.get('n_steps', 1000)))

    def _meander_window_distance(self, lo=0.1, hi=3.0):
        rows = self.report.tables['meander'][1]
        return max(r[-1] for r in rows if lo <= r[0] <= hi)

    def _check_meander(self):
        tables = self.results['meander']
        tol = self.config.tolerance
        for sign, table in tables.items():
            self.add_check(f"meander {'+' if sign > 0 else '-'} mass", abs(table.mass() - 1), tol('mass', 0.02))
        if self.family.stable_target.alpha == 2:
            self.add_check("meander vs Rayleigh on [0.1, 3]", self._meander_window_distance(), tol('meander', 0.05))

    # --- bridge -----------------------------------------------------------------------------

    def _bridge(self):
        cfg = self.config
        a_values = cfg.params.get('a_values', [0.5, 1.0, 1.5])
        b_values = cfg.params.get('b_values', [0.5, 1.0, 1.5])
        table = estimate_bridge_positivity(self.family, a_values, b_values, n_steps=int(cfg.params.get('n_steps', 10_000)),
                                           budget=cfg.budget('bridge', 200_000), seed=cfg.seed + 2,
                                           bin_width=cfg.params.get('bin_width'))
        rows = []
        for i, a in enumerate(table.a_values):
            for j, b in enumerate(table.b_values):
                closed = -math.expm1(-2 * a * b) if self.family.stable_target.alpha == 2 else math.nan
                rows.append([a, b, table.values[i, j], table.stderr[i, j], table.binning_bias[i, j], closed,
                             abs(table.values[i, j] - closed) if closed == closed else 0.0])
        self.add_table("bridge", ["a", "b", "value", "stderr", "binning_bias", "closed_form", "abs_diff"], rows)
        if table.provenance['method'] == 'mc':
            self.report.replica_counts['bridge'] = int(table.a_values.size * cfg.budget('bridge', 200_000))
        return table

    def _simulate_bridge(self):
        self.results['bridge'] = self._bridge()

    def _check_bridge(self):
        table = self.results['bridge']
        self.add_check("bridge positivity within [0, 1]",
                       float(max(-table.values.min(), table.values.max() - 1, 0.0)), 1e-12, op="le")
        if self.family.stable_target.alpha == 2:
            self.add_check("bridge vs 1 - exp(-2ab)", max(r[-1] for r in self.report.tables['bridge'][1]),
                           self.config.tolerance('bridge', 0.05),
                           source=dict(table="bridge", column="abs_diff", reduce="max"))

    # --- constants --------------------------------------------------------------------------

    def _simulate_constants(self):
        cfg = self.config
        ns = cfg.params.get('ns', [1000, 10000])
        meanders = self._meanders(int(max(ns)) if self.family.lattice else min(int(max(ns)), 1000))
        constants = estimate_constants(
            self.family, ns, meander_plus=meanders[1], meander_minus=meanders[-1],
            tail_budget=cfg.budget('tails', 20_000), renewal_budget=cfg.budget('ladders', 400), seed=cfg.seed,
            rel_tol=cfg.tolerance('rel_tol', 0.1), strict=False
        )
        rel_tol = cfg.tolerance('rel_tol', 0.1)
        self.add_table("constants", ["name", "route1", "err1", "route2", "err2", "discrepancy", "allowed", "ratio"],
                       [[c.name, c.route1, c.err1, c.route2, c.err2, c.discrepancy(), c.allowed(rel_tol),
                         c.discrepancy() / c.allowed(rel_tol)] for c in constants.all()])
        moment, _ = meanders[-1].moment(self.family.stable_target.alpha_rho)
        self.add_table("identity", ["C_star_ladder", "meander_moment", "product", "abs_diff"],
                       [[constants.c_star.route1, moment, constants.c_star.route1 * moment,
                         abs(constants.c_star.route1 * moment - 1)]])
        self.report.provenance['constants'] = constants.provenance
        self.results['constants'] = constants

    def _check_constants(self):
        rows = self.report.tables['constants'][1]
        c_star = next(r for r in rows if r[0] == "C*")
        self.add_check("C* ladder route vs meander route", c_star[-1], 1.0)
        self.add_check("C* times meander moment = 1", self.report.tables['identity'][1][0][-1],
                       self.config.tolerance('identity', 0.1),
                       source=dict(table="identity", column="abs_diff", reduce="first"))

    # --- Brownian suite ---------------------------------------------------------------------

    def _simulate_brownian(self):
        n_steps = int(self.config.params.get('n_steps', 10_000))
        meanders = self._meanders(n_steps)
        self.results['bridge'] = self._bridge()
        moment, err = meanders[-1].moment(1.0)
        c_star = 1.0 / moment
        target = math.sqrt(2 / math.pi)
        self.add_table("c_star", ["estimate", "stderr", "closed_form", "rel_diff"],
                       [[c_star, err / moment ** 2, target, abs(c_star / target - 1)]])

    def _check_brownian(self):
        tol = self.config.tolerance
        self.add_check("meander vs Rayleigh on [0.1, 3]", self._meander_window_distance(), tol('meander', 0.05))
        self.add_check("bridge vs 1 - exp(-2ab)", max(r[-1] for r in self.report.tables['bridge'][1]),
                       tol('bridge', 0.05), source=dict(table="bridge", column="abs_diff", reduce="max"))
        self.add_check("C* vs sqrt(2/pi)", self.report.tables['c_star'][1][0][-1], tol('c_star', 0.1),
                       source=dict(table="c_star", column="rel_diff", reduce="first"))

    # --- regime laws on exact kernels -------------------------------------------------------

    def _laws_evaluator(self):
        if self.family.stable_target.alpha == 2:
            return LimitLawEval.brownian(quad_tol=1e-7)
        cfg = self.config
        n_steps = int(cfg.params.get('table_steps', 1000))
        grid = np.linspace(0.0, 8.0, 401)
        minus = estimate_meander_density(self.family, -1, grid, n_steps=n_steps, seed=cfg.seed + 10)
        plus = estimate_meander_density(self.family, 1, grid, n_steps=n_steps, seed=cfg.seed + 11)
        edges = np.linspace(0.05, 4.0, 16)
        bridge = estimate_bridge_positivity(self.family, edges, edges, n_steps=n_steps, seed=cfg.seed + 12)
        return LimitLawEval.from_tables(minus, plus, bridge)

    def _simulate_laws(self):
        cfg = self.config
        N, m = int(cfg.params.get('N', 2000)), int(cfg.params.get('m', 100))
        a_m, _ = scaling_constants(self.family, m)
        ev = self._laws_evaluator()
        # continuity-corrected: the exact CDFs jump at k / a_m
        ks_up = np.arange(int(math.ceil(5 * a_m)))
        z_pos = (ks_up + 0.5) / a_m
        z_all = (np.arange(-int(math.ceil(5 * a_m)), int(math.ceil(5 * a_m))) + 0.5) / a_m
        cases = [
            (1, float(cfg.params.get('y1', 3)), z_pos),
            (2, float(math.ceil(a_m)), z_pos),
            (3, float(math.ceil(4 * a_m)), z_all),
        ]
        for i, (regime, y, z) in enumerate(cases):
            exact = conditional_cdf_exact(self.family, N, m, 0, y, z, regime)
            if regime == 1:
                ref = eval_curve("A1", z, ev)
            elif regime == 2:
                ref = eval_curve("B", z, ev, param=y / a_m)
            else:
                ref = regime3_reference(self.family.stable_target, z)
            self.add_table(f"regime{regime}", ["z", "exact", "reference", "abs_diff"],
                           zip(z, exact.values, ref, np.abs(exact.values - ref)))
            self.log(f"regime {regime}: y={y:g}, event mass {exact.event_mass:.4g}")
            self.emit_progress(int((i + 1) / len(cases) * 100))
        self.report.provenance['laws'] = ev.provenance

    def _check_laws(self):
        tol = self.config.tolerance
        for regime, default in ((1, 0.05), (2, 0.07), (3, 0.05)):
            name = f"regime{regime}"
            self.add_check(f"regime {regime} exact CDF vs limit law", max(r[-1] for r in self.report.tables[name][1]),
                           tol(name, default), source=dict(table=name, column="abs_diff", reduce="max"))

    # --- absolutely continuous analogue -----------------------------------------------------

    def _simulate_continuous(self):
        cfg = self.config
        N, m, y = int(cfg.params.get('N', 1000)), int(cfg.params.get('m', 50)), float(cfg.params.get('y', 1.0))
        z = np.linspace(0.0, 4.0, 81)
        cdf = conditional_cdf_rejection(self.family, N, m, 0.0, y, z, 1, budget=cfg.budget('outer', 2_000),
                                        inner=cfg.budget('inner', 200), seed=cfg.seed, progress=self._progress)
        self.accepted = int(cdf.event_mass)
        if self.accepted < cfg.budget('min_accepted', 1_000):
            raise TooFewAccepted(f"Only {self.accepted} continuations reached S_N <= {y} "
                                 f"(floor {cfg.budget('min_accepted', 1_000)})")
        ref = eval_curve("A1", z, LimitLawEval.brownian())
        self.add_table("continuous", ["z", "empirical", "reference", "abs_diff"],
                       zip(z, cdf.values, ref, np.abs(cdf.values - ref)))
        self.report.replica_counts['outer'] = cfg.budget('outer', 2_000)
        self.report.replica_counts['accepted'] = self.accepted

    def _check_continuous(self):
        self.add_check("rejection CDF vs A1", max(r[-1] for r in self.report.tables['continuous'][1]),
                       self.config.tolerance('ks', 0.07),
                       source=dict(table="continuous", column="abs_diff", reduce="max"))
