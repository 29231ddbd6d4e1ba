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

import numpy as np

from walklab.base_experiment import BaseExperiment, ExperimentKind, InvalidConfig
from walklab.stable_core import (
    char_function, density_table, empirical_char_function, make_params, positivity_parameter, sample_stable,
    stable_cdf
)
from walklab.utils import split_budget, substreams


class StableCheckExperiment(BaseExperiment):
    """Sampler, density and positivity checks for one stable law"""

    def __init__(self, debug: bool = False, status_callback=None, progress_callback=None, log_callback=None):
        super().__init__(debug, status_callback, progress_callback, log_callback)
        self.params = None
        self.samples = None
        self.rho = None

    def load_config(self, config):
        if self.detect_experiment_kind(config) != ExperimentKind.STABLE_CHECK:
            raise InvalidConfig(f"{config.kind} is not a stable-check config")
        p = config.params
        self.params = make_params(float(p.get('alpha', 2.0)), float(p.get('beta', 0.0)), float(p.get('scale', 1.0)))
        self.config = config
        self.debug_log("stable law:", self.params.describe())

    def describe_target(self):
        return self.params.describe()

    @staticmethod
    def detect_experiment_kind(config) -> ExperimentKind:
        if config.kind == ExperimentKind.STABLE_CHECK.value:
            return ExperimentKind.STABLE_CHECK
        return ExperimentKind.UNKNOWN

    def simulate(self):
        cfg = self.config
        budget = cfg.budget('samples', 200_000)
        parts = []
        for i, (rng, part) in enumerate(zip(substreams(cfg.seed, cfg.partitions), split_budget(budget, cfg.partitions))):
            parts.append(sample_stable(self.params, rng, part))
            self.partition_progress(i + 1, cfg.partitions + 2)
        self.samples = np.concatenate(parts)
        self.report.replica_counts['samples'] = int(self.samples.size)

        w = np.asarray(cfg.params.get('cf_points', [0.25, 0.5, 1.0, 2.0]), dtype=float)
        emp = empirical_char_function(self.samples, w)
        ref = char_function(self.params, w)
        self.add_table("cf", ["w", "re_empirical", "im_empirical", "re_G", "im_G", "abs_diff"],
                       zip(w, emp.real, emp.imag, ref.real, ref.imag, np.abs(emp - ref)))

        sigma = self.params.sigma
        grid = np.linspace(-10 * sigma, 10 * sigma, int(cfg.params.get('grid_points', 81)))
        table = density_table(self.params, grid)
        cdf = np.array([stable_cdf(self.params, z) for z in grid])
        emp_cdf = np.searchsorted(np.sort(self.samples), grid, side='right') / self.samples.size
        self.add_table("density", ["x", "g", "F", "F_empirical", "abs_diff"],
                       zip(grid, table.values, cdf, emp_cdf, np.abs(cdf - emp_cdf)))
        self.emit_progress(int((cfg.partitions + 1) / (cfg.partitions + 2) * 100))

        rho = positivity_parameter(self.params, cfg.budget('positivity', budget), cfg.seed + 1, cfg.partitions)
        self.add_table("positivity", ["rho", "stderr", "closed_form", "abs_diff", "draws"],
                       [[rho.rho, rho.stderr, rho.closed_form, abs(rho.rho - rho.closed_form), rho.draws]])
        self.rho = rho

    def check(self):
        tol = self.config.tolerance
        self.add_check("empirical CF vs G", max(r[-1] for r in self.report.tables['cf'][1]), tol('cf', 0.01),
                       source=dict(table="cf", column="abs_diff", reduce="max"))
        self.add_check("empirical CDF vs Gil-Pelaez CDF", max(r[-1] for r in self.report.tables['density'][1]),
                       tol('cdf', 0.01), source=dict(table="density", column="abs_diff", reduce="max"))
        allowed = max(4 * self.rho.stderr, tol('rho', 1e-3))
        self.add_check("positivity parameter vs closed form", abs(self.rho.rho - self.rho.closed_form), allowed)
