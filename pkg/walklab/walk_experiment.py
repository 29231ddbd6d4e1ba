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
from walklab.harness import chi_square_homogeneity
from walklab.limit_laws import LimitLawEval, eval_B, eval_B_mixture, local_limit_prediction
from walklab.stable_core import char_function, empirical_char_function, sample_stable
from walklab.utils import file_sha256, split_budget, substreams
from walklab.walk_engine import (
    EndSpec, RenewalKind, cached_kernel, dual_positions, estimate_renewal, estimate_zeta, h_transform_horizons,
    h_transform_identity, ladder_counts, lattice_renewal_exact, make_family, prop4h_constant, prop4h_violations,
    renewal_scaling, sample_conditioned_batch, simulate_paths
)

TASKS = ("renewal", "kernel", "conditioned", "structural")


class WalkCheckExperiment(BaseExperiment):
    """Renewal functions, exact kernels and conditioned samplers of one increment family"""

    def __init__(self, debug: bool = False, status_callback=None, progress_callback=None, log_callback=None):
        super().__init__(debug, status_callback, progress_callback, log_callback)
        self.family = None
        self.task = None

    def load_config(self, config):
        if self.detect_experiment_kind(config) != ExperimentKind.WALK_CHECK:
            raise InvalidConfig(f"{config.kind} is not a walk-check config")
        self.task = config.params.get('task', 'renewal')
        if self.task not in TASKS:
            raise InvalidConfig(f"Unknown walk task '{self.task}' (expected one of {', '.join(TASKS)})")
        self.family = make_family(config.family.get('kind', 'lazy-lattice'), config.family)
        self.config = config
        self.debug_log("family:", self.family.describe())

    def describe_target(self):
        return self.family.describe() if self.family else None

    @staticmethod
    def detect_experiment_kind(config) -> ExperimentKind:
        if config.kind == ExperimentKind.WALK_CHECK.value:
            return ExperimentKind.WALK_CHECK
        return ExperimentKind.UNKNOWN

    def simulate(self):
        getattr(self, f"_simulate_{self.task}")()

    def check(self):
        getattr(self, f"_check_{self.task}")()

    def _kernel(self, N: int, x: int):
        kernel, path = cached_kernel(self.config.cache_dir, self.family, N, x)
        if path:
            self.report.provenance.setdefault('caches', {})[path] = file_sha256(path)
            self.debug_log("kernel cache:", path)
        return kernel

    # --- renewal ----------------------------------------------------------------------------

    def _simulate_renewal(self):
        cfg = self.config
        grid = np.asarray(cfg.params.get('grid', list(range(11))), dtype=float)
        rows = []
        self.zeta = estimate_zeta(self.family)
        kinds = [RenewalKind.V_PLUS, RenewalKind.V_MINUS, RenewalKind.VHAT_PLUS, RenewalKind.VHAT_MINUS]
        tables = {}
        for i, kind in enumerate(kinds):
            tables[kind] = estimate_renewal(self.family, kind, grid, budget=cfg.budget('ladders', 1_000),
                                            seed=cfg.seed + i, partitions=cfg.partitions,
                                            progress=lambda d, t: self.partition_progress(d, t))
            self.log(f"{kind.value}: method {tables[kind].method}, zeta {tables[kind].zeta:.6g}")
        for j, x in enumerate(grid):
            rows.append([x] + [tables[k].values[j] for k in kinds] + [tables[k].stderr[j] for k in kinds[:2]])
        self.add_table("renewal", ["x", "V+", "V-", "Vhat+", "Vhat-", "V+_stderr", "V-_stderr"], rows)
        self.renewal = tables
        if self.family.lattice:
            self.report.replica_counts['ladders'] = 0
        else:
            self.report.replica_counts['ladders'] = 4 * cfg.budget('ladders', 1_000)

    def _renewal_identities(self):
        """|V(0)(1 - zeta) - 1| and max |Vhat - (1 - zeta) V| over the grid, both signs."""
        zeta = self.zeta.value
        rows = self.report.tables['renewal'][1]
        at_zero = max(abs(rows[0][1] * (1 - zeta) - 1), abs(rows[0][2] * (1 - zeta) - 1))
        hat = max(max(abs(r[3] - (1 - zeta) * r[1]), abs(r[4] - (1 - zeta) * r[2])) for r in rows)
        return at_zero, hat

    def _check_renewal(self):
        at_zero, hat = self._renewal_identities()
        tol = self.config.tolerance('renewal', 1e-9 if self.family.lattice else 0.1)
        self.add_check("V(0) = 1 / (1 - zeta)", at_zero, tol)
        self.add_check("Vhat = (1 - zeta) V", hat, tol)

    # --- kernel -----------------------------------------------------------------------------

    def _simulate_kernel(self):
        p = self.config.params
        n, x, y = int(p.get('n', 2000)), int(p.get('x', 0)), int(p.get('y', 0))
        kernel = self._kernel(n, x)
        self.emit_progress(50)
        ev = LimitLawEval.brownian()
        q = kernel.q(n, y)
        prediction = local_limit_prediction("XYsmall", self.family, n, x, y, ev)
        self.add_table("local", ["n", "x", "y", "q", "prediction", "rel_diff"],
                       [[n, x, y, q, prediction, abs(q / prediction - 1)]])
        self.report.provenance['kernel_digest'] = kernel.digest()

        fit_n = int(p.get('bound_n', min(n, 400)))
        heights = list(range(int(p.get('bound_heights', 10)) + 1))
        fit = prop4h_constant(self.family, fit_n, heights, heights)
        self.violations = prop4h_violations(self.family, fit.constant, fit_n, heights, heights)
        self.add_table("kernel_bound", ["constant", "n", "x", "y", "violations"],
                       [[fit.constant, *fit.argmax, self.violations]])

    def _check_kernel(self):
        row = self.report.tables['local'][1][0]
        self.add_check("exact q_n(x,y) vs local-limit prediction", row[-1], self.config.tolerance('local_rel', 0.15),
                       source=dict(table="local", column="rel_diff", reduce="first"))
        self.add_check("kernel bound violations", self.violations, 0,
                       source=dict(table="kernel_bound", column="violations", reduce="first"))

    # --- conditioned samplers ---------------------------------------------------------------

    def _sampler_comparison(self, N: int, count: int):
        """Endpoint counts of the DP-backward and rejection samplers and the chi-square p-value."""
        cfg = self.config
        y = cfg.params.get('y')
        end = EndSpec.at_most(float(y)) if y is not None else EndSpec.free()
        streams = substreams(cfg.seed, 2 * cfg.partitions)
        kernel = self._kernel(N, 0)
        dp, rej = [], []
        for i, part in enumerate(split_budget(count, cfg.partitions)):
            dp.append(sample_conditioned_batch(self.family, N, 0, end, "dp_backward", streams[2 * i], part, kernel))
            rej.append(sample_conditioned_batch(self.family, N, 0, end, "rejection", streams[2 * i + 1], part))
            self.partition_progress(i + 1, cfg.partitions)
        dp, rej = np.concatenate(dp), np.concatenate(rej)
        top = int(max(dp[:, -1].max(), rej[:, -1].max())) + 1
        c_dp = np.bincount(dp[:, -1].astype(np.int64), minlength=top)
        c_rej = np.bincount(rej[:, -1].astype(np.int64), minlength=top)
        mid = N // 2
        top_mid = int(max(dp[:, mid].max(), rej[:, mid].max())) + 1
        p_end = chi_square_homogeneity(c_dp, c_rej)
        p_mid = chi_square_homogeneity(np.bincount(dp[:, mid].astype(np.int64), minlength=top_mid),
                                       np.bincount(rej[:, mid].astype(np.int64), minlength=top_mid))
        self.add_table("samplers", ["height", "dp_count", "rejection_count"], zip(range(top), c_dp, c_rej))
        self.report.replica_counts['paths'] = int(dp.shape[0] + rej.shape[0])
        return min(p_end, p_mid)

    def _simulate_conditioned(self):
        cfg = self.config
        self.p_value = self._sampler_comparison(int(cfg.params.get('N', 50)), cfg.budget('paths', 20_000))

    def _check_conditioned(self):
        self.add_check("DP-backward vs rejection chi-square p", self.p_value, self.config.tolerance('chi2_p', 0.01),
                       op="gt")

    # --- structural identities --------------------------------------------------------------

    def _simulate_scaling(self):
        cfg = self.config
        budget = cfg.budget('ladders', 1_000)
        for name, ns in (("regular_variation", cfg.params.get('rv_ns', [100, 1_000, 10_000, 100_000])),
                         ("products", cfg.params.get('product_ns', [1_000, 4_000, 16_000]))):
            scaling = renewal_scaling(self.family, ns, budget=budget, seed=cfg.seed + 20, partitions=cfg.partitions)
            self.add_table(name, ["n", "a_n", "V+", "V-", "product"],
                           zip(scaling.ns, scaling.a_n, scaling.v_plus, scaling.v_minus, scaling.products))
            self.scaling[name] = scaling
            self.log(f"{name}: slope {scaling.slope:.4g}, product spread {scaling.product_spread:.3g} ({scaling.method})")

    def _simulate_duality(self):
        cfg = self.config
        n = int(cfg.params.get('duality_n', 200))
        count = cfg.budget('duality_paths', 10_000)
        forward, backward = substreams(cfg.seed + 30, 2)
        direct = simulate_paths(self.family, n, count, forward)
        dual = dual_positions(simulate_paths(self.family, n, count, backward))
        rows = []
        for sign, strict in ((1, True), (-1, False)):
            a, b = ladder_counts(direct, sign, strict), ladder_counts(dual, sign, strict)
            top = int(max(a.max(), b.max())) + 1
            p = chi_square_homogeneity(np.bincount(a, minlength=top), np.bincount(b, minlength=top), pool_below=10)
            rows.append([f"{'strict' if strict else 'weak'} {'ascending' if sign > 0 else 'descending'}",
                         float(a.mean()), float(b.mean()), p])
        self.add_table("duality", ["ladder", "direct_mean", "dual_mean", "p_value"], rows)
        self.report.replica_counts['duality_paths'] = 2 * count

    def _simulate_h_transform(self):
        cfg = self.config
        x = int(cfg.params.get('h_x', 0))
        N, k = int(cfg.params.get('h_N', 40)), int(cfg.params.get('h_k', 20))
        count = cfg.budget('h_paths', 20_000)
        renewal = lattice_renewal_exact(self.family, RenewalKind.V_MINUS, max_height=x + max(N, 4 * k) + 1)
        identity_rng, horizon_rng = substreams(cfg.seed + 41, 2)
        identity = h_transform_identity(self.family, N, x, renewal, count, identity_rng)
        horizons = h_transform_horizons(self.family, k, x, renewal, count, horizon_rng)
        self.add_table("h_transform", ["check", "first", "first_stderr", "second", "second_stderr", "z"], [
            [f"P_up(S_{N} <= a_{N}) vs V- weighting", identity.first, identity.first_stderr,
             identity.second, identity.second_stderr, identity.z_score],
            [f"P_up(S_{k} <= a_{k}) at N={2 * k} vs N={4 * k}", horizons.first, horizons.first_stderr,
             horizons.second, horizons.second_stderr, horizons.z_score],
        ])
        self.report.replica_counts['h_paths'] = 4 * count

    def _simulate_structural(self):
        cfg = self.config
        self._simulate_renewal()
        self.p_value = self._sampler_comparison(int(cfg.params.get('N', 50)), cfg.budget('paths', 20_000))
        self.scaling = {}
        self._simulate_scaling()
        self._simulate_duality()
        self._simulate_h_transform()

        target = self.family.stable_target
        w = np.asarray(cfg.params.get('cf_points', [0.25, 0.5, 1.0]), dtype=float)
        draws = np.concatenate([
            sample_stable(target, rng, part) for rng, part in
            zip(substreams(cfg.seed + 1, cfg.partitions), split_budget(cfg.budget('cf_samples', 200_000), cfg.partitions))
        ])
        diff = np.abs(empirical_char_function(draws, w) - char_function(target, w))
        self.add_table("cf", ["w", "abs_diff"], zip(w, diff))
        self.report.replica_counts['cf_samples'] = int(draws.size)

        ev = LimitLawEval.brownian()
        rows = []
        for z, T in cfg.params.get('mixture_points', [[0.5, 1.0], [1.0, 1.0], [2.0, 0.5]]):
            direct = eval_B(z, T, ev, cross_check=False)
            mixture = eval_B_mixture(z, T, ev)
            rows.append([z, T, direct, mixture, abs(direct - mixture)])
        self.add_table("mixture", ["z", "T", "B", "A2_mixture", "abs_diff"], rows)

    def _check_structural(self):
        tol = self.config.tolerance
        self._check_renewal()
        self._check_conditioned()
        rv, products = self.scaling["regular_variation"], self.scaling["products"]
        rho = self.family.stable_target.rho
        self.add_check("|slope of log V+(a_n) - rho|", abs(rv.slope - rho), tol('slope', 0.05))
        self.add_check("V+(a_n) V-(a_n) / n spread", products.product_spread, tol('product_spread', 0.15))
        self.add_check("ladder counts, walk vs dual: chi-square p", min(r[-1] for r in self.report.tables['duality'][1]),
                       tol('duality_p', 1e-3), op="gt", source=dict(table="duality", column="p_value", reduce="min"))
        self.add_check("h-transform identities: z", max(r[-1] for r in self.report.tables['h_transform'][1]),
                       tol('h_z', 4.0), source=dict(table="h_transform", column="z", reduce="max"))
        self.add_check("sampler CF vs G", max(r[-1] for r in self.report.tables['cf'][1]), tol('cf', 0.01),
                       source=dict(table="cf", column="abs_diff", reduce="max"))
        self.add_check("B vs A2 mixture", max(r[-1] for r in self.report.tables['mixture'][1]), tol('mixture', 1e-6),
                       source=dict(table="mixture", column="abs_diff", reduce="max"))
