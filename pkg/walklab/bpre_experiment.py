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

from walklab.base_experiment import BaseExperiment, ExperimentKind, InvalidConfig
from walklab.bpre import (
    HYBRID_GAMMA2_BOUND, EnvironmentModel, OffspringKind, check_condition_B2, estimate_theta, run_regime_experiment,
    small_deviation_experiment, verify_Tcond
)
from walklab.walk_engine import make_family

KINDS = {
    ExperimentKind.BPRE_REGIME.value: ExperimentKind.BPRE_REGIME,
    ExperimentKind.SMALL_DEVIATION.value: ExperimentKind.SMALL_DEVIATION,
    ExperimentKind.TCOND.value: ExperimentKind.TCOND,
    ExperimentKind.B2_CHECK.value: ExperimentKind.B2_CHECK,
}


def make_model(family: dict, offspring: str = "hybrid") -> EnvironmentModel:
    try:
        kind = OffspringKind(offspring)
    except ValueError:
        raise InvalidConfig(f"Unknown offspring law '{offspring}'")
    return EnvironmentModel(make_family(family.get('kind', 'lazy-lattice'), family), kind)


class BpreExperiment(BaseExperiment):
    """Branching processes in random environment: regime laws, small deviations, T_cond and condition B2"""

    def __init__(self, debug: bool = False, status_callback=None, progress_callback=None, log_callback=None):
        super().__init__(debug, status_callback, progress_callback, log_callback)
        self.kind = None
        self.model = None
        self.result = None
        self.theta = None

    def load_config(self, config):
        self.kind = self.detect_experiment_kind(config)
        if self.kind == ExperimentKind.UNKNOWN:
            raise InvalidConfig(f"{config.kind} is not a BPRE config")
        if self.kind != ExperimentKind.B2_CHECK:
            self.model = make_model(config.family, config.model.get('offspring', 'hybrid'))
            self.debug_log("model:", self.model.describe())
        elif not config.params.get('cases'):
            raise InvalidConfig("b2-check needs a non-empty params.cases list")
        self.config = config

    def describe_target(self):
        return self.model.describe() if self.model else None

    @staticmethod
    def detect_experiment_kind(config) -> ExperimentKind:
        return KINDS.get(config.kind, ExperimentKind.UNKNOWN)

    def simulate(self):
        {
            ExperimentKind.BPRE_REGIME: self._simulate_regime,
            ExperimentKind.SMALL_DEVIATION: self._simulate_small_deviation,
            ExperimentKind.TCOND: self._simulate_tcond,
            ExperimentKind.B2_CHECK: self._simulate_b2,
        }[self.kind]()

    def check(self):
        {
            ExperimentKind.BPRE_REGIME: self._check_regime,
            ExperimentKind.SMALL_DEVIATION: self._check_small_deviation,
            ExperimentKind.TCOND: self._check_tcond,
            ExperimentKind.B2_CHECK: self._check_b2,
        }[self.kind]()

    def _progress(self, done, total):
        self.partition_progress(done, total)

    def _store_regime(self, report):
        self.add_table("cdf", ["z", "empirical", "reference", "abs_diff"],
                       zip(report.z_grid, report.empirical, report.reference,
                           abs(report.empirical - report.reference)))
        self.add_table("ks", ["ks", "accepted", "saturated"], [[report.ks, report.accepted, report.saturated]])
        self.report.replica_counts['replicas'] = report.budget
        self.report.replica_counts['accepted'] = report.accepted
        self.report.replica_counts['saturated'] = report.saturated
        self.log(f"accepted {report.accepted} of {report.budget}, KS {report.ks:.4f}")

    # --- regime -----------------------------------------------------------------------------

    def _simulate_regime(self):
        cfg = self.config
        p = cfg.params
        n, m = int(p['n']), int(p['m'])
        self.emit_status(f"{self.state.value} -> Estimating Theta")
        self.theta = estimate_theta(
            self.model, J=int(p.get('J', 20)), K=int(p.get('K', 50)), horizon=int(p.get('horizon', 10 * n)),
            budget=cfg.budget('theta', 20_000), up_budget=cfg.budget('up_environments', 2_000), seed=cfg.seed + 1
        )
        self.log(f"Theta = {self.theta.value:.5g} +- {self.theta.stderr:.2g} "
                 f"(horizon delta {self.theta.horizon_delta:.2g})")
        self.emit_status(f"{self.state.value} -> Sampling conditioned replicas")
        self.result = run_regime_experiment(
            self.model, n, m, float(p['phi']), int(p['regime']), cfg.budget('replicas', 4_000),
            sampler=p.get('sampler', 'env_importance'), seed=cfg.seed, theta=self.theta,
            min_accepted=cfg.budget('min_accepted', 100), progress=self._progress
        )
        r = self.result
        self._store_regime(r)
        self.add_table("frequency",
                       ["frequency", "stderr", "predicted", "log_ratio", "residual_share", "theta", "theta_stderr"],
                       [[r.frequency, r.frequency_stderr, r.predicted_frequency,
                         abs(math.log(r.frequency_ratio)) if 0 < r.frequency_ratio < math.inf else math.inf,
                         r.residual_share, self.theta.value, self.theta.stderr]])
        self.report.replica_counts['theta'] = self.theta.replicas
        self.report.provenance.update(r.provenance)

    def _check_regime(self):
        tol = self.config.tolerance
        self.add_check("regime KS", self.result.ks, tol('ks', 0.15), source=dict(table="ks", column="ks", reduce="first"))
        self.add_check("accepted replicas", self.result.accepted, self.config.budget('min_accepted', 100), op="ge",
                       source=dict(table="ks", column="accepted", reduce="first"))
        self.add_check("frequency within factor of prediction", self.report.tables['frequency'][1][0][3],
                       math.log(tol('frequency_factor', 2.0)),
                       source=dict(table="frequency", column="log_ratio", reduce="first"))

    # --- small deviations -------------------------------------------------------------------

    def _simulate_small_deviation(self):
        cfg = self.config
        p = cfg.params
        self.result = small_deviation_experiment(
            self.model, int(p['n']), float(p['phi']), cfg.budget('replicas', 4_000),
            sampler=p.get('sampler', 'env_importance'), seed=cfg.seed, min_accepted=cfg.budget('min_accepted', 100)
        )
        self._store_regime(self.result)

    def _check_small_deviation(self):
        self.add_check("small-deviation KS", self.result.ks, self.config.tolerance('ks', 0.15),
                       source=dict(table="ks", column="ks", reduce="first"))
        self.add_check("accepted replicas", self.result.accepted, self.config.budget('min_accepted', 100), op="ge",
                       source=dict(table="ks", column="accepted", reduce="first"))

    # --- T_cond -----------------------------------------------------------------------------

    def _simulate_tcond(self):
        cfg = self.config
        p = cfg.params
        n = int(p['n'])
        self.result = verify_Tcond(
            self.model, n, int(p['m']), float(p['phi']), float(p.get('z', 1.0)), k=int(p.get('k', 1)),
            budget=cfg.budget('environments', 5_000), seed=cfg.seed, regime=int(p.get('regime', 1)),
            horizon=int(p.get('horizon', 10 * n)), up_budget=cfg.budget('up_environments', 2_000)
        )
        r = self.result
        self.add_table("tcond", ["lhs", "lhs_stderr", "rhs", "rhs_stderr", "abs_diff", "conditional_probability",
                                 "dominance_gap", "limit_value", "up_survival"],
                       [[r.lhs, r.lhs_stderr, r.rhs, r.rhs_stderr, abs(r.lhs - r.rhs), r.conditional_probability,
                         r.lhs - r.conditional_probability, r.limit_value, r.up_survival]])
        self.report.replica_counts['environments'] = r.samples
        self.log(f"lhs {r.lhs:.4f} +- {r.lhs_stderr:.4f}, rhs {r.rhs:.4f} +- {r.rhs_stderr:.4f}")

    def _check_tcond(self):
        row = self.report.tables['tcond'][1][0]
        self.add_check("|lhs - rhs|", row[4], self.config.tolerance('abs', 0.1),
                       source=dict(table="tcond", column="abs_diff", reduce="first"))
        self.add_check("lhs - conditional probability", row[6], 1e-12,
                       source=dict(table="tcond", column="dominance_gap", reduce="first"))

    # --- condition B2 -----------------------------------------------------------------------

    def _simulate_b2(self):
        cfg = self.config
        cases = cfg.params['cases']
        rows = []
        self.hybrid_sup = 0.0
        for i, case in enumerate(cases):
            model = make_model(case['family'], case.get('offspring', 'hybrid'))
            b = int(case.get('b', 2))
            result = check_condition_B2(model, b=b, eps=cfg.tolerance('eps', 0.1),
                                        budget=cfg.budget('environments', 1_000_000), seed=cfg.seed + i)
            expected = case.get('expect', result.verdict)
            mismatch = result.verdict != expected or result.mismatch
            rows.append([model.family.key(), model.offspring.value, b, result.verdict, expected,
                         result.empirical_verdict, result.tail_index, result.tail_index_se, result.order,
                         result.log_sup_gamma, *result.moments, int(mismatch)])
            if model.offspring == OffspringKind.HYBRID and b == 2:
                self.hybrid_sup = max(self.hybrid_sup, result.sup_gamma)
            self.log(f"{model.describe()}, b={b}: {result.verdict} ({result.reason}); "
                     f"tail index {result.tail_index:.4g} +- {result.tail_index_se:.2g} vs order {result.order:g}")
            self.partition_progress(i + 1, len(cases))
        self.add_table("b2", ["family", "offspring", "b", "verdict", "expected", "empirical", "tail_index",
                              "tail_index_se", "order", "log_sup_gamma", "moment_quarter", "moment_half",
                              "moment_full", "mismatch"], rows)
        self.add_table("hybrid_gamma2", ["sup_gamma", "bound"], [[self.hybrid_sup, HYBRID_GAMMA2_BOUND]])
        self.report.replica_counts['environments'] = len(cases) * cfg.budget('environments', 1_000_000)

    def _check_b2(self):
        self.add_check("B2 verdict mismatches", max(r[-1] for r in self.report.tables["b2"][1]), 0,
                       source=dict(table="b2", column="mismatch", reduce="max"))
        self.add_check("Hybrid sup gamma(2)", self.hybrid_sup, HYBRID_GAMMA2_BOUND * (1 + 1e-9),
                       source=dict(table="hybrid_gamma2", column="sup_gamma", reduce="first"))
