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

import time
from abc import ABC, abstractmethod
from enum import Enum
from typing import Tuple


class ExperimentKind(Enum):
    """Enum to identify experiment kinds"""
    STABLE_CHECK = "stable-check"
    WALK_CHECK = "walk-check"
    LIMIT_LAW = "limit-law"
    BPRE_REGIME = "bpre-regime"
    SMALL_DEVIATION = "small-deviation"
    TCOND = "tcond"
    B2_CHECK = "b2-check"
    UNKNOWN = "unknown"


class ExperimentState(Enum):
    CONFIG = "CONFIG"
    SIMULATE = "SIMULATE"
    CHECK = "CHECK"
    WRITE = "WRITE"
    DONE = "DONE"


class WalkLabException(Exception):
    """Base exception for walklab operations"""
    pass


class InadmissiblePair(WalkLabException):
    pass


class NonpositiveScale(WalkLabException):
    pass


class QuadratureFailure(WalkLabException):
    pass


class BadFamilyParams(WalkLabException):
    pass


class BudgetTooSmall(WalkLabException):
    pass


class HorizonTooLarge(WalkLabException):
    pass


class ImpossibleEvent(WalkLabException):
    pass


class RejectionBudgetExceeded(WalkLabException):
    pass


class EmptyBin(WalkLabException):
    pass


class InconsistentEstimates(WalkLabException):
    pass


class RegimeMismatch(WalkLabException):
    pass


class PopulationOverflow(WalkLabException):
    pass


class TooFewAccepted(WalkLabException):
    pass


class EmptySample(WalkLabException):
    pass


class InvalidConfig(WalkLabException):
    pass


class DependencyMissing(WalkLabException):
    pass


class IoFailure(WalkLabException):
    pass


class BaseExperiment(ABC):
    """Abstract base class for verification experiments"""

    def __init__(
        self,
        debug: bool = False,
        status_callback=None,
        progress_callback=None,
        log_callback=None
    ):
        self.debug = debug
        self.status_callback = status_callback
        self.progress_callback = progress_callback
        self.log_callback = log_callback
        self.config = None
        self.report = None
        self.prev_state = None
        self.state = ExperimentState.CONFIG

    @abstractmethod
    def load_config(self, config):
        """Validate and store an ExperimentConfig"""
        pass

    @abstractmethod
    def simulate(self):
        """Build the result tables"""
        pass

    @abstractmethod
    def check(self):
        """Evaluate acceptance checks against the configured tolerances"""
        pass

    @staticmethod
    @abstractmethod
    def detect_experiment_kind(config) -> ExperimentKind:
        """Return the kind this class runs for the config, or UNKNOWN"""
        pass

    def check_dependencies(self):
        """Raise DependencyMissing when a referenced cache cannot be used"""
        pass

    def describe_target(self):
        """Family / law / model description recorded in the report provenance"""
        return None

    def log(self, *message):
        """Send one experiment log line (estimates, verdicts, file paths) to the log sink"""
        if self.log_callback:
            self.log_callback(' '.join(str(m) for m in message))

    def debug_log(self, *message):
        """Per-partition and per-cell detail, only with --debug"""
        if not self.debug:
            return
        self.log("(DEBUG)", ' '.join(str(m) for m in message))

    def emit_progress(self, percentage: int):
        """Share of replica partitions finished, clamped to 0..100"""
        if self.progress_callback:
            self.progress_callback(min(max(int(percentage), 0), 100))

    def emit_status(self, status_text: str):
        """Name of the phase the experiment has entered"""
        if self.status_callback:
            self.status_callback(status_text)

    def emit_state(self, state_text):
        if self.prev_state != self.state:
            self.emit_status(state_text)
        self.prev_state = self.state

    def partition_progress(self, done: int, total: int):
        self.emit_progress(int(done / max(total, 1) * 100))

    def add_table(self, name: str, header, rows):
        self.report.tables[name] = (list(header), [list(r) for r in rows])

    def add_check(self, name: str, statistic: float, threshold: float, op: str = "le", source=None):
        from walklab.harness import Check

        check = Check.evaluate(name, statistic, threshold, op, source)
        self.report.checks.append(check)
        self.log(f"> {name}: {statistic:.6g} {op} {threshold:.6g} -> {'PASS' if check.passed else 'FAIL'}")
        return check

    def run(self):
        from walklab.harness import ExperimentReport, write_report

        if self.config is None:
            raise InvalidConfig("No configuration loaded. Call load_config() first.")

        started = time.perf_counter()
        while self.state != ExperimentState.DONE:
            if self.state == ExperimentState.CONFIG:
                self.emit_state(f"{self.state.value} -> Checking dependencies")
                self.check_dependencies()
                self.report = ExperimentReport.for_config(self.config)
                target = self.describe_target()
                if target:
                    self.report.provenance['target'] = target
                self.state = ExperimentState.SIMULATE
            elif self.state == ExperimentState.SIMULATE:
                self.emit_state(f"{self.state.value} -> Simulating ({self.config.partitions} partitions)")
                self.simulate()
                self.state = ExperimentState.CHECK
            elif self.state == ExperimentState.CHECK:
                self.emit_state(f"{self.state.value} -> Evaluating checks")
                self.check()
                self.state = ExperimentState.WRITE
            elif self.state == ExperimentState.WRITE:
                self.report.wall_clock = time.perf_counter() - started
                if self.config.output_dir:
                    self.emit_state(f"{self.state.value} -> Writing report to {self.config.output_dir}")
                    manifest = write_report(self.report, self.config.output_dir)
                    self.debug_log("manifest:", manifest)
                self.state = ExperimentState.DONE
            else:
                raise WalkLabException(f"Unknown state: {self.state}")

        self.emit_progress(100)
        self.emit_state(f"{self.state.value} -> {'all checks passed' if self.report.passed else 'some checks FAILED'}")
        return self.report


def _get_experiment_classes():
    from walklab.stable_experiment import StableCheckExperiment
    from walklab.walk_experiment import WalkCheckExperiment
    from walklab.limits_experiment import LimitLawExperiment
    from walklab.bpre_experiment import BpreExperiment
    return [StableCheckExperiment, WalkCheckExperiment, LimitLawExperiment, BpreExperiment]


def detect_experiment_kind(config) -> ExperimentKind:
    for experiment_class in _get_experiment_classes():
        kind = experiment_class.detect_experiment_kind(config)
        if kind != ExperimentKind.UNKNOWN:
            return kind
    return ExperimentKind.UNKNOWN


def create_experiment_for_config(config, **kwargs):
    for experiment_class in _get_experiment_classes():
        if experiment_class.detect_experiment_kind(config) != ExperimentKind.UNKNOWN:
            experiment = experiment_class(**kwargs)
            experiment.load_config(config)
            return experiment
    raise InvalidConfig(f"Unknown experiment kind: {config.kind}")


def get_experiment_info(config) -> Tuple[ExperimentKind, dict]:
    kind = detect_experiment_kind(config)
    info = {
        'kind': kind,
        'task': config.params.get('task'),
        'seed': config.seed,
        'partitions': config.partitions,
    }
    if config.family:
        info['family'] = config.family.get('kind')
    if config.model:
        info['offspring'] = config.model.get('offspring')
    return kind, info
