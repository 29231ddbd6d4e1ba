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

import json
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy.stats import chi2_contingency

from walklab.base_experiment import EmptySample, InvalidConfig, IoFailure
from walklab.utils import ensure_dir, file_sha256, format_value, read_csv, write_csv
from walklab.version import __version__

KINDS = ("stable-check", "walk-check", "limit-law", "bpre-regime", "small-deviation", "tcond", "b2-check")
MANIFEST = "manifest.json"


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    partitions: int = 1
    name: str = ""
    family: Dict = field(default_factory=dict)
    model: Dict = field(default_factory=dict)
    budgets: Dict = field(default_factory=dict)
    tolerances: Dict = field(default_factory=dict)
    params: Dict = field(default_factory=dict)
    output_dir: Optional[str] = None
    cache_dir: Optional[str] = None

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        if 'kind' not in data:
            raise InvalidConfig("Config needs a 'kind' field")
        if 'seed' not in data:
            raise InvalidConfig("Config needs a 'seed' field")
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidConfig(f"Unknown config fields: {', '.join(unknown)}")
        config = cls(**data)
        config.validate()
        return config

    @classmethod
    def from_json(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise InvalidConfig(f"Cannot read config {path}: {e}")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        data = self.to_dict()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return ExperimentConfig.from_dict(data)

    def budget(self, key: str, default: int) -> int:
        return int(self.budgets.get(key, default))

    def tolerance(self, key: str, default: float) -> float:
        return float(self.tolerances.get(key, default))

    def validate(self):
        if self.kind not in KINDS:
            raise InvalidConfig(f"Unknown experiment kind '{self.kind}' (expected one of {', '.join(KINDS)})")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise InvalidConfig(f"seed must be a nonnegative integer, got {self.seed!r}")
        if isinstance(self.partitions, bool) or not isinstance(self.partitions, int) or self.partitions < 1:
            raise InvalidConfig(f"partitions must be a positive integer, got {self.partitions!r}")
        for key, value in self.tolerances.items():
            if not isinstance(value, (int, float)) or not value > 0:
                raise InvalidConfig(f"tolerance '{key}' must be positive, got {value!r}")
        for key, value in self.budgets.items():
            if not isinstance(value, int) or value < 1:
                raise InvalidConfig(f"budget '{key}' must be a positive integer, got {value!r}")
        if self.kind == "bpre-regime":
            self._validate_regime()

    def _validate_regime(self):
        from walklab.walk_engine import make_family, scaling_constants

        regime = self.params.get('regime')
        if regime not in (1, 2, 3):
            raise InvalidConfig(f"bpre-regime needs params.regime in 1, 2, 3, got {regime!r}")
        try:
            n, m, phi = int(self.params['n']), int(self.params['m']), float(self.params['phi'])
        except (KeyError, TypeError, ValueError):
            raise InvalidConfig("bpre-regime needs numeric params n, m and phi")
        if not 0 < m < n:
            raise InvalidConfig(f"need 0 < m < n, got m={m}, n={n}")
        family = make_family(self.family.get('kind', 'lazy-lattice'), self.family)
        a_m, _ = scaling_constants(family, m)
        consistent = {1: phi <= a_m, 2: a_m / 4 <= phi <= 4 * a_m, 3: phi >= a_m}[regime]
        if not consistent:
            raise InvalidConfig(f"phi={phi} does not fit regime {regime} with a_m={a_m:.4g}")


@dataclass
class Check:
    name: str
    statistic: float
    threshold: float
    op: str
    passed: bool
    source: Optional[Dict] = None

    @classmethod
    def evaluate(cls, name: str, statistic: float, threshold: float, op: str = "le",
                 source: Optional[Dict] = None) -> "Check":
        return cls(name, float(statistic), float(threshold), op, bool(_compare(statistic, threshold, op)), source)


def _compare(statistic, threshold, op) -> bool:
    if not np.isfinite(statistic):
        return False
    if op == "le":
        return statistic <= threshold
    if op == "ge":
        return statistic >= threshold
    if op == "lt":
        return statistic < threshold
    if op == "gt":
        return statistic > threshold
    raise ValueError(f"Unknown comparison: {op}")


@dataclass
class ExperimentReport:
    name: str
    kind: str
    config: Dict
    tables: Dict = field(default_factory=dict)
    checks: List[Check] = field(default_factory=list)
    replica_counts: Dict = field(default_factory=dict)
    wall_clock: float = 0.0
    provenance: Dict = field(default_factory=dict)

    @classmethod
    def for_config(cls, config: ExperimentConfig) -> "ExperimentReport":
        return cls(config.name or config.kind, config.kind, config.to_dict(),
                   provenance=dict(version=__version__, seed=config.seed, partitions=config.partitions))

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def summary(self) -> dict:
        return dict(
            name=self.name, kind=self.kind, passed=self.passed, wall_clock=self.wall_clock,
            replica_counts=self.replica_counts, provenance=self.provenance,
            tables=sorted(self.tables), checks=[asdict(c) for c in self.checks]
        )


# --- statistics -----------------------------------------------------------------------------


@dataclass
class EmpiricalCdf:
    """Right-continuous step function: values[i] = F(grid[i]), F = 0 left of grid[0]."""
    grid: np.ndarray
    values: np.ndarray

    def __call__(self, x):
        idx = np.searchsorted(self.grid, np.asarray(x, dtype=float), side='right')
        return np.where(idx > 0, self.values[np.maximum(idx - 1, 0)], 0.0)

    @property
    def left_values(self) -> np.ndarray:
        return np.concatenate([[0.0], self.values[:-1]])


def empirical_cdf(samples, weights=None) -> EmpiricalCdf:
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size == 0:
        raise EmptySample("Cannot build an empirical CDF from an empty sample")
    if weights is None:
        weights = np.ones(samples.size)
    weights = np.asarray(weights, dtype=float).ravel()
    if weights.shape != samples.shape or np.any(weights < 0) or not weights.sum() > 0:
        raise EmptySample("Weights must match the samples, be nonnegative and have a positive sum")
    grid, inverse = np.unique(samples, return_inverse=True)
    mass = np.bincount(inverse, weights=weights, minlength=grid.size)
    values = np.cumsum(mass) / mass.sum()
    values[-1] = 1.0
    return EmpiricalCdf(grid, values)


def ks_statistic(empirical, reference: Callable) -> float:
    """
    sup |F_emp - F_ref| over the jump points of F_emp, on both sides of each jump.
    `empirical` is an EmpiricalCdf or a raw sample.
    """
    if not isinstance(empirical, EmpiricalCdf):
        empirical = empirical_cdf(empirical)
    grid = empirical.grid
    right = np.asarray(reference(grid), dtype=float)
    left = np.asarray(reference(np.nextafter(grid, -np.inf)), dtype=float)
    return float(max(np.max(np.abs(empirical.values - right)), np.max(np.abs(empirical.left_values - left))))


def chi_square_homogeneity(counts_a, counts_b, pool_below: int = 0) -> float:
    """
    p-value that two count vectors over the same cells come from one law. Cells
    whose joint count is below `pool_below` are merged into one cell.
    """
    table = np.vstack([np.asarray(counts_a, dtype=float), np.asarray(counts_b, dtype=float)])
    if pool_below > 0:
        sparse = table.sum(axis=0) < pool_below
        table = np.hstack([table[:, ~sparse], table[:, sparse].sum(axis=1, keepdims=True)])
    table = table[:, table.sum(axis=0) > 0]
    if table.shape[1] < 2:
        return 1.0
    _, p_value, _, _ = chi2_contingency(table)
    return float(p_value)


# --- running --------------------------------------------------------------------------------


def run_experiment(config: ExperimentConfig, **callbacks) -> ExperimentReport:
    from walklab.base_experiment import create_experiment_for_config

    config.validate()
    return create_experiment_for_config(config, **callbacks).run()


def run_suite(configs, max_workers: int = 1, **callbacks) -> List[ExperimentReport]:
    """Runs configs in order, or on a thread pool; report order matches config order."""
    if max_workers <= 1:
        return [run_experiment(c, **callbacks) for c in configs]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda c: run_experiment(c, **callbacks), configs))


# --- persistence ----------------------------------------------------------------------------


def _dump_json(path: str, data):
    with open(path, 'w') as f:
        json.dump(data, f, indent=2, sort_keys=True, default=format_value)


def write_report(report: ExperimentReport, directory: str) -> str:
    """
    Writes config.json, one CSV per table and report.json, then the manifest.
    The manifest is removed first and only reappears once every file is complete.
    """
    manifest_path = os.path.join(directory, MANIFEST)
    try:
        ensure_dir(directory)
        if os.path.exists(manifest_path):
            os.remove(manifest_path)
        files = []
        path = os.path.join(directory, "config.json")
        _dump_json(path, report.config)
        files.append(path)
        for name, (header, rows) in sorted(report.tables.items()):
            files.append(write_csv(os.path.join(directory, f"{name}.csv"), header, rows))
        path = os.path.join(directory, "report.json")
        _dump_json(path, report.summary())
        files.append(path)

        manifest = dict(
            version=__version__,
            files={os.path.basename(p): file_sha256(p) for p in files},
            passed=report.passed,
        )
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".manifest-", suffix=".json")
        with os.fdopen(fd, 'w') as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        os.replace(tmp, manifest_path)
    except OSError as e:
        raise IoFailure(f"Failed to write report to {directory}: {e}")
    return manifest_path


def verify_manifest(path: str) -> bool:
    """True iff every file listed in the manifest exists and still has its recorded hash."""
    directory = os.path.dirname(path)
    try:
        with open(path) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError):
        return False
    for name, digest in manifest.get('files', {}).items():
        target = os.path.join(directory, name)
        if not os.path.isfile(target) or file_sha256(target) != digest:
            return False
    return True


_REDUCERS = {
    "max": np.max,
    "min": np.min,
    "maxabs": lambda v: np.max(np.abs(v)),
    "first": lambda v: v[0],
    "last": lambda v: v[-1],
}


def replay_checks(directory: str) -> List[dict]:
    """
    Recomputes each check whose statistic is a reduction of a stored CSV column and
    compares the verdict with the stored one; other checks replay their stored statistic.
    """
    try:
        with open(os.path.join(directory, "report.json")) as f:
            summary = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise IoFailure(f"Cannot read report in {directory}: {e}")
    out = []
    for stored in summary['checks']:
        source = stored.get('source')
        statistic = stored['statistic']
        if source:
            header, rows = read_csv(os.path.join(directory, f"{source['table']}.csv"))
            column = np.array([row[header.index(source['column'])] for row in rows], dtype=float)
            statistic = float(_REDUCERS[source.get('reduce', 'max')](column))
        replayed = _compare(statistic, stored['threshold'], stored['op'])
        out.append(dict(
            name=stored['name'], statistic=statistic, stored_statistic=stored['statistic'],
            stored_passed=stored["passed"], replayed_passed=bool(replayed),
            matches=bool(replayed) == stored["passed"] and math.isclose(statistic, stored['statistic'], rel_tol=1e-9, abs_tol=1e-12),
            from_table=bool(source),
        ))
    return out


# --- acceptance suite -----------------------------------------------------------------------

LATTICE = {"kind": "lazy-lattice", "p": 0.25}

ACCEPTANCE_SUITE = [
    {
        "name": "constants-lattice", "kind": "limit-law", "seed": 1,
        "family": LATTICE,
        "params": {"task": "constants", "ns": [1000, 10000]},
        "tolerances": {"rel_tol": 0.1, "identity": 0.1},
    },
    {
        "name": "brownian-suite", "kind": "limit-law", "seed": 2,
        "family": LATTICE,
        "params": {"task": "brownian", "n_steps": 10000, "a_values": [0.5, 1.0, 1.5], "b_values": [0.5, 1.0, 1.5]},
        "tolerances": {"meander": 0.05, "bridge": 0.05, "c_star": 0.1},
    },
    {
        "name": "local-xysmall", "kind": "walk-check", "seed": 3,
        "family": {"kind": "lazy-lattice", "p": 0.3},
        "params": {"task": "kernel", "n": 2000, "x": 0, "y": 0},
        "tolerances": {"local_rel": 0.15},
    },
    {
        "name": "regime-kernels", "kind": "limit-law", "seed": 4,
        "family": LATTICE,
        "params": {"task": "laws", "N": 2000, "m": 100},
        "tolerances": {"regime1": 0.05, "regime2": 0.07, "regime3": 0.05},
    },
    {
        "name": "continuous-a1", "kind": "limit-law", "seed": 5,
        "family": {"kind": "gaussian", "sigma": 1.0},
        "params": {"task": "continuous", "N": 1000, "m": 50, "y": 1.0},
        "budgets": {"outer": 10000, "inner": 500, "min_accepted": 5000},
        "tolerances": {"ks": 0.07},
    },
    {
        "name": "bpre-regime1", "kind": "bpre-regime", "seed": 6,
        "family": LATTICE, "model": {"offspring": "hybrid"},
        "params": {"n": 300, "m": 30, "phi": 2, "regime": 1, "sampler": "env_importance"},
        "budgets": {"replicas": 4000, "min_accepted": 1000, "theta": 20000},
        "tolerances": {"ks": 0.15, "frequency_factor": 2.0},
    },
    {
        "name": "small-deviation", "kind": "small-deviation", "seed": 7,
        "family": LATTICE, "model": {"offspring": "hybrid"},
        "params": {"n": 300, "phi": 3, "sampler": "env_importance"},
        "budgets": {"replicas": 4000, "min_accepted": 1000},
        "tolerances": {"ks": 0.15},
    },
    {
        "name": "tcond", "kind": "tcond", "seed": 8,
        "family": LATTICE, "model": {"offspring": "hybrid"},
        "params": {"n": 400, "m": 40, "phi": 2, "z": 1.0, "k": 1, "regime": 1},
        "budgets": {"environments": 5000, "up_environments": 2000},
        "tolerances": {"abs": 0.1},
    },
    {
        "name": "structural", "kind": "walk-check", "seed": 9,
        "family": LATTICE,
        "params": {"task": "structural", "N": 50, "cf_points": [0.25, 0.5, 1.0]},
        "budgets": {"paths": 20000, "cf_samples": 200000, "duality_paths": 10000, "h_paths": 20000},
        "tolerances": {"renewal": 1e-9, "chi2_p": 0.01, "cf": 0.01, "mixture": 1e-6,
                       "slope": 0.05, "product_spread": 0.15, "duality_p": 1e-3, "h_z": 4.0},
    },
    {
        "name": "b2-verdicts", "kind": "b2-check", "seed": 10,
        "params": {"cases": [
            {"family": {"kind": "lazy-lattice", "p": 0.25}, "offspring": "hybrid", "b": 2, "expect": "PASS"},
            {"family": {"kind": "two-sided-pareto", "alpha": 1.5}, "offspring": "hybrid", "b": 2, "expect": "PASS"},
            {"family": {"kind": "gaussian", "sigma": 1.0}, "offspring": "geometric", "b": 1, "expect": "PASS"},
            {"family": {"kind": "two-sided-pareto", "alpha": 1.5}, "offspring": "geometric", "b": 1, "expect": "FAIL"},
        ]},
        "budgets": {"environments": 1000000},
        "tolerances": {"eps": 0.1},
    },
]


def acceptance_configs(seed: Optional[int] = None, partitions: Optional[int] = None,
                       output_dir: Optional[str] = None) -> List[ExperimentConfig]:
    configs = []
    for entry in ACCEPTANCE_SUITE:
        data = json.loads(json.dumps(entry))
        if seed is not None:
            data['seed'] = seed
        if partitions is not None:
            data['partitions'] = partitions
        if output_dir is not None:
            data['output_dir'] = os.path.join(output_dir, data['name'])
        configs.append(ExperimentConfig.from_dict(data))
    return configs
