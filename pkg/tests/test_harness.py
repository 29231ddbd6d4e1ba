import json
import os

import numpy as np
import pytest
from scipy.stats import norm

from walklab.base_experiment import EmptySample, InvalidConfig, IoFailure
from walklab.harness import (
    ACCEPTANCE_SUITE, MANIFEST, Check, ExperimentConfig, ExperimentReport, acceptance_configs,
    chi_square_homogeneity, empirical_cdf, ks_statistic, replay_checks, verify_manifest, write_report
)
from walklab.utils import read_csv, split_budget, substreams, write_csv


def test_empirical_cdf_steps():
    cdf = empirical_cdf([3.0, 1.0, 2.0])
    assert list(cdf.grid) == [1.0, 2.0, 3.0]
    assert np.allclose(cdf.values, [1 / 3, 2 / 3, 1.0])
    assert cdf(0.5) == 0.0
    assert cdf(2.0) == pytest.approx(2 / 3)
    assert cdf(10.0) == 1.0


def test_empirical_cdf_point_mass_and_ties():
    cdf = empirical_cdf([4.0], weights=[2.5])
    assert list(cdf.values) == [1.0]
    tied = empirical_cdf([1.0, 1.0, 2.0])
    assert list(tied.grid) == [1.0, 2.0]
    assert np.allclose(tied.values, [2 / 3, 1.0])


def test_integer_weights_match_repeated_samples():
    weighted = empirical_cdf([0.1, 0.7, 0.4], weights=[2, 1, 3])
    repeated = empirical_cdf([0.1, 0.1, 0.7, 0.4, 0.4, 0.4])
    assert np.array_equal(weighted.grid, repeated.grid)
    assert np.allclose(weighted.values, repeated.values)


def test_empirical_cdf_rejects_empty_input():
    with pytest.raises(EmptySample):
        empirical_cdf([])
    with pytest.raises(EmptySample):
        empirical_cdf([1.0, 2.0], weights=[0.0, 0.0])
    with pytest.raises(EmptySample):
        empirical_cdf([1.0, 2.0], weights=[1.0])


def test_ks_of_identical_step_functions_is_zero():
    cdf = empirical_cdf([0.2, 0.5, 0.5, 0.9])
    assert ks_statistic(cdf, cdf) == 0.0


def test_ks_point_mass_against_uniform():
    assert ks_statistic([0.5], lambda x: np.clip(x, 0, 1)) == pytest.approx(0.5)


def test_ks_matches_brute_force():
    samples = substreams(12, 1)[0].normal(size=50)
    brute = 0.0
    for x in samples:
        brute = max(brute, abs(np.mean(samples <= x) - norm.cdf(x)), abs(np.mean(samples < x) - norm.cdf(x)))
    assert ks_statistic(samples, norm.cdf) == pytest.approx(brute, abs=1e-12)


def test_chi_square_homogeneity():
    assert chi_square_homogeneity([10, 20, 30], [10, 20, 30]) == pytest.approx(1.0)
    assert chi_square_homogeneity([500, 10, 0], [10, 500, 0]) < 1e-6
    assert chi_square_homogeneity([5, 0], [7, 0]) == 1.0
    assert chi_square_homogeneity([100, 100, 1, 0], [100, 100, 0, 1], pool_below=10) == pytest.approx(1.0)
    assert chi_square_homogeneity([100, 100, 1, 0], [100, 100, 0, 1]) < 1.0


def test_split_budget_and_streams():
    assert split_budget(10, 3) == [4, 3, 3]
    assert sum(split_budget(1_000_003, 7)) == 1_000_003
    a = [g.random(3) for g in substreams(42, 3)]
    b = [g.random(3) for g in substreams(42, 3)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], a[1])
    with pytest.raises(ValueError):
        substreams(1, 0)


def test_csv_tables_keep_strings_and_exact_floats(tmp_path):
    path = str(tmp_path / "table.csv")
    rows = [["gaussian", 0.1 + 0.2, float("inf")], ["lazy-lattice", 1 / 3, -2.0]]
    write_csv(path, ["family", "value", "tail"], rows)
    header, back = read_csv(path)
    assert header == ["family", "value", "tail"]
    assert [r[0] for r in back] == ["gaussian", "lazy-lattice"]
    assert back[0][1] == 0.1 + 0.2
    assert back[1][1] == 1 / 3
    assert back[0][2] == float("inf")
    assert isinstance(back[1][2], float)
    with pytest.raises(ValueError):
        write_csv(path, [], rows)


def test_check_comparisons():
    assert Check.evaluate("a", 0.1, 0.2).passed
    assert not Check.evaluate("b", 0.3, 0.2).passed
    assert Check.evaluate("c", 0.3, 0.2, op="ge").passed
    assert not Check.evaluate("d", 0.2, 0.2, op="gt").passed
    assert not Check.evaluate("e", float("nan"), 1.0).passed
    assert isinstance(Check.evaluate("f", np.float64(0.1), 1.0).passed, bool)
    with pytest.raises(ValueError):
        Check.evaluate("g", 0.1, 0.2, op="eq")


def test_config_requires_kind_and_seed():
    with pytest.raises(InvalidConfig):
        ExperimentConfig.from_dict({"kind": "stable-check"})
    with pytest.raises(InvalidConfig):
        ExperimentConfig.from_dict({"seed": 1})
    with pytest.raises(InvalidConfig):
        ExperimentConfig.from_dict({"kind": "stable-check", "seed": 1, "colour": "red"})
    with pytest.raises(InvalidConfig):
        ExperimentConfig.from_dict({"kind": "walkabout", "seed": 1})


def test_config_value_checks():
    with pytest.raises(InvalidConfig):
        ExperimentConfig.from_dict({"kind": "stable-check", "seed": -1})
    with pytest.raises(InvalidConfig):
        ExperimentConfig.from_dict({"kind": "stable-check", "seed": 1, "tolerances": {"cf": -0.1}})
    with pytest.raises(InvalidConfig):
        ExperimentConfig.from_dict({"kind": "stable-check", "seed": 1, "budgets": {"samples": 0}})
    with pytest.raises(InvalidConfig):
        ExperimentConfig.from_dict({"kind": "stable-check", "seed": 1, "partitions": 0})


def test_regime_config_must_fit_phi():
    base = {"kind": "bpre-regime", "seed": 1, "family": {"kind": "lazy-lattice", "p": 0.25},
            "params": {"n": 300, "m": 30, "phi": 2, "regime": 1}}
    ExperimentConfig.from_dict(base)
    base["params"] = {"n": 300, "m": 30, "phi": 100, "regime": 1}
    with pytest.raises(InvalidConfig):
        ExperimentConfig.from_dict(base)
    base["params"] = {"n": 300, "m": 30, "phi": 0.5, "regime": 3}
    with pytest.raises(InvalidConfig):
        ExperimentConfig.from_dict(base)
    base["params"] = {"n": 300, "m": 30, "phi": 2, "regime": 5}
    with pytest.raises(InvalidConfig):
        ExperimentConfig.from_dict(base)


def test_config_json_and_overrides(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"kind": "stable-check", "seed": 3, "params": {"alpha": 1.5}}))
    config = ExperimentConfig.from_json(str(path))
    assert config.params == {"alpha": 1.5}
    changed = config.with_overrides(seed=9, partitions=None)
    assert changed.seed == 9 and changed.partitions == 1
    assert config.budget("samples", 77) == 77
    assert config.tolerance("cf", 0.5) == 0.5
    with pytest.raises(InvalidConfig):
        ExperimentConfig.from_json(str(tmp_path / "missing.json"))


def test_acceptance_suite_is_valid(tmp_path):
    configs = acceptance_configs(seed=5, output_dir=str(tmp_path))
    assert len(configs) == len(ACCEPTANCE_SUITE) == 10
    assert len({c.name for c in configs}) == 10
    assert all(c.seed == 5 for c in configs)
    assert all(c.output_dir.startswith(str(tmp_path)) for c in configs)


def _sample_report():
    config = ExperimentConfig.from_dict({"kind": "stable-check", "seed": 1, "name": "sample"})
    report = ExperimentReport.for_config(config)
    report.tables["diffs"] = (["x", "abs_diff"], [[0.0, 0.01], [1.0, 0.03], [2.0, 0.02]])
    report.checks.append(Check.evaluate("max diff", 0.03, 0.05, source={"table": "diffs", "column": "abs_diff"}))
    report.checks.append(Check.evaluate("plain", 2.0, 1.0, op="ge"))
    return report


def test_write_report_and_manifest(tmp_path):
    directory = str(tmp_path / "out")
    manifest = write_report(_sample_report(), directory)
    assert os.path.basename(manifest) == MANIFEST
    assert verify_manifest(manifest)
    listed = json.load(open(manifest))['files']
    assert set(listed) == {"config.json", "diffs.csv", "report.json"}
    header, rows = read_csv(os.path.join(directory, "diffs.csv"))
    assert header == ["x", "abs_diff"] and len(rows) == 3
    with open(os.path.join(directory, "diffs.csv"), 'a') as f:
        f.write("3.0,0.5\n")
    assert not verify_manifest(manifest)
    os.remove(os.path.join(directory, "diffs.csv"))
    assert not verify_manifest(manifest)


def test_replay_recomputes_from_tables(tmp_path):
    directory = str(tmp_path / "out")
    write_report(_sample_report(), directory)
    replayed = {r['name']: r for r in replay_checks(directory)}
    assert replayed["max diff"]['from_table']
    assert replayed["max diff"]['statistic'] == pytest.approx(0.03)
    assert all(r['matches'] for r in replayed.values())


def test_write_report_failure_leaves_no_manifest(tmp_path):
    blocker = tmp_path / "blocked"
    blocker.write_text("not a directory")
    with pytest.raises(IoFailure):
        write_report(_sample_report(), str(blocker))
    assert not os.path.exists(os.path.join(str(blocker), MANIFEST))
