import os

import pytest

from walklab.__main__ import default_config, main
from walklab.base_experiment import ExperimentKind, InvalidConfig, detect_experiment_kind
from walklab.harness import MANIFEST, ExperimentConfig, replay_checks, run_experiment, run_suite, verify_manifest
from walklab.stable_experiment import StableCheckExperiment

LATTICE = {"kind": "lazy-lattice", "p": 0.25}


def stable_config(output_dir=None, seed=4):
    return ExperimentConfig.from_dict({
        "kind": "stable-check", "seed": seed, "name": "gaussian",
        "params": {"alpha": 2.0, "beta": 0.0, "scale": 0.5, "grid_points": 21},
        "budgets": {"samples": 50_000},
        "tolerances": {"cf": 0.03, "cdf": 0.03},
        "output_dir": output_dir,
    })


def test_detect_experiment_kind():
    assert detect_experiment_kind(stable_config()) == ExperimentKind.STABLE_CHECK
    tcond = ExperimentConfig.from_dict({"kind": "tcond", "seed": 0, "family": LATTICE})
    assert detect_experiment_kind(tcond) == ExperimentKind.TCOND


def test_callbacks_receive_phases_progress_and_debug_lines():
    statuses, progress, lines = [], [], []
    experiment = StableCheckExperiment(status_callback=statuses.append, progress_callback=progress.append,
                                       log_callback=lines.append)
    experiment.emit_progress(140)
    experiment.emit_progress(-3)
    experiment.debug_log("hidden")
    assert progress == [100, 0]
    assert lines == []
    experiment.debug = True
    experiment.debug_log("cell", 3)
    assert lines == ["(DEBUG) cell 3"]
    experiment.emit_status("Simulating")
    assert statuses == ["Simulating"]


def test_stable_check_writes_verifiable_report(tmp_path):
    out = str(tmp_path / "stable")
    messages = []
    report = run_experiment(stable_config(out), log_callback=messages.append)
    assert report.passed
    assert set(report.tables) == {"cf", "density", "positivity"}
    assert report.replica_counts['samples'] == 50_000
    assert any("PASS" in m for m in messages)
    assert verify_manifest(os.path.join(out, MANIFEST))
    replayed = replay_checks(out)
    assert all(r['matches'] for r in replayed)
    assert sum(r['from_table'] for r in replayed) == 2


def test_same_seed_gives_identical_tables(tmp_path):
    first, second = str(tmp_path / "a"), str(tmp_path / "b")
    run_experiment(stable_config(first))
    run_experiment(stable_config(second))
    for name in ("cf.csv", "density.csv"):
        with open(os.path.join(first, name), 'rb') as a, open(os.path.join(second, name), 'rb') as b:
            assert a.read() == b.read()


def test_renewal_identities_for_lattice():
    config = ExperimentConfig.from_dict({"kind": "walk-check", "seed": 0, "family": LATTICE,
                                         "params": {"task": "renewal"}})
    report = run_experiment(config)
    assert report.passed
    header, rows = report.tables['renewal']
    assert header[:3] == ["x", "V+", "V-"]
    assert rows[0][1] == pytest.approx(4.0)
    assert "a_n" in report.provenance['target']


def test_conditioned_sampler_comparison():
    config = ExperimentConfig.from_dict({"kind": "walk-check", "seed": 2, "family": LATTICE,
                                         "params": {"task": "conditioned", "N": 20},
                                         "budgets": {"paths": 4_000}, "tolerances": {"chi2_p": 1e-3}})
    report = run_experiment(config)
    assert report.passed
    assert report.replica_counts['paths'] == 8_000


def test_kernel_check_uses_cache(tmp_path):
    config = ExperimentConfig.from_dict({"kind": "walk-check", "seed": 0, "family": LATTICE,
                                         "params": {"task": "kernel", "n": 500, "bound_n": 100, "bound_heights": 5},
                                         "tolerances": {"local_rel": 0.25}, "cache_dir": str(tmp_path)})
    report = run_experiment(config)
    assert report.passed
    assert len(report.provenance['caches']) == 1
    again = run_experiment(config)
    assert again.provenance['kernel_digest'] == report.provenance['kernel_digest']


def test_bridge_task_on_lattice():
    config = ExperimentConfig.from_dict({
        "kind": "limit-law", "seed": 0, "family": LATTICE,
        "params": {"task": "bridge", "n_steps": 2_000, "bin_width": 0.2, "a_values": [0.5, 1.0], "b_values": [0.5, 1.0]},
        "tolerances": {"bridge": 0.08},
    })
    report = run_experiment(config)
    assert report.passed
    assert len(report.tables['bridge'][1]) == 4


def test_b2_check_suite_cases():
    data = default_config("bpre", "b2check")
    data['budgets'] = {"environments": 400_000}
    report = run_experiment(ExperimentConfig.from_dict(data))
    assert report.passed
    header, rows = report.tables['b2']
    verdicts = [row[3] for row in rows]
    assert verdicts == ["PASS", "PASS", "PASS", "FAIL"]
    assert [row[header.index("empirical")] for row in rows] == verdicts
    assert all(row[header.index("mismatch")] == 0 for row in rows)


def test_structural_task_on_lattice():
    config = ExperimentConfig.from_dict({
        "kind": "walk-check", "seed": 5, "family": LATTICE,
        "params": {"task": "structural", "N": 20, "h_N": 20, "h_k": 10},
        "budgets": {"paths": 2_000, "cf_samples": 50_000, "duality_paths": 10_000, "h_paths": 10_000},
        "tolerances": {"chi2_p": 1e-4, "cf": 0.05, "mixture": 1e-6}
    })
    report = run_experiment(config)
    assert report.passed
    checks = {c.name: c for c in report.checks}
    assert checks["|slope of log V+(a_n) - rho|"].statistic < 0.05
    assert checks["V+(a_n) V-(a_n) / n spread"].statistic < 0.15
    header, rows = report.tables['products']
    assert [row[0] for row in rows] == [1_000.0, 4_000.0, 16_000.0]
    assert rows[-1][header.index("product")] == pytest.approx(8.1)
    assert len(report.tables['duality'][1]) == 2
    assert len(report.tables['h_transform'][1]) == 2
    assert report.replica_counts['duality_paths'] == 20_000


def test_unknown_task_is_rejected():
    config = ExperimentConfig.from_dict({"kind": "walk-check", "seed": 0, "family": LATTICE,
                                         "params": {"task": "teleport"}})
    with pytest.raises(InvalidConfig):
        run_experiment(config)


def test_unknown_offspring_law_is_rejected():
    config = ExperimentConfig.from_dict({"kind": "tcond", "seed": 0, "family": LATTICE,
                                         "model": {"offspring": "binary"}})
    with pytest.raises(InvalidConfig):
        run_experiment(config)


def test_run_suite_keeps_order():
    configs = [stable_config(seed=s) for s in (1, 2)]
    reports = run_suite(configs, max_workers=2)
    assert [r.provenance['seed'] for r in reports] == [1, 2]


def test_cli_stable_check(tmp_path):
    out = str(tmp_path / "cli")
    assert main(["stable", "check", "--seed", "3", "--out", out]) == 0
    assert verify_manifest(os.path.join(out, MANIFEST))


def test_cli_reports_bad_config(tmp_path):
    assert main(["stable", "check", "--config", str(tmp_path / "missing.json")]) == 2
