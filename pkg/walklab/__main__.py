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

import copy
import sys

from walklab.base_experiment import WalkLabException
from walklab.harness import ACCEPTANCE_SUITE, ExperimentConfig, acceptance_configs, run_experiment, run_suite

LATTICE = {"kind": "lazy-lattice", "p": 0.25}

DEFAULTS = {
    ("stable", "check"): {"kind": "stable-check", "params": {"alpha": 1.5, "beta": 0.5, "scale": 1.0}},
    ("walk", "renewal"): {"kind": "walk-check", "family": LATTICE, "params": {"task": "renewal"}},
    ("walk", "kernel"): "local-xysmall",
    ("walk", "conditioned"): {"kind": "walk-check", "family": LATTICE, "params": {"task": "conditioned", "N": 50}},
    ("limits", "meander"): {"kind": "limit-law", "family": LATTICE, "params": {"task": "meander", "n_steps": 10000}},
    ("limits", "bridge"): {"kind": "limit-law", "family": LATTICE, "params": {"task": "bridge", "n_steps": 10000}},
    ("limits", "constants"): "constants-lattice",
    ("limits", "laws"): "regime-kernels",
    ("bpre", "regime"): "bpre-regime1",
    ("bpre", "smalldev"): "small-deviation",
    ("bpre", "tcond"): "tcond",
    ("bpre", "b2check"): "b2-verdicts",
}


def default_config(group: str, command: str) -> dict:
    entry = DEFAULTS[(group, command)]
    if isinstance(entry, str):
        entry = next(e for e in ACCEPTANCE_SUITE if e['name'] == entry)
    data = copy.deepcopy(entry)
    data.setdefault('seed', 0)
    data.setdefault('name', f"{group}-{command}")
    return data


def build_config(args) -> ExperimentConfig:
    if args.config:
        config = ExperimentConfig.from_json(args.config)
    else:
        config = ExperimentConfig.from_dict(default_config(args.group, args.command))
    return config.with_overrides(seed=args.seed, partitions=args.partitions, output_dir=args.out, cache_dir=args.cache)


def main(argv=None):
    import argparse
    from tqdm import tqdm

    parser = argparse.ArgumentParser(
        prog="walklab",
        description="Simulation and numerical verification of conditioned random walks and BPRE limit laws",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Experiment config (JSON)")
    common.add_argument("--seed", type=int, help="Override the config seed")
    common.add_argument("--partitions", type=int, help="Override the number of random substreams")
    common.add_argument("--out", help="Directory for CSV tables, report and manifest")
    common.add_argument("--cache", help="Directory for cached kernels and renewal tables")
    common.add_argument("--debug", action='store_true', help="Enable debug output")

    groups = parser.add_subparsers(dest="group", required=True)
    commands = {}
    for group, command in DEFAULTS:
        commands.setdefault(group, []).append(command)
    commands["verify"] = ["all"]
    for group, names in commands.items():
        sub = groups.add_parser(group).add_subparsers(dest="command", required=True)
        for name in names:
            p = sub.add_parser(name, parents=[common], formatter_class=argparse.ArgumentDefaultsHelpFormatter)
            if group == "verify":
                p.add_argument("--only", nargs="*", help="Run only the named acceptance configs")
                p.add_argument("--workers", type=int, default=1, help="Configs run in parallel")
    args = parser.parse_args(argv)

    with tqdm(total=100, desc=f"{args.group} {args.command}") as pbar:
        def log_callback(message):
            tqdm.write(message)

        def status_callback(status):
            tqdm.write(status)

        def progress_callback(progress):
            pbar.n = progress
            pbar.refresh()

        callbacks = dict(debug=args.debug, log_callback=log_callback, status_callback=status_callback,
                         progress_callback=progress_callback)
        try:
            if args.group == "verify":
                configs = acceptance_configs(args.seed, args.partitions, args.out)
                if args.only:
                    configs = [c for c in configs if c.name in args.only]
                reports = run_suite(configs, max_workers=args.workers, **callbacks)
            else:
                reports = [run_experiment(build_config(args), **callbacks)]
        except WalkLabException as e:
            tqdm.write(f"ERROR: {e}")
            return 2

    for report in reports:
        tqdm.write(f"{report.name}: {'PASS' if report.passed else 'FAIL'} ({report.wall_clock:.1f}s)")
        for check in report.checks:
            tqdm.write(f"  [{'x' if check.passed else ' '}] {check.name}: {check.statistic:.6g} {check.op} {check.threshold:.6g}")
    return 0 if all(r.passed for r in reports) else 1


if __name__ == "__main__":
    sys.exit(main())
