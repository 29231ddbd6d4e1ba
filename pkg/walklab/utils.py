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

import hashlib
import os
from typing import List, Sequence

import numpy as np
import pandas as pd


def substreams(seed: int, partitions: int) -> List[np.random.Generator]:
    """
    One independent counter-based generator per partition.
    The same (seed, partitions) always yields the same streams.
    """
    if partitions < 1:
        raise ValueError("partitions must be >= 1")
    children = np.random.SeedSequence(int(seed)).spawn(int(partitions))
    return [np.random.Generator(np.random.Philox(child)) for child in children]


def child_stream(rng: np.random.Generator) -> np.random.Generator:
    """Derive a fresh Philox stream from an existing generator."""
    seed = rng.integers(0, 2**63 - 1, dtype=np.int64)
    return np.random.Generator(np.random.Philox(int(seed)))


def split_budget(budget: int, partitions: int) -> List[int]:
    """Split `budget` into `partitions` integer parts that sum to it exactly."""
    base, extra = divmod(int(budget), int(partitions))
    return [base + (1 if i < extra else 0) for i in range(partitions)]


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 16), b''):
            digest.update(block)
    return digest.hexdigest()


def array_digest(*arrays) -> str:
    """Content hash of one or more numpy arrays (dtype, shape and bytes)."""
    digest = hashlib.sha256()
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        digest.update(str(arr.dtype).encode())
        digest.update(str(arr.shape).encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()


def format_value(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_csv(path: str, header: Sequence[str], rows) -> str:
    """Write a CSV table with a mandatory header; returns the path."""
    if not header:
        raise ValueError("CSV tables need a header")
    frame = pd.DataFrame([list(r) for r in rows], columns=list(header))
    frame.to_csv(path, index=False)
    return path


def read_csv(path: str):
    """Read a CSV written by write_csv; numeric cells come back as floats."""
    frame = pd.read_csv(path, float_precision="round_trip")
    numeric = frame.select_dtypes("number").columns
    if len(numeric):
        frame[numeric] = frame[numeric].astype(float)
    return list(frame.columns), frame.astype(object).values.tolist()


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path
