"""Seeded random streams.

All randomness comes from numpy's PCG64 bit generator. A run seed is split
into named, independent streams by feeding ``[seed, crc32(name)]`` to a
``SeedSequence``; the same (seed, name) pair always yields the same stream
on every platform, and adding a new stream never perturbs existing ones.

Stream names in use: ``backbone``, ``head``, ``lora``, ``shuffle``,
``split``, ``histogram``, ``synthetic``.
"""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key])))


def truncated_normal(gen: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std^2) truncated to +-bound*std by resampling, as float64."""
    out = gen.normal(0.0, std, size=shape)
    limit = bound * std
    bad = np.abs(out) > limit
    while bad.any():
        out[bad] = gen.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > limit
    return out
