"""Deterministic random-number plumbing.

All randomness in the package flows through generators built here. Streams
are either counter-based (a fresh generator keyed on integers such as
``(seed, sample_index)``, so any element can be produced independently and in
any order) or stateful loop generators whose bit-generator state is captured
into checkpoints for exact resume.
"""

from __future__ import annotations

import numpy as np


def make_rng(*keys: int) -> np.random.Generator:
    """Generator keyed on a tuple of integers; same keys, same stream."""
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]))


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-safe snapshot of a generator's bit state."""
    return _plain(rng.bit_generator.state)


def restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def truncated_normal(rng: np.random.Generator, shape, std: float, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)
