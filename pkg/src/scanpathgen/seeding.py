"""Deterministic seed derivation.

All randomness in the toolkit flows from explicit seeds through this module.
Derived streams are functional in their inputs (no hidden counters), so a run
resumed at epoch k replays exactly the draws of an uninterrupted run. Nothing
here touches torch's or numpy's global RNG state.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def mix(*parts: int | str) -> int:
    """Collapse a tuple of ints/strings into a stable 63-bit seed.

    blake2b keeps distinct part tuples from colliding in practice; the result
    is masked to 63 bits so it is a valid seed for both torch and numpy.
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, bool) or not isinstance(part, (int, str)):
            raise TypeError(f"seed parts must be int or str, got {type(part).__name__}")
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little") & (2**63 - 1)


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(seed)
    return gen


def np_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
