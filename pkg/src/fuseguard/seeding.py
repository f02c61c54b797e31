# Copyright (c) 2025 Francis Bain
# SPDX-License-Identifier: Apache-2.0

"""Seed derivation: every random stream is a pure function of the global seed."""

import hashlib
from typing import Union

import numpy as np

Key = Union[str, int]


def derive_seed(seed: int, *keys: Key) -> int:
    """Hash ``seed`` and ``keys`` into a 63-bit integer seed."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for key in keys:
        h.update(b"\x1f")
        h.update(str(key).encode())
    return int.from_bytes(h.digest(), "little") >> 1


def rng_for(seed: int, *keys: Key) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))
