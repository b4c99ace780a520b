"""Split one root seed into named, platform-independent child seeds."""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(root: int, name: str) -> int:
    seq = np.random.SeedSequence([int(root) & 0xFFFFFFFF, int(root) >> 32, zlib.crc32(name.encode())])
    return int(seq.generate_state(1, np.uint64)[0] >> 1)


def rng_for(root: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, name))
