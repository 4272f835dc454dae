"""Per-subsystem seed derivation from one master seed.

Each subsystem gets its own deterministic stream:
``SeedSequence([master, crc32(domain)])`` -> first generated state word.
Domains in use: "data", "init", "episodes".
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(master: int, domain: str) -> int:
    ss = np.random.SeedSequence([int(master), zlib.crc32(domain.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def rng_for(master: int, domain: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, domain))
