"""Deterministic seed derivation and RNG construction.

All randomness in the toolkit flows through Philox, a counter-based generator
whose output is fixed across platforms, so that any run is reproducible from
its integer seeds alone.  Derived streams are obtained by hashing the parent
seed together with structural indices (class id, sample index, repeat, ...)
so parallel generation is schedule-independent.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(*parts) -> int:
    """Hash integers/strings into a stable 64-bit seed."""
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, str):
            h.update(b"s" + part.encode("utf-8"))
        else:
            h.update(b"i" + int(part).to_bytes(16, "big", signed=True))
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "big") & _MASK64


def rng_from(*parts) -> np.random.Generator:
    """Philox generator keyed by the derived seed of ``parts``."""
    return np.random.Generator(np.random.Philox(key=derive_seed(*parts)))
