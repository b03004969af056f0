"""Named RNG sub-streams.

All randomness in the pipeline flows from one root seed. Each consumer asks
for a stream by name ("fingerprint", case id, fold index, ...) so that
parallel consumers never share state and reruns are bit-identical regardless
of execution order.
"""

import hashlib

import numpy as np


def child_seed(root_seed: int, *names) -> int:
    """Derive a stable 63-bit seed for the sub-stream identified by ``names``.

    Uses sha256 of the root seed plus the name path, so the mapping is
    platform- and run-independent.
    """
    h = hashlib.sha256()
    h.update(str(int(root_seed)).encode())
    for name in names:
        h.update(b"\x00")
        h.update(str(name).encode())
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFFFFFFFFFFFFFF


def rng_for(root_seed: int, *names) -> np.random.Generator:
    """Generator for the named sub-stream."""
    return np.random.default_rng(child_seed(root_seed, *names))
