"""Named random streams derived from a single master seed.

Every source of randomness in a run pulls from a stream identified by a
string name ("init", "sampling", "synth/noise/visual", ...), so adding or
reordering one consumer does not silently shift the draws of another.
"""

import hashlib

import numpy as np

_MOD = 2**63


def _name_entropy(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for the named stream under the given master seed."""
    return np.random.default_rng(np.random.SeedSequence([seed % _MOD, _name_entropy(name)]))


def subseed(seed: int, name: str) -> int:
    """Derived integer seed, for handing an entire sub-run its own master seed."""
    digest = hashlib.sha256(f"{seed % _MOD}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % _MOD
