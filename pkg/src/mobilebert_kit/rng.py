"""Named random sub-streams derived from one integer seed."""

import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *extra)``.

    Different names (``"init"``, ``"data"``, ``"dropout"`` ...) never share
    state, so re-running one stage does not perturb another.
    """
    key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


def derive(seed: int, name: str, *extra: int) -> int:
    """A 63-bit integer seed for ``(seed, name, *extra)``, for APIs that take ints."""
    return int(stream(seed, name, *extra).integers(0, 2**63 - 1))
