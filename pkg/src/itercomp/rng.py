"""Named random substreams derived from a single master seed.

Every stage of the pipeline draws from its own stream, so changing how much
randomness one stage consumes never perturbs another stage's draws.
"""

import zlib

import numpy as np

__all__ = ["substream"]


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


def substream(seed: int, *labels) -> np.random.Generator:
    """Generator for the substream named by ``labels`` under ``seed``.

    Labels may be strings (hashed with crc32, stable across runs) or ints.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_label_key(l) for l in labels]
    return np.random.default_rng(np.random.SeedSequence(entropy))
