"""Counter-based random streams for reproducible, schedule-independent sampling.

Every stochastic routine in the package draws from a Philox generator keyed by
(seed, tag, index).  Philox is counter-based, so two streams with different
keys are statistically independent and a given key always produces the same
sequence, no matter how many workers are running or in which order tasks
complete.
"""

from __future__ import annotations

import numpy as np

# Tag constants keep key spaces of unrelated subsystems disjoint.
TAG_READOUT = 1
TAG_BENCH_SEQUENCE = 2
TAG_BENCH_SHOTS = 3
TAG_FIT_RESTART = 4
TAG_SPECTROSCOPY = 5
TAG_GENERIC = 6


def substream(seed: int, tag: int, index: int = 0) -> np.random.Generator:
    """Return an independent generator for (seed, tag, index).

    Parameters
    ----------
    seed:
        User-facing seed, any non-negative integer below 2**63.
    tag:
        Subsystem tag (one of the TAG_* constants).
    index:
        Stream index within the subsystem, e.g. a shot-block or
        randomization counter.
    """
    if seed < 0 or tag < 0 or index < 0:
        raise ValueError("seed, tag and index must be non-negative")
    key = np.array([np.uint64(seed), np.uint64((tag << 48) + index)],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
