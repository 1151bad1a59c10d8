"""Reproducible random streams.

All randomness in the package flows through counter-based Philox 4x64
generators keyed by (seed, stream id).  Philox has a published, platform
independent algorithm, so any (seed, stream) pair yields the same draws on
any machine.  Stream ids partition usage so that consumers never share a
stream:

* stream 0            bulk draws (whole-array sampling, noise images)
* stream 1 + brick_id per-brick expansion draws during scene sampling

Keeping one stream per brick means a change in sampling order, or in the
set of bricks that happen to be expanded, never perturbs the draws seen by
an unrelated brick.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def stream(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Generator for the given (seed, stream) pair."""
    key = [seed & _MASK64, stream_id & _MASK64]
    return np.random.Generator(np.random.Philox(key=key))


def brick_stream(seed: int, brick_id: int) -> np.random.Generator:
    """Expansion stream for one brick; disjoint from `stream(seed, 0)`."""
    return stream(seed, 1 + brick_id)
