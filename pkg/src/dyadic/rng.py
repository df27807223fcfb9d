"""Counter-based random streams for reproducible parallel Monte Carlo.

Every unit of work (one escape-time sample, one chunk of SDE paths) owns the
Philox stream keyed by ``(master seed, unit index)``.  Values depend only on
the key, never on execution order, thread count or how work is batched, so
reruns with a different worker count are bit-identical.
"""

from __future__ import annotations

import numpy as np


def sample_stream(seed: int, index: int) -> np.random.Generator:
    """Stream for one sample or path chunk: Philox keyed by (seed, index)."""
    return np.random.Generator(np.random.Philox(key=np.array([seed, index], dtype=np.uint64)))
