"""Counter-based random substreams.

All randomness in the package flows through one root seed.  Substreams are
Philox generators keyed by integer tuples, so any piece of noise is
addressable as (root, *key) and is reproduced exactly regardless of which
worker, or how many workers, execute the run.  Per-step draws use the
Philox jump mechanism: step ``m`` of a stream reads from the base state
advanced by ``m`` jumps, which makes single-step and chunked drivers
consume identical numbers.
"""

from __future__ import annotations

import numpy as np

# Number of time steps whose normal increments are drawn in a single call.
# This is part of the stream layout: changing it changes the numbers.
W_CHUNK = 64


def substream(root_seed: int, *key: int) -> np.random.Generator:
    """A Generator on an independent Philox stream keyed by (root, *key)."""
    ss = np.random.SeedSequence(int(root_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


class WStream:
    """Per-step Gaussian increments for one noise block.

    ``normals(chunk_index, shape)`` returns the standard-normal block for
    the chunk of steps starting at ``chunk_index * W_CHUNK``.  Each chunk
    is drawn from an independently jumped Philox state, so chunks can be
    regenerated in any order and always contain the same numbers.
    """

    def __init__(self, root_seed: int, *key: int):
        ss = np.random.SeedSequence(int(root_seed),
                                    spawn_key=tuple(int(k) for k in key))
        self._base = np.random.Philox(ss)

    def chunk_normals(self, chunk_index: int, shape) -> np.ndarray:
        gen = np.random.Generator(self._base.jumped(int(chunk_index)))
        return gen.standard_normal(shape)
