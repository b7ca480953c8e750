"""Seeded noise substreams.

Noise for path ``i`` comes from block ``i // BLOCK`` of the stream
``(seed, stream)``; each block is an independent Philox generator keyed by
``SeedSequence(seed, spawn_key=(stream, block))``.  A block always holds the
increments for every grid step, so the noise at ``(path, step)`` does not
depend on the start index, on how many paths are requested, or on how the
blocks are distributed over threads.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

BLOCK = 1024

GAUSSIAN = "gaussian"
RADEMACHER = "rademacher"
NOISE_MODELS = (GAUSSIAN, RADEMACHER)


def _block(seed: int, stream: int, block: int, steps: np.ndarray, dim: int, model: str):
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(block)))
    gen = np.random.Generator(np.random.Philox(ss))
    shape = (BLOCK, steps.size, dim)
    if model == GAUSSIAN:
        z = gen.standard_normal(shape)
    elif model == RADEMACHER:
        z = 2.0 * gen.integers(0, 2, size=shape).astype(float) - 1.0
    else:
        raise ValueError(f"unknown noise model {model!r}; expected one of {NOISE_MODELS}")
    return z * np.sqrt(steps)[None, :, None]


def increments(seed: int, n_paths: int, steps, dim: int, model: str = GAUSSIAN,
               stream: int = 0, first_path: int = 0, threads: int = 1) -> np.ndarray:
    """Brownian increments ``dW`` of shape ``(n_paths, len(steps), dim)``.

    ``steps`` are the grid step sizes; Rademacher increments are ``+-sqrt(step)``.
    """
    steps = np.asarray(steps, dtype=float)
    if n_paths < 1:
        raise ValueError("need at least one path")
    lo, hi = first_path, first_path + n_paths
    blocks = range(lo // BLOCK, (hi - 1) // BLOCK + 1)
    make = lambda b: _block(seed, stream, b, steps, dim, model)
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(make, blocks))
    else:
        parts = [make(b) for b in blocks]
    out = np.concatenate(parts, axis=0)
    off = lo - blocks[0] * BLOCK
    return out[off:off + n_paths]
