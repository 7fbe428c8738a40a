"""Seeded block streams and ordered parallel execution for Monte Carlo loops.

Paths are split into fixed-size blocks; block b always draws from the Philox
stream spawned as child b of the experiment seed, and results are concatenated
in block order, so output does not depend on the number of worker threads.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np

PATH_BLOCK = 1 << 15
TIME_CHUNK = 128


def seed_sequence(seed, *tags):
    """A SeedSequence for `seed` namespaced by integer tags."""
    if isinstance(seed, np.random.SeedSequence):
        if not tags:
            return seed
        return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(tags))
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(t) for t in tags))


def block_sizes(n_paths, block=PATH_BLOCK):
    full, rest = divmod(int(n_paths), block)
    return [block] * full + ([rest] if rest else [])


def block_generators(seed, n_blocks):
    children = seed_sequence(seed).spawn(n_blocks)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def run_blocks(work, n_paths, seed, threads=1, block=PATH_BLOCK):
    """Call work(rng, size, block_index) per block and return the results in block order."""
    sizes = block_sizes(n_paths, block)
    gens = block_generators(seed, len(sizes))
    jobs = list(zip(gens, sizes, range(len(sizes))))
    if threads <= 1 or len(jobs) <= 1:
        return [work(g, n, b) for g, n, b in jobs]
    with ThreadPoolExecutor(max_workers=int(threads)) as pool:
        return list(pool.map(lambda job: work(*job), jobs))


def time_chunks(n_steps, chunk=TIME_CHUNK):
    start = 0
    while start < n_steps:
        stop = min(n_steps, start + chunk)
        yield start, stop
        start = stop
