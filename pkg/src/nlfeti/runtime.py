"""In-process communication contract for the distributed solver.

Workers (one per subdomain) interact only through three collectives: a
neighbor halo exchange on dual indices, a coarse reduction replicated on all
workers, and a scalar allreduce.  Collectives accumulate in a fixed worker
order, so results are bit-identical regardless of the execution backend or
thread schedule.  The backends only parallelize the embarrassingly parallel
per-worker compute steps between collectives.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np


class TopologyMismatchError(ValueError):
    """A per-worker payload does not match the topology's dual layout."""


@dataclass(frozen=True)
class Topology:
    """Neighbor structure and shared-dual index maps of a decomposition.

    Each unordered neighbor pair owns a contiguous block of global dual
    indices; exchanges holds, per pair, the matching slices into the two
    owners' locally sorted dual vectors.
    """

    n_workers: int
    z: int
    dual_sizes: tuple
    exchanges: tuple   # ((a, slice_a, b, slice_b), ...)

    def neighbors_of(self, n):
        """Sorted workers sharing at least one dual index with worker n."""
        out = {a if b == n else b
               for a, _, b, _ in self.exchanges if n in (a, b)}
        return sorted(out)


def build_topology(decomp):
    cons = decomp.constraints
    N = decomp.n_subdomains
    exchanges = tuple(
        (a, cons.pair_slices[(a, b)][0], b, cons.pair_slices[(a, b)][1])
        for a, b in decomp.neighbor_pairs)
    return Topology(n_workers=N, z=N,
                    dual_sizes=tuple(cons.q_of(n) for n in range(N)),
                    exchanges=exchanges)


class SerialBackend:
    """Runs per-worker steps as a plain loop in worker order."""

    name = "serial"

    def run(self, fn, items):
        return [fn(i, item) for i, item in enumerate(items)]

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ThreadedBackend:
    """Runs per-worker steps on a persistent thread pool.

    Workers are split into contiguous chunks, one message per pool thread,
    and results are collected by worker index, so the outcome is independent
    of scheduling.  Compiled solver kernels release the GIL, which is where
    the parallelism comes from.
    """

    name = "threaded"

    def __init__(self, threads=None):
        if threads is None:
            self.threads = os.cpu_count() or 1
        else:
            self.threads = int(threads)
            if self.threads < 1:
                raise ValueError(f"thread count must be positive, got {threads}")
        self._pool = ThreadPoolExecutor(max_workers=self.threads,
                                        thread_name_prefix="nlfeti-worker")

    def run(self, fn, items):
        n = len(items)
        if n == 0:
            return []
        chunks = min(self.threads, n)
        bounds = [(k * n) // chunks for k in range(chunks + 1)]

        def run_chunk(lo, hi):
            return [fn(i, items[i]) for i in range(lo, hi)]

        futures = [self._pool.submit(run_chunk, bounds[k], bounds[k + 1])
                   for k in range(chunks)]
        out = []
        for fut in futures:
            out.extend(fut.result())
        return out

    def close(self):
        self._pool.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def make_backend(kind, threads=None):
    if kind == "serial":
        return SerialBackend()
    if kind == "threaded":
        return ThreadedBackend(threads)
    raise ValueError(f"unknown backend {kind!r}")


def _check_lengths(topology, vectors):
    if len(vectors) != topology.n_workers:
        raise TopologyMismatchError(
            f"{len(vectors)} payloads for {topology.n_workers} workers")
    for n, v in enumerate(vectors):
        if v.shape[0] != topology.dual_sizes[n]:
            raise TopologyMismatchError(
                f"worker {n}: dual vector of length {v.shape[0]}, "
                f"expected {topology.dual_sizes[n]}")


def halo_exchange(topology, vectors):
    """Sum shared dual entries between the two owners of every constraint.

    Accepts per-worker arrays of shape (q_n,) or (q_n, k); returns new
    arrays where each shared entry holds the sum of both owners' values.
    """
    _check_lengths(topology, vectors)
    out = [np.array(v, dtype=np.float64, copy=True) for v in vectors]
    for a, sl_a, b, sl_b in topology.exchanges:
        summed = vectors[a][sl_a] + vectors[b][sl_b]
        out[a][sl_a] = summed
        out[b][sl_b] = summed
    return out


def coarse_reduce(topology, contributions):
    """Fixed-order global sum of per-worker coarse contributions.

    Every worker conceptually receives the same result; the single returned
    array stands for that replicated value.
    """
    if len(contributions) != topology.n_workers:
        raise TopologyMismatchError(
            f"{len(contributions)} contributions for {topology.n_workers} workers")
    acc = np.zeros_like(np.asarray(contributions[0], dtype=np.float64))
    for c in contributions:
        acc += c
    return acc


def scalar_allreduce(topology, scalars):
    """Fixed-order sum of one scalar per worker, delivered to all."""
    if len(scalars) != topology.n_workers:
        raise TopologyMismatchError(
            f"{len(scalars)} scalars for {topology.n_workers} workers")
    acc = 0.0
    for s in scalars:
        acc += float(s)
    return acc
