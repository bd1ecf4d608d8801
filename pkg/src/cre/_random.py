"""Seeded random streams and a small ordered parallel map.

All randomness goes through the Philox counter-based generator.  A stream is
identified by the master seed plus a tuple of labels (strings or integers), so
e.g. tree 17 of the forest always sees the same numbers no matter how many
workers are running or in which order trees are fitted.
"""
from __future__ import annotations

import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")


def _key(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("stream labels must be non-negative")
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def generator(seed: int, *stream) -> np.random.Generator:
    """Return an independent Philox generator for ``(seed, *stream)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *stream) -> int:
    """A 63-bit integer seed derived from ``(seed, *stream)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(s) for s in stream))
    hi, lo = (int(v) for v in ss.generate_state(2, dtype=np.uint32))
    return (hi << 31) ^ lo


def resolve_threads(threads: int | None) -> int:
    if threads is None or threads <= 0:
        return os.cpu_count() or 1
    return int(threads)


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: int | None = 1) -> list[R]:
    """``list(map(fn, items))``, optionally on a thread pool; output order is input order."""
    items = list(items)
    n = resolve_threads(threads)
    if n == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
