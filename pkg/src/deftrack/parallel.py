"""Deterministic data-parallel helpers.

Work is split into fixed-size chunks that never depend on the thread count,
and partial results are combined by a pairwise tree whose shape depends only
on the number of chunks. Running with 1 or N threads therefore produces
bitwise-identical sums.
"""

from concurrent.futures import ThreadPoolExecutor

CHUNK = 4096

_threads = 1


def set_threads(n):
    global _threads
    _threads = max(1, int(n or 1))


def get_threads():
    return _threads


def chunks(n, size=CHUNK):
    return [(lo, min(lo + size, n)) for lo in range(0, n, size)]


def chunked_map(fn, n, size=CHUNK, threads=None):
    """``[fn(lo, hi) for each chunk]`` in chunk order, optionally threaded."""
    spans = chunks(n, size)
    threads = _threads if threads is None else threads
    if threads <= 1 or len(spans) <= 1:
        return [fn(lo, hi) for lo, hi in spans]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda span: fn(*span), spans))


def tree_sum(parts):
    """Pairwise reduction with a fixed pairing order."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to reduce")
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]
