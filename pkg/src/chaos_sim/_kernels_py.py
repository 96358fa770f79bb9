"""Pure-Python fallback for the compiled solver kernels.

Used when the ``_speedups`` extension is unavailable or when
``CHAOS_SIM_PURE_PYTHON`` is set. Must produce bit-identical results to the
compiled version: same operation order, same tie-breaking.
"""

import math


def greedy_sweep(base_load, trans, count, shard_size, last_size,
                 out_assign, out_load):
    """Assign ``count`` shards to the neighbor with least estimated load."""
    n = len(base_load)
    for u in range(n):
        out_load[u] = base_load[u]
    for j in range(count):
        size = shard_size if j < count - 1 else last_size
        best_u = 0
        best_cost = out_load[0] + size * trans[0]
        for u in range(1, n):
            cost = out_load[u] + size * trans[u]
            if cost < best_cost:
                best_cost = cost
                best_u = u
        out_assign[j] = best_u
        out_load[best_u] = best_cost


def brute_force_search(base_load, trans, count, shard_size, last_size,
                       out_assign):
    """Exhaustive assignment search, lexicographically first optimum wins."""
    n = len(base_load)
    best = math.inf
    finish = [base_load[u] for u in range(n)]
    saved = [0.0] * count
    pmax = [0.0] * (count + 1)
    choice = [-1] * count
    pmax[0] = max(finish)

    j = 0
    while j >= 0:
        if choice[j] >= 0:
            finish[choice[j]] = saved[j]
        u = choice[j] + 1
        size = shard_size if j < count - 1 else last_size
        found = False
        while u < n:
            nf = finish[u] + size * trans[u]
            npm = pmax[j] if pmax[j] > nf else nf
            if npm < best:
                found = True
                break
            u += 1
        if not found:
            choice[j] = -1
            j -= 1
            continue
        choice[j] = u
        saved[j] = finish[u]
        finish[u] = nf
        pmax[j + 1] = npm
        if j == count - 1:
            best = npm
            for k in range(count):
                out_assign[k] = choice[k]
        else:
            j += 1
    return best
