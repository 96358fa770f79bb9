# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for the shard assignment solvers.

Same interface as ``_kernels_py``; the arithmetic (operation order,
tie-breaking) must stay bit-identical between the two implementations.
"""

from libc.stdlib cimport free, malloc

cdef extern from "math.h":
    double INFINITY


def greedy_sweep(double[::1] base_load, double[::1] trans, Py_ssize_t count,
                 double shard_size, double last_size,
                 int[::1] out_assign, double[::1] out_load):
    """Assign ``count`` shards to the neighbor with least estimated load.

    Shards are uniform of ``shard_size`` except the final one (``last_size``).
    ``base_load`` holds the fixed per-neighbor term (propagation delay plus
    sync-finish offset); ties go to the lowest neighbor index.
    """
    cdef Py_ssize_t n = base_load.shape[0]
    cdef Py_ssize_t j, u, best_u
    cdef double size, cost, best_cost

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
        out_assign[j] = <int> best_u
        out_load[best_u] = best_cost


def brute_force_search(double[::1] base_load, double[::1] trans,
                       Py_ssize_t count, double shard_size, double last_size,
                       int[::1] out_assign):
    """Exhaustive assignment search, lexicographically first optimum wins.

    Depth-first over assignment vectors in ascending neighbor-index order,
    pruning branches whose partial makespan already reaches the incumbent.
    Returns the optimal makespan and fills ``out_assign``.
    """
    cdef Py_ssize_t n = base_load.shape[0]
    cdef double best = INFINITY
    cdef Py_ssize_t j, u, k
    cdef double size, nf, npm
    cdef bint found

    cdef double *finish = <double *> malloc(n * sizeof(double))
    cdef double *saved = <double *> malloc(count * sizeof(double))
    cdef double *pmax = <double *> malloc((count + 1) * sizeof(double))
    cdef Py_ssize_t *choice = <Py_ssize_t *> malloc(count * sizeof(Py_ssize_t))
    if finish == NULL or saved == NULL or pmax == NULL or choice == NULL:
        free(finish); free(saved); free(pmax); free(choice)
        raise MemoryError()

    try:
        pmax[0] = base_load[0]
        for u in range(n):
            finish[u] = base_load[u]
            if base_load[u] > pmax[0]:
                pmax[0] = base_load[u]
        for j in range(count):
            choice[j] = -1

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
                    out_assign[k] = <int> choice[k]
            else:
                j += 1
        return best
    finally:
        free(finish)
        free(saved)
        free(pmax)
        free(choice)
