"""Independent reference computations used by several test files."""

import math

import numpy as np

from billiard_lab import _kernels as kern
from billiard_lab.corridors import candidate_directions
from billiard_lab.dynamics import kernel_pack


def _free(K, c, nrm, v, L):
    # a line is free iff a ray covering one full lattice period hits nothing
    p = c * nrm + 0.3141592 * v
    shift = np.floor(p)
    p = p - shift
    status = kern.cast(K, p[0], p[1], v[0], v[1], -1, 0, 0, L + 2.0)[0]
    return status == kern.NO_COLLISION


def _edge(K, nrm, v, L, a, b, tol=1e-13):
    """Bisect between offsets a (free) and b (blocked)."""
    while abs(b - a) > tol:
        m = 0.5 * (a + b)
        if _free(K, m, nrm, v, L):
            a = m
        else:
            b = m
    return a


def raycast_corridors(table, n_offsets=1024, bound=None):
    """Corridors found by scanning parallel rays: list of (direction, width)."""
    K = kernel_pack(table)
    out = []
    for P, Q in candidate_directions(table, bound=bound):
        L = math.hypot(P, Q)
        per = 1.0 / L
        v = np.array([P, Q]) / L
        nrm = np.array([-Q, P]) / L
        cs = (np.arange(n_offsets) + 0.5) * per / n_offsets
        free = np.array([_free(K, c, nrm, v, L) for c in cs])
        if free.all() or not free.any():
            continue
        start = int(np.flatnonzero(~free)[0])  # rotate so the scan starts blocked
        idx = np.roll(np.arange(n_offsets), -start)
        run = []
        for i in list(idx) + [idx[0]]:
            if free[i]:
                run.append(i)
            elif run:
                step = per / n_offsets
                lo = _edge(K, nrm, v, L, cs[run[0]], cs[run[0]] - step)
                hi = _edge(K, nrm, v, L, cs[run[-1]], cs[run[-1]] + step)
                out.append(((P, Q), (hi - lo) % per))
                run = []
    return sorted(out)
