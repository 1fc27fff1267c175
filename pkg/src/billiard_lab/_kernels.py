"""numba kernels for tables whose arcs are all exact circular arcs.

State of a collision: (arc j, native parameter u, angle phi).  The point is
``C_j + R_j (cos th, sin th)`` with ``th = th0_j - u``, in the coordinates of
the base copy of its scatterer.  Rays are traversed cell by cell through the
unit lattice (Amanatides-Woo); each unit cell has a fixed candidate list of
(scatterer, offset) pairs whose bounding disks meet the cell.

Status codes returned by the casting routines.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

OK = 0
NO_COLLISION = 1
CORNER = 2
GRAZING_START = 3

CORNER_TOL = 1e-11
GRAZING_TOL = 1e-11
TANGENT_TOL = 1e-13
TWO_PI = 2.0 * math.pi
HALF_PI = 0.5 * math.pi


def pack_table(table):
    """Flatten an all-circular table into the tuple of arrays used by the kernels."""
    arcs = table.arcs
    n = len(arcs)
    arc_cx = np.empty(n)
    arc_cy = np.empty(n)
    arc_R = np.empty(n)
    arc_th0 = np.empty(n)
    arc_span = np.empty(n)
    arc_corner = np.zeros(n, dtype=np.bool_)
    arc_sc = np.asarray(table.arc_scatterer, dtype=np.int64)
    arc_a = np.asarray(table.offsets[:-1], dtype=np.float64)
    nsc = len(table.scatterers)
    sc_arc0 = np.empty(nsc, dtype=np.int64)
    sc_arc1 = np.empty(nsc, dtype=np.int64)
    sc_bx = np.empty(nsc)
    sc_by = np.empty(nsc)
    sc_brad = np.empty(nsc)
    # the base copy of every scatterer has its bounding center in [0,1)^2
    k = 0
    for i, sc in enumerate(table.scatterers):
        c, rad = sc.bounding_disk()
        shift = np.floor(c)
        sc_bx[i], sc_by[i] = c - shift
        sc_brad[i] = rad
        sc_arc0[i] = k
        for arc in sc.arcs:
            arc_cx[k] = arc.center[0] - shift[0]
            arc_cy[k] = arc.center[1] - shift[1]
            arc_R[k] = arc.radius
            arc_th0[k] = arc.theta0
            arc_span[k] = arc.span
            arc_corner[k] = len(sc.arcs) > 1
            k += 1
        sc_arc1[i] = k
    cs, cox, coy = [], [], []
    for i in range(nsc):
        for ox in range(-2, 3):
            for oy in range(-2, 3):
                bx, by = sc_bx[i] + ox, sc_by[i] + oy
                qx = min(max(bx, 0.0), 1.0)
                qy = min(max(by, 0.0), 1.0)
                if math.hypot(bx - qx, by - qy) <= sc_brad[i]:
                    cs.append(i)
                    cox.append(ox)
                    coy.append(oy)
    return (arc_cx, arc_cy, arc_R, arc_th0, arc_span, arc_corner, arc_sc, arc_a,
            sc_arc0, sc_arc1, sc_bx, sc_by, sc_brad,
            np.array(cs, dtype=np.int64), np.array(cox, dtype=np.int64),
            np.array(coy, dtype=np.int64))


@njit(cache=True)
def strip_index(phi, k0, kterm):
    """Homogeneity strip of phi; boundaries go to the lower |k| among H_k, k >= k0."""
    psi = HALF_PI - abs(phi)
    if psi > (1.0 + 1e-12) / (k0 * k0):
        return 0
    if psi <= 0.0:
        k = kterm
    else:
        x = 1.0 / math.sqrt(psi)
        c = math.ceil(x - 1e-12 * x)
        k = max(k0, c - 1)
        if k > kterm:
            k = kterm
    return k if phi > 0 else -k


@njit(cache=True)
def point_of(K, j, u):
    arc_cx, arc_cy, arc_R, arc_th0 = K[0], K[1], K[2], K[3]
    th = arc_th0[j] - u
    return arc_cx[j] + arc_R[j] * math.cos(th), arc_cy[j] + arc_R[j] * math.sin(th), th


@njit(cache=True)
def velocity_of(th, phi):
    nx, ny = math.cos(th), math.sin(th)
    tx, ty = ny, -nx
    c, s = math.cos(phi), math.sin(phi)
    return c * nx + s * tx, c * ny + s * ty


@njit(cache=True)
def cast(K, px, py, vx, vy, skip_s, smx, smy, tmax):
    """First scatterer hit along p + t v, t > 0, skipping copy (skip_s, smx, smy).

    Returns (status, arc, u, t, mx, my, corner_side) where corner_side is 0 for a
    regular hit, -1 near the start of the arc and +1 near its end.
    """
    arc_cx, arc_cy, arc_R, arc_th0, arc_span, arc_corner = K[0], K[1], K[2], K[3], K[4], K[5]
    sc_arc0, sc_arc1, sc_bx, sc_by, sc_brad = K[8], K[9], K[10], K[11], K[12]
    cand_s, cand_ox, cand_oy = K[13], K[14], K[15]
    ncand = cand_s.shape[0]
    kx = int(math.floor(px))
    ky = int(math.floor(py))
    stepx = 1 if vx > 0 else -1
    stepy = 1 if vy > 0 else -1
    best_t = np.inf
    best_j = -1
    best_u = 0.0
    best_mx = 0
    best_my = 0
    best_side = 0
    while True:
        if vx > 0:
            tx = (kx + 1 - px) / vx
        elif vx < 0:
            tx = (kx - px) / vx
        else:
            tx = np.inf
        if vy > 0:
            ty = (ky + 1 - py) / vy
        elif vy < 0:
            ty = (ky - py) / vy
        else:
            ty = np.inf
        t_exit = min(tx, ty)
        for c in range(ncand):
            s = cand_s[c]
            mx = kx + cand_ox[c]
            my = ky + cand_oy[c]
            if s == skip_s and mx == smx and my == smy:
                continue
            bx = sc_bx[s] + mx - px
            by = sc_by[s] + my - py
            rad = sc_brad[s]
            proj = bx * vx + by * vy
            if proj < -rad or proj - rad > best_t:
                continue
            if abs(bx * vy - by * vx) > rad:
                continue
            for j in range(sc_arc0[s], sc_arc1[s]):
                wx = arc_cx[j] + mx - px
                wy = arc_cy[j] + my - py
                R = arc_R[j]
                b = wx * vx + wy * vy
                cr = wx * vy - wy * vx
                disc = R * R - cr * cr
                if disc < 0.0:
                    if R - abs(cr) < -TANGENT_TOL:
                        continue
                    disc = 0.0  # tangential touch: a grazing hit
                t = b - math.sqrt(disc)
                if t <= 0.0 or t > best_t:
                    continue
                lx = t * vx - wx
                ly = t * vy - wy
                th = math.atan2(ly, lx)
                u = arc_th0[j] - th
                u -= TWO_PI * math.floor(u / TWO_PI)
                span = arc_span[j]
                tol = CORNER_TOL / R
                if u > span:
                    if TWO_PI - u <= tol:
                        u = u - TWO_PI
                    elif u - span > tol:
                        continue
                side = 0
                if arc_corner[j]:
                    if abs(u) <= tol:
                        side = -1
                    elif abs(span - u) <= tol:
                        side = 1
                u = min(max(u, 0.0), span)
                if t == best_t and side == 0:
                    continue
                best_t = t
                best_j = j
                best_u = u
                best_mx = mx
                best_my = my
                best_side = side
        if best_j >= 0 and best_t <= t_exit:
            break
        if t_exit > tmax:
            return NO_COLLISION, -1, 0.0, t_exit, 0, 0, 0
        if tx < ty:
            kx += stepx
        else:
            ky += stepy
    status = CORNER if best_side != 0 else OK
    return status, best_j, best_u, best_t, best_mx, best_my, best_side


@njit(cache=True)
def reflect_angle(K, j, u, vx, vy):
    th = K[3][j] - u
    nx, ny = math.cos(th), math.sin(th)
    vn = vx * nx + vy * ny
    vt = vx * ny - vy * nx
    return math.atan2(vt, -vn)


@njit(cache=True)
def step(K, j, u, phi, tmax):
    """One application of the billiard map from (j, u, phi).

    Returns (status, j', u', phi', tau, mx, my, corner_side); (mx, my) is the
    lattice translate of the hit copy relative to the start copy.
    """
    if abs(phi) >= HALF_PI - GRAZING_TOL:
        return GRAZING_START, j, u, phi, 0.0, 0, 0, 0
    px, py, th = point_of(K, j, u)
    vx, vy = velocity_of(th, phi)
    s = K[6][j]
    # use integer cell offsets relative to the base copy of the start scatterer
    status, j1, u1, t, mx, my, side = cast(K, px, py, vx, vy, s, 0, 0, tmax)
    if status == NO_COLLISION:
        return status, j, u, phi, t, 0, 0, 0
    phi1 = reflect_angle(K, j1, u1, vx, vy)
    return status, j1, u1, phi1, t, mx, my, side


@njit(cache=True)
def dmap(K, j0, phi0, j1, phi1, tau):
    """d(r1, phi1)/d(r0, phi0) for the circular-arc map."""
    k0 = 1.0 / K[2][j0]
    k1 = 1.0 / K[2][j1]
    c0 = math.cos(phi0)
    c1 = math.cos(phi1)
    a = -(tau * k0 + c0) / c1
    b = -tau / c1
    c = -(tau * k0 * k1 + k0 * c1 + k1 * c0) / c1
    d = -(tau * k1 + c1) / c1
    return a, b, c, d


@njit(cache=True, parallel=True)
def step_batch(K, j, u, phi, tmax, oj, ou, ophi, otau, omx, omy, ostat, oside, oD):
    n = j.shape[0]
    for i in prange(n):
        st, j1, u1, p1, t, mx, my, side = step(K, j[i], u[i], phi[i], tmax)
        oj[i] = j1
        ou[i] = u1
        ophi[i] = p1
        otau[i] = t
        omx[i] = mx
        omy[i] = my
        ostat[i] = st
        oside[i] = side
        if st == OK and abs(p1) < HALF_PI - GRAZING_TOL:
            a, b, c, d = dmap(K, j[i], phi[i], j1, p1, t)
        else:
            a = b = c = d = np.nan
        oD[i, 0] = a
        oD[i, 1] = b
        oD[i, 2] = c
        oD[i, 3] = d


@njit(cache=True, parallel=True)
def segments(K, j0, u0, phi0, nsteps, tmax, out_r, out_phi, out_tau, out_dx, out_dy, out_stat):
    """Orbit segments: row i holds x_0..x_{n-1} and tau(x_l), displacement of flight l.

    ``out_stat[i]`` is OK or the status code of the first failing step (the
    rest of that row is then undefined).
    """
    arc_a, arc_R = K[7], K[2]
    n = j0.shape[0]
    for i in prange(n):
        j = j0[i]
        u = u0[i]
        phi = phi0[i]
        out_stat[i] = OK
        for l in range(nsteps):
            out_r[i, l] = arc_a[j] + arc_R[j] * u
            out_phi[i, l] = phi
            px, py, th = point_of(K, j, u)
            vx, vy = velocity_of(th, phi)
            st, j1, u1, p1, t, mx, my, side = step(K, j, u, phi, tmax)
            if st != OK:
                out_stat[i] = st
                break
            out_tau[i, l] = t
            out_dx[i, l] = t * vx
            out_dy[i, l] = t * vy
            j, u, phi = j1, u1, p1


@njit(cache=True, parallel=True)
def push(K, j0, u0, phi0, wr0, wphi0, m, k0, kterm, tmax,
         o_arc, o_mx, o_my, o_k, o_side, o_us, o_phis, o_exp, o_tau, o_stat):
    """Push points with tangent vectors through m steps, recording symbols.

    o_arc/o_k have shape (n, m+1) (step 0 is the start); o_mx/o_my/o_side/o_tau
    shape (n, m); o_us/o_phis (n, m+1) hold the states x_l;
    o_exp[i, l] = |DF^l w| / |w| (Euclidean norm on (dr, dphi)).
    o_stat[i] is the number of completed steps (m if none failed); corner hits
    show up as a nonzero o_side.  Callers pre-fill the arrays with sentinels.
    """
    n = j0.shape[0]
    for i in prange(n):
        j = j0[i]
        u = u0[i]
        phi = phi0[i]
        wr = wr0[i]
        wp = wphi0[i]
        nw0 = math.hypot(wr, wp)
        o_arc[i, 0] = j
        o_us[i, 0] = u
        o_phis[i, 0] = phi
        o_k[i, 0] = strip_index(phi, k0, kterm)
        o_exp[i, 0] = 1.0
        o_stat[i] = m
        for l in range(m):
            st, j1, u1, p1, t, mx, my, side = step(K, j, u, phi, tmax)
            if st != OK and st != CORNER:
                o_stat[i] = l
                break
            o_mx[i, l] = mx
            o_my[i, l] = my
            o_side[i, l] = side
            o_tau[i, l] = t
            if abs(p1) < HALF_PI - GRAZING_TOL:
                a, b, c, d = dmap(K, j, phi, j1, p1, t)
                wr, wp = a * wr + b * wp, c * wr + d * wp
            else:
                wr, wp = np.inf, np.inf
            j, u, phi = j1, u1, p1
            o_arc[i, l + 1] = j
            o_us[i, l + 1] = u
            o_phis[i, l + 1] = phi
            o_k[i, l + 1] = strip_index(phi, k0, kterm)
            o_exp[i, l + 1] = math.hypot(wr, wp) / nw0


@njit(cache=True, parallel=True)
def orbit_records(K, j0, u0, phi0, nsteps, tmax, o_arc, o_u, o_phi, o_tau, o_mx, o_my, o_stat):
    """Like ``segments`` but keeps the arc, parameter and lattice jump of every step.

    Row i, column l describes x_l and its flight; o_stat[i] is the index of the
    first failing step (nsteps if none).
    """
    n = j0.shape[0]
    for i in prange(n):
        j = j0[i]
        u = u0[i]
        phi = phi0[i]
        o_stat[i] = nsteps
        for l in range(nsteps):
            o_arc[i, l] = j
            o_u[i, l] = u
            o_phi[i, l] = phi
            st, j1, u1, p1, t, mx, my, side = step(K, j, u, phi, tmax)
            if st != OK:
                o_stat[i] = l
                break
            o_tau[i, l] = t
            o_mx[i, l] = mx
            o_my[i, l] = my
            j, u, phi = j1, u1, p1
