"""Homogeneity strips, corridor cells, unstable-curve fragmentation and Z_q.

Everything that pushes curves or probes cells runs on the numba kernels, so it
needs a table made of exact circular arcs.  Points in phase space are (r, phi)
with r the clockwise arclength; tangent vectors are measured with the Euclidean
norm on (dr, dphi).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as kern
from .corridors import boundary_set, find_corridors
from .dynamics import (CollisionPoint, CornerHit, NoCollision, billiard_map, kernel_pack,
                       map_batch, point_and_velocity, sample_arrays, _rng, HALF_PI, T_MAX)
from .geometry import TWO_PI, BilliardTable

K0 = 10
KTERM = 10_001          # |k| > 1e4 is one terminal band
CUT_TOL = 1e-12         # bisection resolution in curve parameter
MIN_SAMPLES = 32
MIN_LENGTH = 1e-10
LENGTH_FLOOR = 1e-12    # image pieces shorter than this have roundoff-level length
CELL_DIAMETER = math.sqrt(2.0)


class CellEmpty(RuntimeError):
    pass


class DichotomyViolated(RuntimeError):
    def __init__(self, msg, orbit):
        super().__init__(msg)
        self.orbit = orbit


class UnresolvedFragmentation(RuntimeError):
    def __init__(self, budget):
        super().__init__(f"refinement budget of {budget} samples exceeded")
        self.budget = budget


def long_flight_threshold(table: BilliardTable | None = None) -> float:
    """Default tau-bar: five diameters of the unit cell."""
    return 5.0 * CELL_DIAMETER


# ---------------------------------------------------------------- strips

@dataclass(frozen=True)
class HomogeneityIndex:
    k: int
    k0: int = K0


def strip_indices(phi, k0: int = K0, kterm: int | None = None) -> np.ndarray:
    """Vectorized strip index; strip boundaries go to the lower |k|."""
    phi = np.asarray(phi, dtype=float)
    psi = HALF_PI - np.abs(phi)
    big = np.iinfo(np.int64).max // 2 if kterm is None else kterm
    with np.errstate(divide="ignore", invalid="ignore"):
        x = 1.0 / np.sqrt(np.where(psi > 0, psi, 1.0))
        c = np.ceil(x - 1e-12 * x)
    k = np.maximum(k0, c - 1)
    k = np.minimum(k, float(big))
    k = np.where(psi <= 0, float(big), k)
    k = np.where(psi > (1.0 + 1e-12) / (k0 * k0), 0.0, k).astype(np.int64)
    return np.where(phi > 0, k, -k)


def homogeneity_index(x, k0: int = K0) -> HomogeneityIndex:
    phi = x.phi if isinstance(x, CollisionPoint) else float(x)
    if abs(phi) > HALF_PI:
        raise ValueError("phi outside [-pi/2, pi/2]")
    return HomogeneityIndex(int(strip_indices(phi, k0)), k0)


# ---------------------------------------------------------------- cells

@dataclass(frozen=True)
class CellIndex:
    h: int
    n: int
    family: str      # "D" (regular x_h) or "E" (corner x_h)


def _bounding_fractions(table):
    out = np.empty((len(table.scatterers), 2))
    for i, sc in enumerate(table.scatterers):
        c, _ = sc.bounding_disk()
        out[i] = c - np.floor(c)
    return out


class _CellData:
    """Corridor geometry flattened for vectorized flight classification."""

    def __init__(self, table):
        self.bfrac = _bounding_fractions(table)
        self.corridors = [c for c in find_corridors(table) if not c.incipient]
        self.lookup = {}
        self.tags = {}
        for ci, c in enumerate(self.corridors):
            for hid, b in zip(c.ids, c.boundary_points):
                self.lookup[(ci, b.side, b.velocity)] = hid
                self.tags[hid] = b.tag

    def classify(self, px, py, vx, vy, tau, s0, s1, mx, my, tau_bar, max_angle=0.3):
        """(h, n) arrays; h = -1 where the flight is short or outside every corridor."""
        n_pts = len(px)
        h = np.full(n_pts, -1, dtype=np.int64)
        nn = np.zeros(n_pts, dtype=np.int64)
        if not self.corridors:
            return h, nn
        best_sin = np.full(n_pts, np.inf)
        best_dist = np.full(n_pts, np.inf)
        best_c = np.full(n_pts, -1, dtype=np.int64)
        midx = px + 0.5 * tau * vx
        midy = py + 0.5 * tau * vy
        for ci, c in enumerate(self.corridors):
            vh, nh = c.v, c.normal
            sn = np.abs(vx * vh[1] - vy * vh[0])
            cm = np.mod(midx * nh[0] + midy * nh[1] - c.offset, c.period)
            dist = np.where(cm <= c.width, 0.0, np.minimum(cm - c.width, c.period - cm))
            better = (sn < best_sin - 1e-9) | ((np.abs(sn - best_sin) <= 1e-9) & (dist < best_dist))
            best_sin = np.where(better, sn, best_sin)
            best_dist = np.where(better, dist, best_dist)
            best_c = np.where(better, ci, best_c)
        ok = (tau >= tau_bar) & (best_sin <= math.sin(max_angle))
        for ci, c in enumerate(self.corridors):
            sel = ok & (best_c == ci)
            if not sel.any():
                continue
            vh, nh = c.v, c.normal
            L = math.hypot(*c.direction)
            vs = np.where(vx * vh[0] + vy * vh[1] > 0, 1, -1)
            up = vx * nh[0] + vy * nh[1] > 0
            dx = self.bfrac[s1, 0] + mx - self.bfrac[s0, 0]
            dy = self.bfrac[s1, 1] + my - self.bfrac[s0, 1]
            cnt = np.floor(vs * (dx * vh[0] + dy * vh[1]) / L + 1e-6).astype(np.int64)
            for side, upflag in (("lower", True), ("upper", False)):
                for vel in (1, -1):
                    hid = self.lookup.get((ci, side, vel))
                    if hid is None:
                        continue
                    m = sel & (up == upflag) & (vs == vel) & (cnt >= 1)
                    h[m] = hid
                    nn[m] = cnt[m]
        return h, nn


def _cell_data(table) -> _CellData:
    cd = getattr(table, "_celldata", None)
    if cd is None:
        cd = _CellData(table)
        object.__setattr__(table, "_celldata", cd)
    return cd


def _family(cd, h):
    return "E" if cd.tags.get(int(h)) == "corner" else "D"


def cell_index(table: BilliardTable, x: CollisionPoint, tau_bar: float | None = None):
    """CellIndex of x if its free flight is a long flight in a corridor, else None."""
    tau_bar = long_flight_threshold(table) if tau_bar is None else tau_bar
    try:
        ev = billiard_map(table, x)
    except CornerHit as exc:
        ev = exc.event
    except NoCollision:
        return None
    if ev.tau < tau_bar:
        return None
    p, v, _ = point_and_velocity(table, x)
    cd = _cell_data(table)
    mx, my = ev.lattice_jump
    h, n = cd.classify(np.array([p[0]]), np.array([p[1]]), np.array([v[0]]), np.array([v[1]]),
                       np.array([ev.tau]), np.array([x.scatterer]), np.array([ev.next.scatterer]),
                       np.array([mx]), np.array([my]), tau_bar)
    if h[0] < 0:
        return None
    return CellIndex(int(h[0]), int(n[0]), _family(cd, h[0]))


def _kernel_frame(K, arc, u, phi):
    th = K[3][arc] - u
    c, s = np.cos(th), np.sin(th)
    px = K[0][arc] + K[2][arc] * c
    py = K[1][arc] + K[2][arc] * s
    cp, sp = np.cos(phi), np.sin(phi)
    vx = cp * c + sp * s
    vy = cp * s - sp * c
    return px, py, vx, vy


def cell_labels(table: BilliardTable, arc, u, phi, res: dict | None = None, tau_bar=None):
    """Vectorized cell_index on (arc, u, phi) arrays: (h, n), h = -1 for none."""
    tau_bar = long_flight_threshold(table) if tau_bar is None else tau_bar
    K = kernel_pack(table)
    if res is None:
        res = map_batch(table, arc, u, phi)
    px, py, vx, vy = _kernel_frame(K, np.asarray(arc), np.asarray(u), np.asarray(phi))
    tau = np.where(res["status"] == kern.NO_COLLISION, 0.0, res["tau"])
    bad = (res["status"] == kern.NO_COLLISION) | (res["status"] == kern.GRAZING_START)
    h, n = _cell_data(table).classify(px, py, vx, vy, tau, K[6][np.asarray(arc)], K[6][res["arc"]],
                                      res["mx"], res["my"], tau_bar)
    h[bad] = -1
    return h, n


# ---------------------------------------------------------------- cell probing

def _first_true(pred, a, b, rtol=1e-13, atol=0.0, grid=33, max_rounds=200):
    """Row-wise boundary of monotone predicates; pred(X) maps (m, grid) -> bool."""
    a = np.array(a, dtype=float)
    b = np.array(b, dtype=float)
    rows = np.arange(len(a))
    lin = np.linspace(0.0, 1.0, grid)
    for _ in range(max_rounds):
        width = b - a
        if np.all(width <= np.maximum(rtol * np.abs(b), atol)):
            break
        xs = a[:, None] + width[:, None] * lin
        ok = pred(xs)
        ok[:, 0] = False
        ok[:, -1] = True
        i = np.argmax(ok, axis=1)
        a, b = xs[rows, i - 1], xs[rows, i]
    return a, b


class _Chart:
    """Chart (dr, alpha) around a boundary point h of A.

    dr is arclength along the arc of x_h, alpha the angle of the outgoing
    direction from +-v_H towards the corridor interior.
    """

    def __init__(self, table, h):
        self.table = table
        self.K = kernel_pack(table)
        pairs = boundary_set(table)
        if not 0 <= h < len(pairs):
            raise IndexError(f"no boundary point {h}")
        self.h = h
        self.corr, self.bp = pairs[h]
        b = self.bp
        self.j = b.arc
        self.R = float(self.K[2][self.j])
        self.kappa = 1.0 / self.R
        self.th0 = float(self.K[3][self.j])
        self.span = float(self.K[4][self.j])
        self.full = self.span >= 2 * math.pi - 1e-12
        self.u_h = float(b.u)
        self.vel = b.velocity * self.corr.v
        self.nu = self.corr.normal * (1.0 if b.side == "lower" else -1.0)
        self.L = math.hypot(*self.corr.direction)
        self.w = self.corr.width
        if b.tag == "corner":
            self.signs = (1,) if self.u_h < 0.5 * self.span else (-1,)
        else:
            self.signs = (1, -1)
        self.family = "E" if b.tag == "corner" else "D"
        self.bfrac = _bounding_fractions(table)

    def to_state(self, dr, alpha):
        dr = np.asarray(dr, dtype=float)
        alpha = np.asarray(alpha, dtype=float)
        u = self.u_h + dr / self.R
        valid = np.ones(np.broadcast(dr, alpha).shape, dtype=bool)
        if self.full:
            u = np.mod(u, 2 * math.pi)
        else:
            valid &= (u >= 0.0) & (u <= self.span)
        th = self.th0 - u
        c, s = np.cos(th), np.sin(th)
        ca, sa = np.cos(alpha), np.sin(alpha)
        vx = ca * self.vel[0] + sa * self.nu[0]
        vy = ca * self.vel[1] + sa * self.nu[1]
        vn = vx * c + vy * s
        vt = vx * s - vy * c
        phi = np.arctan2(vt, vn)
        valid &= vn > 0
        u, phi = np.broadcast_arrays(u, phi)
        return u, phi, valid

    def r_of_u(self, u):
        return self.K[7][self.j] + self.R * u

    def labels_state(self, u, phi):
        """Copies passed by flights that cross the corridor; inf if they do not."""
        u = np.asarray(u, dtype=float)
        phi = np.asarray(phi, dtype=float)
        shape = np.broadcast(u, phi).shape
        u, phi = (np.broadcast_to(a, shape).ravel() for a in (u, phi))
        arc = np.full(u.shape, self.j, dtype=np.int64)
        res = map_batch(self.table, arc, u, phi)
        px, py, vx, vy = _kernel_frame(self.K, arc, u, phi)
        s0 = self.K[6][self.j]
        s1 = self.K[6][res["arc"]]
        dx = self.bfrac[s1, 0] + res["mx"] - self.bfrac[s0, 0]
        dy = self.bfrac[s1, 1] + res["my"] - self.bfrac[s0, 1]
        n = np.floor((dx * self.vel[0] + dy * self.vel[1]) / self.L + 1e-6)
        crossed = res["tau"] * (vx * self.nu[0] + vy * self.nu[1]) > 0.5 * self.w
        g = np.where((res["status"] == kern.NO_COLLISION) | ~crossed, np.inf, n)
        g[res["status"] == kern.GRAZING_START] = np.nan
        return g.reshape(shape), res

    def labels(self, dr, alpha):
        u, phi, valid = self.to_state(dr, alpha)
        g, _ = self.labels_state(u, phi)
        return np.where(valid, g, np.nan)

    def threshold(self, dr, thr):
        """inf{alpha > 0 : label(dr, alpha) <= thr} per row; nan if not bracketed."""
        dr = np.atleast_1d(np.asarray(dr, dtype=float))
        b = np.full(dr.shape, 2.0 * (self.w + 0.05) / (max(thr, 0.5) * self.L))
        fail = np.zeros(dr.shape, dtype=bool)
        for _ in range(60):
            need = ~(self.labels(dr, b) <= thr) & ~fail
            if not need.any():
                break
            b[need] *= 2.0
            fail |= b >= HALF_PI
            b = np.minimum(b, HALF_PI)
        a = np.zeros_like(b)
        lo, hi = _first_true(lambda X: self.labels(dr[:, None], X) <= thr, a, b)
        out = 0.5 * (lo + hi)
        out[fail] = np.nan
        return out

    def bands(self, dr, n):
        lo = self.threshold(dr, n)
        hi = self.threshold(dr, n - 1)
        ok = np.isfinite(lo) & np.isfinite(hi) & (hi > lo * (1 + 1e-10))
        return lo, hi, ok

    def dr_limit(self, n, sign):
        """Largest |dr| (in direction sign) where the band of label n is nonempty."""
        limit = self.span * self.R if not self.full else 0.5 * math.pi * self.R
        d = 1e-3
        while d < limit:
            if not self.bands(np.array([sign * d]), n)[2][0]:
                break
            d *= 2.0
        d = min(d, limit)
        lo_d, hi_d = 0.0, d
        for _ in range(4):
            xs = np.linspace(lo_d, hi_d, 33)
            ne = self.bands(sign * xs, n)[2]
            ne[0] = True
            i = len(xs) - 1 - int(np.argmax(ne[::-1]))
            if i == len(xs) - 1:
                return hi_d
            lo_d, hi_d = xs[i], xs[i + 1]
        return lo_d


@dataclass
class CellProbe:
    h: int
    family: str
    records: list
    slope_unstable: float
    slope_stable: float
    expansion: np.ndarray      # rows (n, k, expansion, expansion / (n k^2))

    @property
    def ratio_spread(self) -> float:
        sel = self.expansion[np.abs(self.expansion[:, 1]) > 0]
        if len(sel) == 0:
            return math.nan
        return float(sel[:, 3].max() / sel[:, 3].min())

    def to_dict(self) -> dict:
        sel = self.expansion[np.abs(self.expansion[:, 1]) > 0]
        return {"h": self.h, "family": self.family, "slope_unstable": self.slope_unstable,
                "slope_stable": self.slope_stable, "records": self.records,
                "expansion_ratio_min": float(sel[:, 3].min()) if len(sel) else None,
                "expansion_ratio_max": float(sel[:, 3].max()) if len(sel) else None}


def _probe_one(ch: _Chart, n: int, k0: int):
    lo0, hi0, ok0 = ch.bands(np.array([0.0]), n)
    if not ok0[0]:
        raise CellEmpty(f"cell (h={ch.h}, n={n}) is empty at the boundary point")
    lims = {s: ch.dr_limit(n, s) for s in ch.signs}
    dmin = -lims.get(-1, 0.0)
    dmax = lims.get(1, 0.0)
    t = 0.5 - 0.5 * np.cos(np.linspace(0.0, math.pi, 65))
    drs = dmin + (dmax - dmin) * t
    lo, hi, ok = ch.bands(drs, n)
    drs, lo, hi = drs[ok], lo[ok], hi[ok]
    if len(drs) < 3:
        raise CellEmpty(f"cell (h={ch.h}, n={n}) could not be resolved")
    u, phi, _ = ch.to_state(drs, 0.5 * (lo + hi))
    r = ch.r_of_u(u)
    if ch.full:
        r = ch.K[7][ch.j] + ch.R * (ch.u_h + drs / ch.R)
    stable = float(np.sum(np.hypot(np.diff(r), np.diff(phi))))
    # unstable extent through the thickest point, along (1, kappa)
    c = int(np.argmax(hi - lo))
    uc, pc, _ = ch.to_state(drs[c], 0.5 * (lo[c] + hi[c]))
    e = np.array([1.0, ch.kappa]) / math.hypot(1.0, ch.kappa)

    def outside(sign, S):
        uu = uc + sign[:, None] * S * e[0] / ch.R
        pp = pc + sign[:, None] * S * e[1]
        g, _ = ch.labels_state(uu, pp)
        return ~(g == n)

    signs = np.array([1.0, -1.0])
    S = np.full(2, 4.0 * (hi[c] - lo[c]))
    for _ in range(60):
        out = outside(signs, S[:, None])[:, 0]
        if out.all():
            break
        S[~out] *= 2.0
    a, b = _first_true(lambda X: outside(signs, X), np.zeros(2), S, rtol=1e-10)
    unstable = float(np.sum(0.5 * (a + b)))
    # expansion of the flat front (1, kappa) on samples inside the cell
    sub = np.linspace(0, len(drs) - 1, 9).round().astype(int)
    fr = np.array([1e-9, 1e-7, 1e-5, 1e-3, 0.01, 0.05, 0.2, 0.5, 0.8, 0.95, 0.99,
                   1 - 1e-3, 1 - 1e-5, 1 - 1e-7, 1 - 1e-9])
    al = lo[sub, None] + (hi[sub] - lo[sub])[:, None] * fr
    us, ps, valid = ch.to_state(drs[sub, None], al)
    us, ps, valid = us.ravel(), ps.ravel(), valid.ravel()
    g, res = ch.labels_state(us, ps)
    inside = valid & (g == n) & (res["status"] == kern.OK)
    D = res["D"][inside]
    wr, wp = 1.0, ch.kappa
    ex = np.hypot(D[:, 0] * wr + D[:, 1] * wp, D[:, 2] * wr + D[:, 3] * wp) / math.hypot(wr, wp)
    ks = strip_indices(res["phi"][inside], k0)
    kk = np.abs(ks).astype(float)
    ratio = np.where(kk > 0, ex / (n * np.maximum(kk, 1.0) ** 2), np.nan)
    rows = np.column_stack([np.full(len(ex), n), ks, ex, ratio])
    rec = {"n": int(n), "unstable_extent": unstable, "stable_extent": stable,
           "min_expansion": float(ex.min()) if len(ex) else math.nan,
           "dr_min": float(dmin), "dr_max": float(dmax),
           "alpha_lo": float(lo[c]), "alpha_hi": float(hi[c])}
    return rec, rows


def default_n_range(lo=10, hi=200, num=12):
    return sorted(set(np.unique(np.round(np.geomspace(lo, hi, num)).astype(int)).tolist()))


def probe_cell_geometry(table: BilliardTable, h: int, n_range=None, k0: int = K0) -> CellProbe:
    """Measure the cells of h along n: extents and expansion, with log-log slopes."""
    ch = _Chart(table, h)
    n_range = default_n_range() if n_range is None else list(n_range)
    recs, rows = [], []
    for n in n_range:
        rec, r = _probe_one(ch, int(n), k0)
        recs.append(rec)
        rows.append(r)
    ns = np.log([r["n"] for r in recs])
    su = np.polyfit(ns, np.log([r["unstable_extent"] for r in recs]), 1)[0]
    ss = np.polyfit(ns, np.log([r["stable_extent"] for r in recs]), 1)[0]
    return CellProbe(h, ch.family, recs, float(su), float(ss), np.vstack(rows))


def boundary_point_ids(table: BilliardTable, tag: str | None = None) -> list[int]:
    return [i for i, (_, b) in enumerate(boundary_set(table)) if tag is None or b.tag == tag]


# ---------------------------------------------------------------- long flights

@dataclass
class _ChartBox:
    chart: "_Chart"
    dmin: float
    dmax: float
    amax: float
    cmax: float

    @property
    def weight(self) -> float:
        return (self.dmax - self.dmin) * self.amax * self.cmax

    def contains(self, arc, r, phi):
        ch = self.chart
        K = ch.K
        dr = r - ch.r_of_u(ch.u_h)
        if ch.full:
            period = 2 * math.pi * ch.R
            dr = np.mod(dr + 0.5 * period, period) - 0.5 * period
        u = ch.u_h + dr / ch.R
        px, py, vx, vy = _kernel_frame(K, np.full(len(r), ch.j), u, phi)
        al = np.arctan2(vx * ch.nu[0] + vy * ch.nu[1], vx * ch.vel[0] + vy * ch.vel[1])
        return (arc == ch.j) & (dr >= self.dmin) & (dr <= self.dmax) & (al >= 0) & (al <= self.amax)


def long_flight_boxes(table: BilliardTable, tau_lo: float = 50.0, margin: float = 1.3):
    """Chart boxes around every point of A that contain all flights longer than tau_lo."""
    boxes = []
    for h in range(len(boundary_set(table))):
        ch = _Chart(table, h)
        n_min = max(2, int(tau_lo / ch.L) - 3)
        lims = {s: margin * ch.dr_limit(n_min, s) for s in ch.signs}
        dmin, dmax = -lims.get(-1, 0.0), lims.get(1, 0.0)
        drs = np.linspace(dmin, dmax, 33)
        hi = ch.threshold(drs, n_min - 1)
        amax = margin * float(np.nanmax(hi)) + 1e-4
        g_dr, g_al = np.meshgrid(np.linspace(dmin, dmax, 17), np.linspace(0, amax, 17))
        _, phi, valid = ch.to_state(g_dr, g_al)
        cmax = min(1.0, float(np.max(np.cos(phi)[valid])) + 0.02)
        boxes.append(_ChartBox(ch, dmin, dmax, amax, cmax))
    return boxes


def sample_long_flights(table: BilliardTable, n: int, tau_range=(50.0, 500.0), seed=0,
                        batch: int = 100_000, max_batches: int = 2000):
    """mu-distributed points conditioned on tau(x) in tau_range.

    Long flights start close to the boundary set A.  Draws are uniform in
    (dr, alpha) chart boxes around its points, thinned by cos(phi) (the chart
    has unit Jacobian, so this is mu) and by box overlaps, then filtered by
    the computed flight time.  Returns (arc, u, phi, tau).
    """
    rng = _rng(seed)
    K = kernel_pack(table)
    boxes = long_flight_boxes(table, tau_range[0])
    if not boxes:
        raise ValueError("table has no corridors; flights are bounded")
    wts = np.array([b.weight for b in boxes])
    prob = wts / wts.sum()
    got = {k: [] for k in ("arc", "u", "phi", "tau")}
    count = 0
    for _ in range(max_batches):
        which = rng.choice(len(boxes), size=batch, p=prob)
        x1, x2, x3 = rng.random(batch), rng.random(batch), rng.random(batch)
        arc = np.empty(batch, dtype=np.int64)
        u = np.empty(batch)
        phi = np.empty(batch)
        keep = np.empty(batch, dtype=bool)
        for i, b in enumerate(boxes):
            m = which == i
            dr = b.dmin + (b.dmax - b.dmin) * x1[m]
            al = b.amax * x2[m]
            uu, pp, valid = b.chart.to_state(dr, al)
            arc[m] = b.chart.j
            u[m] = uu
            phi[m] = pp
            keep[m] = valid & (x3[m] * b.cmax < np.cos(pp))
        r = K[7][arc] + K[2][arc] * u
        mult = np.zeros(batch)
        for b in boxes:
            mult += b.contains(arc, r, phi)
        keep &= rng.random(batch) * np.maximum(mult, 1) < 1.0
        keep &= np.abs(phi) < HALF_PI - 1e-9
        arc, u, phi = arc[keep], u[keep], phi[keep]
        res = map_batch(table, arc, u, phi)
        sel = (res["status"] == kern.OK) & (res["tau"] >= tau_range[0]) & (res["tau"] <= tau_range[1])
        for k, v in (("arc", arc), ("u", u), ("phi", phi), ("tau", res["tau"])):
            got[k].append(v[sel])
        count += int(sel.sum())
        if count >= n:
            break
    else:
        raise RuntimeError("long-flight sampler did not collect enough points")
    return tuple(np.concatenate(got[k])[:n] for k in ("arc", "u", "phi", "tau"))


@dataclass(frozen=True)
class FlightGrowthConstants:
    C: float
    t0: float
    t1: float


@dataclass(frozen=True)
class FlightGrowthResult:
    case: int
    ratios: dict


def _three_flights(table, arc, u, phi):
    K = kernel_pack(table)
    n = len(arc)
    shape = (n, 3)
    o = [np.zeros(shape, dtype=np.int64), np.zeros(shape), np.zeros(shape), np.full(shape, np.nan),
         np.zeros(shape, dtype=np.int64), np.zeros(shape, dtype=np.int64)]
    stat = np.zeros(n, dtype=np.int64)
    kern.orbit_records(K, np.ascontiguousarray(arc, dtype=np.int64), np.ascontiguousarray(u, dtype=float),
                       np.ascontiguousarray(phi, dtype=float), 3, T_MAX, *o, stat)
    return o[3], stat


def _needs(tau, t1, t2, t0):
    n1 = np.maximum(np.sqrt(tau) / t1, t1 / tau**2)
    n2 = np.maximum(np.sqrt(tau) / t2, t2 / tau**2)
    n2 = np.where(t1 < t0, n2, np.inf)
    return n1, n2


def fit_flight_growth(table: BilliardTable, n_train: int = 2000, seed: int = 0, margin: float = 1.5,
                      t0: float | None = None, tau_range=(50.0, 500.0)) -> FlightGrowthConstants:
    """Fit (C, t0, t1) of the long-flight dichotomy on a training sample."""
    t0 = long_flight_threshold(table) if t0 is None else t0
    arc, u, phi, _ = sample_long_flights(table, n_train, tau_range, seed)
    taus, stat = _three_flights(table, arc, u, phi)
    ok = stat >= 2
    n1, n2 = _needs(taus[ok, 0], taus[ok, 1], taus[ok, 2], t0)
    need = np.minimum(n1, np.nan_to_num(n2, nan=np.inf))
    worst = int(np.argmax(need))
    if not np.isfinite(need[worst]):
        raise DichotomyViolated("no finite C fits the training sample", taus[ok][worst])
    return FlightGrowthConstants(float(margin * max(need.max(), 1.0)), float(t0), float(tau_range[0]))


def _classify_growth(tau, t1, t2, const: FlightGrowthConstants):
    n1, n2 = _needs(tau, t1, t2, const.t0)
    case = np.where(n1 <= const.C, 1, np.where(np.nan_to_num(n2, nan=np.inf) <= const.C, 2, 0))
    return case


def flight_growth_check(table: BilliardTable, x: CollisionPoint,
                        const: FlightGrowthConstants) -> FlightGrowthResult:
    """Which branch of the long-flight dichotomy x follows; raises if neither."""
    K = kernel_pack(table)
    u = (x.r - K[7][x.arc]) / K[2][x.arc]
    taus, stat = _three_flights(table, np.array([x.arc]), np.array([u]), np.array([x.phi]))
    tau, t1, t2 = taus[0]
    if tau <= const.t1:
        raise ValueError(f"tau(x) = {tau:.4g} is not above t1 = {const.t1:.4g}")
    case = int(_classify_growth(np.array([tau]), np.array([t1]), np.array([t2]), const)[0])
    ratios = {"tau": float(tau), "tau1": float(t1), "tau2": float(t2),
              "tau1_over_sqrt_tau": float(t1 / math.sqrt(tau)), "tau1_over_tau2": float(t1 / tau**2),
              "tau2_over_sqrt_tau": float(t2 / math.sqrt(tau)), "tau2_over_tau2": float(t2 / tau**2)}
    if case == 0:
        raise DichotomyViolated("flight-growth dichotomy fails", (x, taus[0]))
    return FlightGrowthResult(case, ratios)


def flight_growth_validate(table: BilliardTable, const: FlightGrowthConstants, n: int = 10_000,
                           seed: int = 1, tau_range=(50.0, 500.0)) -> dict:
    """Fresh-sample validation: fraction of long flights obeying the dichotomy."""
    arc, u, phi, _ = sample_long_flights(table, n, tau_range, seed)
    taus, stat = _three_flights(table, arc, u, phi)
    case = _classify_growth(taus[:, 0], taus[:, 1], taus[:, 2], const)
    case[stat < 2] = 0
    bad = np.flatnonzero(case == 0)
    return {"n": int(n), "fraction_ok": float(np.mean(case > 0)), "case1": int(np.sum(case == 1)),
            "case2": int(np.sum(case == 2)), "violations": bad.tolist(),
            "C": const.C, "t0": const.t0, "t1": const.t1}


# ---------------------------------------------------------------- standard pairs

@dataclass
class StandardPair:
    """A curve in (r, phi) on one arc, given by polyline nodes, with a density.

    rho holds the density at the nodes with respect to arclength (linear in
    between), normalized to total mass one.
    """

    arc: int
    r: np.ndarray
    phi: np.ndarray
    rho: np.ndarray = None

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        t = self.t
        if not t[-1] > 0:
            raise ValueError("a standard pair needs a curve of positive length")
        if self.rho is None:
            self.rho = np.full(len(self.r), 1.0 / t[-1])
        else:
            rho = np.asarray(self.rho, dtype=float)
            self.rho = rho / np.trapezoid(rho, t)

    @classmethod
    def segment(cls, arc, r0, phi0, r1, phi1) -> "StandardPair":
        return cls(int(arc), np.array([r0, r1]), np.array([phi0, phi1]))

    @property
    def t(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(self.r), np.diff(self.phi)))])

    @property
    def length(self) -> float:
        return float(self.t[-1])

    @property
    def log_density(self) -> np.ndarray:
        return np.log(self.rho)

    def at(self, s):
        """Points and unit tangents at parameters s in [0, 1] (proportional to arclength)."""
        t = self.t
        x = np.asarray(s, dtype=float) * t[-1]
        i = np.clip(np.searchsorted(t, x, side="right") - 1, 0, len(t) - 2)
        seg = t[i + 1] - t[i]
        f = np.where(seg > 0, (x - t[i]) / np.where(seg > 0, seg, 1.0), 0.0)
        r = self.r[i] + f * (self.r[i + 1] - self.r[i])
        phi = self.phi[i] + f * (self.phi[i + 1] - self.phi[i])
        dr = (self.r[i + 1] - self.r[i]) / np.where(seg > 0, seg, 1.0)
        dp = (self.phi[i + 1] - self.phi[i]) / np.where(seg > 0, seg, 1.0)
        return r, phi, dr, dp

    def density_at(self, s):
        return np.interp(np.asarray(s) * self.length, self.t, self.rho)

    def regularity_constant(self, max_nodes: int = 400) -> float:
        """Smallest C0 with |log rho(x) - log rho(y)| <= C0 |W(x,y)| / |W|^(2/3) on the nodes."""
        t, lr = self.t, self.log_density
        if len(t) > max_nodes:
            idx = np.unique(np.linspace(0, len(t) - 1, max_nodes).round().astype(int))
            t, lr = t[idx], lr[idx]
        dt = np.abs(t[:, None] - t[None, :])
        dl = np.abs(lr[:, None] - lr[None, :])
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(dt > 0, dl / dt, 0.0)
        return float(q.max() * self.length ** (2.0 / 3.0))


@dataclass
class StandardFamily:
    pairs: list          # (StandardPair, weight)

    @property
    def total_weight(self) -> float:
        return float(sum(w for _, w in self.pairs))

    def scaled(self, s: float) -> "StandardFamily":
        """Every curve stretched by s in (r, phi) about its first node."""
        out = []
        for p, w in self.pairs:
            out.append((StandardPair(p.arc, p.r[0] + s * (p.r - p.r[0]),
                                     p.phi[0] + s * (p.phi - p.phi[0]), p.rho / s), w))
        return StandardFamily(out)


def z_q(family: StandardFamily, q: float) -> float:
    """sup over eps of nu(r_G < eps) / eps^q, exact for piecewise-linear densities.

    The mass within eps of the curve ends is piecewise quadratic in eps; its
    derivative is assembled from linear pieces by an event sweep, and the ratio
    is maximized on every piece in closed form.
    """
    if not 0.0 < q <= 1.0:
        raise ValueError("q must lie in (0, 1]")
    d0, d1, al, be = [], [], [], []
    for pair, w in family.pairs:
        if w <= 0:
            continue
        t, rho = pair.t, pair.rho
        ell = t[-1]
        half = 0.5 * ell
        ta, tb = t[:-1], t[1:]
        ra, rb = rho[:-1], rho[1:]
        seg = tb - ta
        ok = seg > 0
        ta, tb, ra, rb, seg = ta[ok], tb[ok], ra[ok], rb[ok], seg[ok]
        slope = (rb - ra) / seg
        # from the start: rho(d), d in [ta, tb]
        lo, hi = ta, np.minimum(tb, half)
        m = hi > lo
        d0.append(lo[m]); d1.append(hi[m])
        al.append(w * (ra - slope * ta)[m]); be.append(w * slope[m])
        # from the end: rho(ell - d), d in [ell - tb, ell - ta]
        lo, hi = ell - tb, np.minimum(ell - ta, half)
        m = hi > lo
        d0.append(lo[m]); d1.append(hi[m])
        al.append(w * (ra + slope * (ell - ta))[m]); be.append(-w * slope[m])
    if not d0:
        return 0.0
    d0, d1, al, be = (np.concatenate(x) for x in (d0, d1, al, be))
    e = np.unique(np.concatenate([[0.0], d0, d1]))
    da = np.zeros(len(e))
    db = np.zeros(len(e))
    i0 = np.searchsorted(e, d0)
    i1 = np.searchsorted(e, d1)
    np.add.at(da, i0, al)
    np.add.at(db, i0, be)
    np.add.at(da, i1, -al)
    np.add.at(db, i1, -be)
    a = np.cumsum(da)[:-1]          # G'(eps) = a + b eps on [e_k, e_k+1]
    b = np.cumsum(db)[:-1]
    ek, ek1 = e[:-1], e[1:]
    inc = a * (ek1 - ek) + 0.5 * b * (ek1**2 - ek**2)
    G = np.concatenate([[0.0], np.cumsum(inc)])
    A = G[:-1] - a * ek - 0.5 * b * ek**2
    B, C = a, 0.5 * b
    best = float(np.max(G[1:] / e[1:] ** q))
    if q == 1.0:
        best = max(best, float(a[0]))
    # interior stationary points of (A + B e + C e^2) / e^q
    qa, qb, qc = (2 - q) * C, (1 - q) * B, -q * A
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = qb * qb - 4 * qa * qc
        sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
        lin = np.abs(qa) < 1e-300
        roots = [np.where(lin, -qc / qb, (-qb + sq) / (2 * qa)),
                 np.where(lin, np.nan, (-qb - sq) / (2 * qa))]
    for rt in roots:
        m = np.isfinite(rt) & (rt > ek) & (rt < ek1)
        if m.any():
            x = rt[m]
            val = (A[m] + B[m] * x + C[m] * x * x) / x**q
            best = max(best, float(val.max()))
    return best


# ---------------------------------------------------------------- fragmentation

@dataclass
class Component:
    """One H-component of F^m(W)."""

    s: np.ndarray          # parameters in W of the samples on this piece
    s_lo: float
    s_hi: float
    arc: int
    r: np.ndarray          # image samples
    phi: np.ndarray
    expansion: np.ndarray  # |DF^m w| / |w| at the samples
    Lambda: float
    history: tuple         # per step l = 1..m: (arc, mx, my, k)
    tag: str               # "regular" | "nearly-grazing"
    terminal: bool

    @property
    def length(self) -> float:
        return float(np.sum(np.hypot(np.diff(self.r), np.diff(self.phi))))


@dataclass
class FragmentResult:
    components: list
    L: float
    remainder: float
    m: int
    L_steps: np.ndarray          # L_l for l = 0..m
    n_samples: int
    failed_weight: float
    _raw: dict = field(default=None, repr=False)

    def components_at(self, l: int) -> list:
        return _components(self._raw, l)

    def family(self, l: int | None = None) -> StandardFamily:
        """The pushed family at step l with densities transported from W."""
        l = self.m if l is None else l
        raw = self._raw
        pair = raw["pair"]
        out = []
        for c in _components(raw, l):
            fin = np.isfinite(c.expansion)
            if fin.sum() < 2:
                continue
            # weight over the sampled span only, so it matches the curve below;
            # the unsampled gaps at the cuts are below CUT_TOL
            sf = c.s[fin]
            w = float(_mass(pair, sf[0], sf[-1]))
            r, phi = c.r[fin], c.phi[fin]
            if w <= 0 or np.sum(np.hypot(np.diff(r), np.diff(phi))) < LENGTH_FLOOR:
                continue
            rho = pair.density_at(c.s[fin]) / c.expansion[fin]
            out.append((StandardPair(c.arc, r, phi, rho), w))
        return StandardFamily(out)


def _mass(pair: StandardPair, s_lo, s_hi):
    t = pair.t
    ell = t[-1]
    x = np.concatenate([[s_lo * ell], t[(t > s_lo * ell) & (t < s_hi * ell)], [s_hi * ell]])
    return np.trapezoid(np.interp(x, t, pair.rho), x)


def _push_pair(table, pair: StandardPair, s, m, k0, kterm):
    K = kernel_pack(table)
    r, phi, dr, dp = pair.at(s)
    j = pair.arc
    u = (r - K[7][j]) / K[2][j]
    n = len(s)
    arcs = np.full((n, m + 1), -1, dtype=np.int64)
    mx = np.zeros((n, m), dtype=np.int64)
    my = np.zeros((n, m), dtype=np.int64)
    ks = np.zeros((n, m + 1), dtype=np.int64)
    side = np.zeros((n, m), dtype=np.int64)
    us = np.full((n, m + 1), np.nan)
    ps = np.full((n, m + 1), np.nan)
    ex = np.full((n, m + 1), np.nan)
    tau = np.full((n, m), np.nan)
    stat = np.zeros(n, dtype=np.int64)
    kern.push(K, np.full(n, j, dtype=np.int64), u, np.ascontiguousarray(phi),
              np.ascontiguousarray(dr), np.ascontiguousarray(dp), m, k0, kterm, T_MAX,
              arcs, mx, my, ks, side, us, ps, ex, tau, stat)
    rs = K[7][np.maximum(arcs, 0)] + K[2][np.maximum(arcs, 0)] * us
    sym = np.zeros((n, m + 1, 5), dtype=np.int64)
    sym[:, :, 0] = arcs
    sym[:, 1:, 1] = mx
    sym[:, 1:, 2] = my
    sym[:, :, 3] = ks
    sym[:, 1:, 4] = side
    for l in range(m + 1):
        dead = stat < l
        sym[dead, l, :] = -(1 << 40)
    return {"s": np.asarray(s, dtype=float), "sym": sym, "r": rs, "phi": ps, "exp": ex,
            "stat": stat, "tau": tau}


def _merge(a, b):
    out = {}
    order = np.argsort(np.concatenate([a["s"], b["s"]]), kind="stable")
    for k in a:
        out[k] = np.concatenate([a[k], b[k]])[order]
    return out


def _run_ids(sym, l):
    d = np.any(sym[1:, : l + 1, :] != sym[:-1, : l + 1, :], axis=(1, 2))
    return d, np.concatenate([[0], np.cumsum(d)])


def _components(raw, l):
    s, sym = raw["s"], raw["sym"]
    kterm = raw["kterm"]
    k0 = raw["k0"]
    d, rid = _run_ids(sym, l)
    starts = np.concatenate([[0], np.flatnonzero(d) + 1])
    ends = np.concatenate([np.flatnonzero(d) + 1, [len(s)]])
    out = []
    for a, b in zip(starts, ends):
        if raw["stat"][a] < l:
            continue
        s_lo = 0.0 if a == 0 else 0.5 * (s[a - 1] + s[a])
        s_hi = 1.0 if b == len(s) else 0.5 * (s[b - 1] + s[b])
        hist = tuple(tuple(int(v) for v in sym[a, i, :4]) for i in range(1, l + 1))
        kabs = np.abs(sym[a, 1: l + 1, 3])
        J = np.nan_to_num(raw["exp"][a:b, l], nan=np.inf)
        j = int(sym[a, l, 0])
        r = raw["r"][a:b, l]
        if raw["closed"][j]:
            # a full circle has no seam singularity: keep the image continuous in r
            r = r.copy()
            f = np.isfinite(r)
            r[f] = np.unwrap(r[f], period=raw["perimeter"][j])
        out.append(Component(s[a:b], s_lo, s_hi, j, r,
                             raw["phi"][a:b, l], J, float(np.min(J)), hist,
                             "nearly-grazing" if np.any(kabs > 0) else "regular",
                             bool(np.any(kabs >= kterm))))
    return out


def _terminal_remainder(comps, kterm):
    """Bound for the strips merged into the terminal band: C / kterm per terminal piece.

    C is taken from the resolved near-grazing pieces, as max of k^2 / Lambda.
    """
    nterm = sum(1 for c in comps if c.terminal)
    if nterm == 0:
        return 0.0
    ratios = [max(abs(h[3]) for h in c.history) ** 2 / c.Lambda for c in comps
              if c.tag == "nearly-grazing" and not c.terminal and c.Lambda > 0]
    C = max(ratios) if ratios else 1.0
    return nterm * C / kterm


def fragment_curve(table: BilliardTable, W: StandardPair, m: int, k0: int = K0, *,
                   kterm: int = KTERM, n_init: int = 65, max_step: float = 0.02,
                   budget: int = 400_000) -> FragmentResult:
    """Cut F^m(W) into H-components and compute L_m(W) = sum 1 / Lambda_i.

    Samples of W are pushed through m steps; neighbours whose symbol sequences
    (arc, lattice jump, strip, corner side) differ are bisected down to CUT_TOL,
    and every piece is densified until it holds MIN_SAMPLES samples or is
    shorter than MIN_LENGTH.
    """
    if m < 0:
        raise ValueError("m must be >= 0")
    K = kernel_pack(table)
    closed = (K[4] >= TWO_PI - 1e-12) & (K[5] == 0)
    perimeter = K[2] * K[4]
    s = np.linspace(0.0, 1.0, n_init)
    raw = _push_pair(table, W, s, m, k0, kterm)
    while True:
        s, sym = raw["s"], raw["sym"]
        gaps = np.diff(s)
        d, rid = _run_ids(sym, m)
        dr = np.diff(raw["r"][:, m])
        jm = np.maximum(sym[:-1, m, 0], 0)
        wrap = closed[jm]
        per = perimeter[jm[wrap]]
        dr[wrap] = (dr[wrap] + 0.5 * per) % per - 0.5 * per
        seg = np.hypot(dr, np.diff(raw["phi"][:, m]))
        seg = np.where(d, 0.0, np.nan_to_num(seg, nan=0.0))
        counts = np.bincount(rid)
        lens = np.bincount(rid[:-1], weights=seg, minlength=len(counts))
        small = (counts < MIN_SAMPLES) & (lens >= MIN_LENGTH)
        alive = raw["stat"][:-1] >= m
        refine = d | (~d & alive & (small[rid[:-1]] | (seg > max_step)))
        refine &= gaps > CUT_TOL
        if not refine.any():
            break
        new_s = 0.5 * (s[:-1] + s[1:])[refine]
        if len(s) + len(new_s) > budget:
            raise UnresolvedFragmentation(budget)
        raw = _merge(raw, _push_pair(table, W, new_s, m, k0, kterm))
    raw.update({"pair": W, "kterm": kterm, "k0": k0, "closed": closed, "perimeter": perimeter})
    comps = _components(raw, m)
    L_steps = np.array([sum(1.0 / c.Lambda for c in _components(raw, l)) for l in range(m + 1)])
    rem = _terminal_remainder(comps, kterm)
    failed = 1.0 - sum(float(_mass(W, c.s_lo, c.s_hi)) for c in comps)
    return FragmentResult(comps, float(L_steps[m] + rem), rem, m, L_steps, len(raw["s"]),
                          max(failed, 0.0), raw)


# ---------------------------------------------------------------- curve sampling

def tau_min_estimate(table: BilliardTable) -> float:
    tm = getattr(table, "_taumin", None)
    if tm is None:
        from .dynamics import flight_time_bounds
        tm = flight_time_bounds(table, 20000, 0)
        object.__setattr__(table, "_taumin", tm)
    return tm


def _reverse_images(table, arc, u, phi):
    """F^{-1} = I F I on arrays; rows that fail come back with nan phi."""
    K = kernel_pack(table)
    res = map_batch(table, arc, u, -phi)
    ok = res["status"] == kern.OK
    return res["arc"], res["u"], np.where(ok, -res["phi"], np.nan)


def _seed_centers(table, n, rng, mix=None):
    """Curve centers from mu, plus points near corners, near their preimages,
    near preimages of grazing, and near the boundary set A."""
    K = kernel_pack(table)
    mix = mix or {"uniform": 0.4, "corner": 0.15, "pre_corner": 0.15, "pre_grazing": 0.15, "near_A": 0.15}
    corner_arcs = np.flatnonzero(K[5])
    has_A = len(boundary_set(table)) > 0
    kinds = list(mix)
    w = np.array([mix[k] if (k not in ("corner", "pre_corner") or len(corner_arcs))
                  and (k != "near_A" or has_A) else 0.0 for k in kinds])
    w /= w.sum()
    pick = rng.choice(len(kinds), size=n, p=w)
    arc = np.empty(n, dtype=np.int64)
    u = np.empty(n)
    phi = np.empty(n)
    for i, kind in enumerate(kinds):
        m = np.flatnonzero(pick == i)
        if len(m) == 0:
            continue
        if kind == "uniform":
            a, uu, pp, _ = sample_arrays(table, len(m), rng)
        elif kind in ("corner", "pre_corner"):
            a = rng.choice(corner_arcs, size=len(m))
            off = rng.random(len(m)) * 1e-3 / K[2][a]
            end = rng.random(len(m)) < 0.5
            uu = np.where(end, K[4][a] - off, off)
            pp = np.arcsin(rng.uniform(-1, 1, len(m)))
            if kind == "pre_corner":
                a, uu, pp = _reverse_images(table, a, uu, pp)
        elif kind == "pre_grazing":
            a, uu, _, _ = sample_arrays(table, len(m), rng)
            pp = np.sign(rng.uniform(-1, 1, len(m))) * (HALF_PI - 1e-3 * rng.random(len(m)))
            a, uu, pp = _reverse_images(table, a, uu, pp)
        else:
            boxes = long_flight_boxes_cached(table)
            b = rng.choice(len(boxes), size=len(m))
            a = np.empty(len(m), dtype=np.int64)
            uu = np.empty(len(m))
            pp = np.empty(len(m))
            for bi in np.unique(b):
                sel = b == bi
                bx = boxes[bi]
                dr = bx.dmin + (bx.dmax - bx.dmin) * rng.random(sel.sum())
                al = bx.amax * rng.random(sel.sum())
                u2, p2, valid = bx.chart.to_state(dr, al)
                a[sel] = bx.chart.j
                uu[sel] = u2
                pp[sel] = np.where(valid, p2, np.nan)
        arc[m], u[m], phi[m] = a, uu, pp
    return arc, u, phi


def long_flight_boxes_cached(table):
    bx = getattr(table, "_lfboxes", None)
    if bx is None:
        bx = long_flight_boxes(table, 2.0 * long_flight_threshold(table))
        object.__setattr__(table, "_lfboxes", bx)
    return bx


def sample_unstable_pairs(table: BilliardTable, n: int, delta: float, seed=0, *, mix=None,
                          k0: int = K0, lengths: str = "upper_half") -> list[StandardPair]:
    """n homogeneous unstable segments with |W| <= delta and uniform density.

    The slope dphi/dr = kappa + cos(phi) U / tau_min, U in (0.05, 1], lies
    inside the unstable cone.
    """
    rng = _rng(seed)
    K = kernel_pack(table)
    tmin = tau_min_estimate(table)
    out = []
    while len(out) < n:
        need = n - len(out)
        arc, u, phi = _seed_centers(table, 2 * need + 8, rng, mix)
        U = rng.uniform(0.05, 1.0, len(arc))
        ell = delta * (1.0 - 0.5 * rng.random(len(arc))) if lengths == "upper_half" else np.full(len(arc), delta)
        for j, uu, pp, UU, L in zip(arc, u, phi, U, ell):
            if not np.isfinite(pp) or abs(pp) >= HALF_PI - 1e-6:
                continue
            R = K[2][j]
            sig = 1.0 / R + math.cos(pp) * UU / tmin
            d = np.array([1.0, sig]) / math.hypot(1.0, sig)
            r = K[7][j] + R * uu
            r0, r1 = r - 0.5 * L * d[0], r + 0.5 * L * d[0]
            p0, p1 = pp - 0.5 * L * d[1], pp + 0.5 * L * d[1]
            if r0 < K[7][j] or r1 > K[7][j] + R * K[4][j]:
                continue
            if max(abs(p0), abs(p1)) >= HALF_PI - 1e-9:
                continue
            if strip_indices(p0, k0, KTERM) != strip_indices(p1, k0, KTERM):
                continue
            out.append(StandardPair.segment(int(j), r0, p0, r1, p1))
            if len(out) == n:
                break
    return out


# ---------------------------------------------------------------- experiments

@dataclass
class ExpansionSup:
    m: int
    delta: float
    estimate: float
    argmax: StandardPair
    values: np.ndarray          # L_m per trial (nan if unresolved)
    L_steps: np.ndarray         # (trials, m + 1)
    unresolved: int

    @property
    def sup_steps(self) -> np.ndarray:
        return np.nanmax(self.L_steps, axis=0)

    def to_dict(self) -> dict:
        return {"m": self.m, "delta": self.delta, "estimate": self.estimate,
                "sup_by_step": self.sup_steps.tolist(), "trials": len(self.values),
                "unresolved": self.unresolved,
                "argmax": {"arc": self.argmax.arc, "r": self.argmax.r.tolist(),
                           "phi": self.argmax.phi.tolist()}}


def expansion_sup(table: BilliardTable, m: int, delta: float, trials: int = 1000, k0: int = K0,
                  seed=0, pairs=None) -> ExpansionSup:
    """Empirical sup of L_m(W) over random short unstable curves |W| <= delta."""
    if m < 1:
        raise ValueError("m must be >= 1")
    pairs = sample_unstable_pairs(table, trials, delta, seed, k0=k0) if pairs is None else pairs
    vals = np.full(len(pairs), np.nan)
    steps = np.full((len(pairs), m + 1), np.nan)
    bad = 0
    for i, W in enumerate(pairs):
        try:
            fr = fragment_curve(table, W, m, k0)
        except UnresolvedFragmentation:
            bad += 1
            continue
        vals[i] = fr.L
        steps[i] = fr.L_steps
        steps[i, m] = fr.L
    i = int(np.nanargmax(vals))
    return ExpansionSup(m, delta, float(vals[i]), pairs[i], vals, steps, bad)


def find_m0(table: BilliardTable, delta: float, trials: int = 1000, m_max: int = 10, k0: int = K0,
            seed=0):
    """Smallest m <= m_max with empirical sup L_m < 1, with the per-m estimates."""
    pairs = sample_unstable_pairs(table, trials, delta, seed, k0=k0)
    est = []
    for m in range(1, m_max + 1):
        res = expansion_sup(table, m, delta, trials, k0, pairs=pairs)
        est.append(res.estimate)
        if res.estimate < 1.0:
            return m, est, res
    return None, est, res


@dataclass
class ZqExperiment:
    q: float
    delta0: float
    ratios: np.ndarray        # (trials, M_done); column l-1 is step l
    M_star: int | None

    def stats(self) -> list[dict]:
        out = []
        for l in range(self.ratios.shape[1]):
            col = self.ratios[:, l]
            col = col[np.isfinite(col)]
            if len(col) == 0:
                continue
            out.append({"M": l + 1, "median": float(np.median(col)),
                        "p95": float(np.percentile(col, 95)),
                        "frac_above_1": float(np.mean(col > 1.0)), "n": int(len(col))})
        return out


def _zq_ok(col):
    col = col[np.isfinite(col)]
    return len(col) > 0 and np.median(col) < 0.9 and np.percentile(col, 95) < 1.0


def zq_contraction_experiment(table: BilliardTable, q: float = 0.5, M: int = 40, delta0: float = 1e-5,
                              trials: int = 200, seed=0, *, near_fraction: float = 0.25,
                              stop_early: bool = True, k0: int = K0) -> ZqExperiment:
    """Distribution of Z_q(F^M pushforward) / Z_q(l) over random standard pairs."""
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    mix = {"uniform": 1.0 - near_fraction, "near_A": near_fraction}
    pairs = sample_unstable_pairs(table, trials, delta0, seed, mix=mix, k0=k0)
    z0 = np.array([z_q(StandardFamily([(W, 1.0)]), q) for W in pairs])
    schedule = [m for m in (1, 2, 4, 8, 16, 32, 40) if m < M] + [M]
    ratios = np.full((trials, 0), np.nan)
    alive = np.ones(trials, dtype=bool)
    M_star = None
    for m in schedule:
        block = np.full((trials, m), np.nan)
        for i, W in enumerate(pairs):
            if not alive[i]:
                continue
            try:
                fr = fragment_curve(table, W, m, k0)
            except UnresolvedFragmentation:
                alive[i] = False
                continue
            for l in range(1, m + 1):
                block[i, l - 1] = z_q(fr.family(l), q) / z0[i]
        ratios = block
        for l in range(m):
            if _zq_ok(ratios[:, l]):
                M_star = l + 1
                break
        if M_star is not None and stop_early:
            break
    return ZqExperiment(q, delta0, ratios, M_star)


def _unstable_line(ch: _Chart, uc, pc, n, lo_lab, hi_lab):
    """Along (1, kappa) through (uc, pc): parameter where the label drops below
    lo_lab and where it exceeds hi_lab."""
    e = np.array([1.0, ch.kappa]) / math.hypot(1.0, ch.kappa)

    def lab(S):
        g, _ = ch.labels_state(uc + S * e[0] / ch.R, pc + S * e[1])
        return g

    # widen the probe until the labels on the two sides differ
    S = 1e-7
    probe = lab(np.array([S, -S]))
    while probe[0] == probe[1] and S < 1e-2:
        S *= 4.0
        probe = lab(np.array([S, -S]))
    up = 1.0 if probe[0] >= probe[1] else -1.0
    res = []
    for sgn, pred in ((up, lambda g: ~(g <= hi_lab)), (-up, lambda g: g < lo_lab)):
        S = 1e-6
        while not pred(lab(np.array([sgn * S])))[0] and S < 1.0:
            S *= 2.0
        a, b = _first_true(lambda X: pred(lab(sgn * X)), np.zeros(1), np.array([S]), rtol=1e-9)
        res.append(sgn * float(b[0]))
    return res, e


def expansion0_check(table: BilliardTable, h: int, n_values=(10, 20, 40, 80, 160)) -> list[dict]:
    """One-step Z_1 ratio for curves crossing the cells E(h, N), n <= N <= 2n."""
    ch = _Chart(table, h)
    out = []
    for n in n_values:
        lo, hi, ok = ch.bands(np.array([0.0]), n)
        if not ok[0]:
            raise CellEmpty(f"cell (h={h}, n={n}) is empty")
        d = 0.25 * ch.dr_limit(n, ch.signs[0]) * ch.signs[0]
        lo, hi, ok = ch.bands(np.array([d]), n)
        uc, pc, _ = ch.to_state(d, 0.5 * (lo[0] + hi[0]))
        (s_hi, s_lo), e = _unstable_line(ch, float(uc), float(pc), n, n, 2 * n)
        a, b = sorted((s_lo, s_hi))
        r0 = ch.r_of_u(float(uc))
        W = StandardPair.segment(ch.j, r0 + a * e[0], float(pc) + a * e[1], r0 + b * e[0], float(pc) + b * e[1])
        fr = fragment_curve(table, W, 1)
        z_in = z_q(StandardFamily([(W, 1.0)]), 1.0)
        z_out = z_q(fr.family(1), 1.0)
        out.append({"n": int(n), "length": W.length, "components": len(fr.components),
                    "Z1_in": z_in, "Z1_out": z_out, "ratio": z_out / z_in})
    return out


def corner_flight_range(table: BilliardTable, h: int, N_values=(10, 20, 40, 80, 160),
                        curves: int = 10, seed=0) -> list[dict]:
    """max tau / min tau along unstable chords of the cells E(h, N)."""
    rng = _rng(seed)
    ch = _Chart(table, h)
    out = []
    for N in N_values:
        lim = ch.dr_limit(N, ch.signs[0])
        worst = 1.0
        for _ in range(curves):
            d = ch.signs[0] * lim * rng.uniform(0.05, 0.95)
            lo, hi, ok = ch.bands(np.array([d]), N)
            if not ok[0]:
                continue
            al = lo[0] + (hi[0] - lo[0]) * rng.uniform(0.1, 0.9)
            uc, pc, _ = ch.to_state(d, al)
            (s_hi, s_lo), e = _unstable_line(ch, float(uc), float(pc), N, N, N)
            ss = np.linspace(min(s_lo, s_hi), max(s_lo, s_hi), 35)[1:-1]
            g, res = ch.labels_state(float(uc) + ss * e[0] / ch.R, float(pc) + ss * e[1])
            tau = res["tau"][(g == N) & (res["status"] == kern.OK)]
            if len(tau) > 1:
                worst = max(worst, float(tau.max() / tau.min()))
        out.append({"N": int(N), "max_tau_ratio": worst})
    return out


def fragment_length_law(table: BilliardTable, deltas=(1e-3, 1e-4, 1e-5), trials: int = 300,
                        seed=0, k0: int = K0) -> dict:
    """max over trials of |W'| / |W|^(1/3) for the H-components W' of F(W)."""
    rows = []
    for i, delta in enumerate(deltas):
        pairs = sample_unstable_pairs(table, trials, delta, seed, k0=k0, lengths="fixed")
        best = 0.0
        longest = 0.0
        for W in pairs:
            try:
                fr = fragment_curve(table, W, 1, k0)
            except UnresolvedFragmentation:
                continue
            lw = max((c.length for c in fr.components), default=0.0)
            longest = max(longest, lw)
            best = max(best, lw / W.length ** (1.0 / 3.0))
        rows.append({"delta": delta, "max_ratio": best, "max_length": longest})
    C = max(r["max_ratio"] for r in rows)
    slope = float(np.polyfit(np.log([r["delta"] for r in rows]),
                             np.log([r["max_length"] for r in rows]), 1)[0])
    return {"rows": rows, "C": C, "length_exponent": slope}


def corner_revisit_scan(table: BilliardTable, K_steps: int = 10, n_orbits: int = 2000,
                        orbit_len: int = 2000, N_values=(5, 10, 20, 40, 80), seed=0) -> dict:
    """Orbits entering E_N (corner cells with n >= N) twice within K_steps."""
    K = kernel_pack(table)
    arc, u, phi, _ = sample_arrays(table, n_orbits, seed)
    shape = (n_orbits, orbit_len)
    o_arc = np.zeros(shape, dtype=np.int64)
    o_u = np.zeros(shape)
    o_phi = np.zeros(shape)
    o_tau = np.zeros(shape)
    o_mx = np.zeros(shape, dtype=np.int64)
    o_my = np.zeros(shape, dtype=np.int64)
    stat = np.zeros(n_orbits, dtype=np.int64)
    kern.orbit_records(K, arc, u, phi, orbit_len, T_MAX, o_arc, o_u, o_phi, o_tau, o_mx, o_my, stat)
    valid = np.arange(orbit_len)[None, :] < stat[:, None]
    fa, fu, fp = o_arc[valid], o_u[valid], o_phi[valid]
    px, py, vx, vy = _kernel_frame(K, fa, fu, fp)
    cd = _cell_data(table)
    nxt = np.roll(o_arc, -1, axis=1)[valid]
    h, n = cd.classify(px, py, vx, vy, o_tau[valid], K[6][fa], K[6][nxt], o_mx[valid], o_my[valid],
                       long_flight_threshold(table))
    is_E = np.zeros(shape, dtype=bool)
    cnt = np.zeros(shape, dtype=np.int64)
    corner = np.array([cd.tags.get(int(x)) == "corner" for x in h]) & (h >= 0)
    is_E[valid] = corner
    cnt[valid] = n
    rows = []
    for N in N_values:
        hits = is_E & (cnt >= N)
        viol = []
        for i in np.flatnonzero(hits.any(axis=1)):
            idx = np.flatnonzero(hits[i])
            gaps = np.diff(idx)
            for g_i in np.flatnonzero(gaps <= K_steps):
                viol.append({"orbit": int(i), "steps": [int(idx[g_i]), int(idx[g_i + 1])]})
        rows.append({"N": int(N), "visits": int(hits.sum()), "violations": viol})
    N_K = next((r["N"] for r in rows if not r["violations"]), None)
    return {"K": K_steps, "rows": rows, "N_K": N_K}
