"""Corridor detection, boundary sets, (A1)/(A2) checks and local enlargement.

A direction is a primitive lattice vector (P, Q).  Projecting the periodic
scatterer configuration onto the unit normal n = (-Q, P)/L, L = |(P, Q)|, gives
a 1/L-periodic occupied set; its gaps are the corridors in that direction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize_scalar

from .geometry import (BilliardTable, Bump, build_table, table_distance, AdmissibilityError,
                       TWO_PI)

ZERO_WIDTH_TOL = 1e-9
TIE_TOL = 1e-9
A2_ANGLE_TOL = 1e-8


class EpsTooLarge(ValueError):
    pass


class NotOnBoundary(ValueError):
    pass


# ---------------------------------------------------------------- directions

def direction_bound(table: BilliardTable) -> int:
    return max(1, math.ceil(3.0 * table.kappa_max - 1e-9))


def candidate_directions(table: BilliardTable | None = None, *, bound: int | None = None):
    """Primitive (P, Q), one per direction in [0, pi), with max(|P|,|Q|) <= bound."""
    B = direction_bound(table) if bound is None else bound
    out = []
    for P in range(0, B + 1):
        for Q in range(-B, B + 1):
            if P == 0 and Q <= 0:
                continue
            if math.gcd(P, abs(Q)) != 1:
                continue
            out.append((P, Q))
    out.sort(key=lambda pq: (abs(pq[1]), pq[1], pq[0]))
    return out


# ---------------------------------------------------------------- support points

@dataclass(frozen=True)
class SupportPoint:
    """A boundary point where a scatterer's projection attains its extreme."""

    scatterer: int
    point: tuple[float, float]           # in the scatterer's own coordinates
    arcs: tuple[tuple[int, float], ...]  # (global arc index, native parameter)

    @property
    def is_corner(self) -> bool:
        return len(self.arcs) > 1


def _arc_extreme(arc, n, sign):
    """Global max over the arc of sign * n.f(u): list of (value, u)."""
    span = arc.span
    if arc.is_exact_circle:
        cands = [0.0, span]
        th = math.atan2(sign * n[1], sign * n[0])
        u = (arc.theta0 - th) % TWO_PI
        if u <= span:
            cands.append(u)
        elif TWO_PI - u < 1e-14:
            cands.append(0.0)
        cands = np.array(cands)
    else:
        grid = np.linspace(0.0, span, 2049)
        vals = sign * arc.points(grid) @ n
        cands = [0.0, span]
        for i in np.flatnonzero((vals[1:-1] >= vals[:-2]) & (vals[1:-1] >= vals[2:])) + 1:
            res = minimize_scalar(lambda u: -sign * float(arc.points(u)[0] @ n),
                                  bounds=(grid[i - 1], grid[i + 1]), method="bounded",
                                  options={"xatol": 1e-14})
            cands.append(float(res.x))
        cands = np.array(cands)
    vals = sign * arc.points(cands) @ n
    return list(zip(vals.tolist(), cands.tolist()))


def scatterer_support(table: BilliardTable, i: int, n, sign: int):
    """Extreme value of sign * n.x over scatterer i and its realizing points."""
    sc = table.scatterers[i]
    first = sum(len(s.arcs) for s in table.scatterers[:i])
    cands = []
    for jj, arc in enumerate(sc.arcs):
        for val, u in _arc_extreme(arc, n, sign):
            cands.append((val, first + jj, u, tuple(float(c) for c in arc.points(u)[0])))
    best = max(c[0] for c in cands)
    pts: list[list] = []
    for val, j, u, p in cands:
        if val < best - TIE_TOL:
            continue
        for entry in pts:
            if math.hypot(p[0] - entry[0][0], p[1] - entry[0][1]) < 1e-9:
                if all(a != j for a, _ in entry[1]):
                    entry[1].append((j, u))
                break
        else:
            pts.append([p, [(j, u)]])
    sps = [SupportPoint(i, p, tuple(sorted(a))) for p, a in pts]
    return sign * best, sps


# ---------------------------------------------------------------- corridors

@dataclass(frozen=True)
class PhasePoint:
    """One element of A_H: a boundary point with velocity along the corridor."""

    r: float
    phi: float
    scatterer: int
    arc: int
    u: float
    point: tuple[float, float]
    side: str        # "lower" | "upper" (w.r.t. the corridor normal)
    velocity: int    # +1 for +v_H, -1 for -v_H
    tag: str         # "regular" | "corner"


@dataclass
class Corridor:
    direction: tuple[int, int]
    width: float
    offset: float          # normal coordinate of the lower boundary line, mod period
    period: float
    lower: list            # SupportPoint realizations of the lower side
    upper: list
    boundary_points: list  # PhasePoint entries
    type: int | str        # 1 | 2 | 3 | "incipient"
    ids: tuple = ()        # global indices of boundary_points (see boundary_set)

    @property
    def v(self) -> np.ndarray:
        P, Q = self.direction
        return np.array([P, Q], dtype=float) / math.hypot(P, Q)

    @property
    def normal(self) -> np.ndarray:
        P, Q = self.direction
        return np.array([-Q, P], dtype=float) / math.hypot(P, Q)

    @property
    def incipient(self) -> bool:
        return self.type == "incipient"

    def to_dict(self) -> dict:
        return {
            "direction": list(self.direction), "width": self.width, "offset": self.offset,
            "type": self.type,
            "boundary_points": [
                {"r": b.r, "phi": b.phi, "scatterer": b.scatterer, "arc": b.arc,
                 "point": list(b.point), "side": b.side, "velocity": b.velocity, "tag": b.tag}
                for b in self.boundary_points],
            "lower_realizations": len(self.lower), "upper_realizations": len(self.upper),
        }


def _phase_points(table, sp: SupportPoint, side: str, v, nrm):
    """Lift a realizing boundary point to its phase points with velocity +-v."""
    out = []
    for vs in (1, -1):
        vel = vs * v
        best = None
        for j, u in sp.arcs:
            arc = table.arcs[j]
            f1 = arc.derivs(u)[1][0]
            t = f1 / math.hypot(*f1)
            N = np.array([-t[1], t[0]])
            score = float(N @ vel)
            if best is None or score > best[0]:
                best = (score, j, u, t, N)
        _, j, u, t, N = best
        if len(sp.arcs) == 1:
            # regular tangency: flight runs along the line exactly
            phi = math.copysign(math.pi / 2, float(t @ vel))
        else:
            phi = math.atan2(float(vel @ t), float(vel @ N))
        arc = table.arcs[j]
        r = float(table.offsets[j] + arc.s_of_u(u)[0])
        out.append(PhasePoint(r, phi, sp.scatterer, j, u, sp.point, side, vs,
                              "corner" if len(sp.arcs) > 1 else "regular"))
    return out


def _direction_corridors(table: BilliardTable, P: int, Q: int):
    L = math.hypot(P, Q)
    per = 1.0 / L
    v = np.array([P, Q]) / L
    nrm = np.array([-Q, P]) / L
    items = []
    for i in range(len(table.scatterers)):
        lo, lo_pts = scatterer_support(table, i, nrm, -1)
        hi, hi_pts = scatterer_support(table, i, nrm, +1)
        if hi - lo > per + ZERO_WIDTH_TOL:
            return []  # its own translates already cover the period
        shift = math.floor(lo / per) * per
        items.append((lo - shift, hi - shift, lo_pts, hi_pts))
    # unroll three periods and sweep
    unrolled = []
    for k in (-1, 0, 1, 2):
        for lo, hi, lp, hp in items:
            unrolled.append((lo + k * per, hi + k * per, lp, hp))
    unrolled.sort(key=lambda t: t[0])
    out = []
    cur_hi, cur_hp = unrolled[0][1], list(unrolled[0][3])
    for idx in range(1, len(unrolled)):
        lo, hi, lp, hp = unrolled[idx]
        if lo < cur_hi - ZERO_WIDTH_TOL:
            if hi > cur_hi + TIE_TOL:
                cur_hi, cur_hp = hi, list(hp)
            elif hi >= cur_hi - TIE_TOL:
                cur_hp += [p for p in hp if p not in cur_hp]
            continue
        gap = lo - cur_hi
        if 0.0 <= cur_hi < per:
            # upper side realizations: every item starting at this lo (ties)
            ups = []
            for lo2, _, lp2, _ in unrolled[idx:]:
                if lo2 > lo + TIE_TOL:
                    break
                ups += [p for p in lp2 if p not in ups]
            out.append((cur_hi, max(gap, 0.0), list(cur_hp), ups))
        cur_hi, cur_hp = hi, list(hp)
    corridors = []
    for off, width, lows, ups in out:
        if width <= ZERO_WIDTH_TOL:
            ctype = "incipient"
            width = 0.0
        else:
            ctype = None
        bps = []
        if len(lows) == 1:
            bps += _phase_points(table, lows[0], "lower", v, nrm)
        if len(ups) == 1:
            bps += _phase_points(table, ups[0], "upper", v, nrm)
        if ctype is None:
            ncorner = sum(1 for side in (lows, ups) if any(p.is_corner for p in side))
            ctype = 1 + ncorner
        corridors.append(Corridor((P, Q), float(width), float(off % per), per,
                                  lows, ups, bps, ctype))
    return corridors


@lru_cache(maxsize=64)
def _find_cached(table: BilliardTable) -> tuple:
    res = []
    for P, Q in candidate_directions(table):
        res.extend(_direction_corridors(table, P, Q))
    res.sort(key=lambda c: (c.direction[1], c.direction[0], c.offset))
    k = 0
    for c in res:
        c.ids = tuple(range(k, k + len(c.boundary_points)))
        k += len(c.boundary_points)
    return tuple(res)


def find_corridors(table: BilliardTable, include_incipient: bool = True) -> list[Corridor]:
    """All corridors (and optionally incipient ones), sorted by (Q, P, offset)."""
    res = list(_find_cached(table))
    if not include_incipient:
        res = [c for c in res if not c.incipient]
    return res


def boundary_set(table: BilliardTable) -> list[tuple[Corridor, PhasePoint]]:
    """The set A: all boundary phase points of genuine corridors, globally indexed."""
    out = []
    for c in _find_cached(table):
        for b in c.boundary_points:
            out.append((c, b))
    return out


# ---------------------------------------------------------------- classification

@dataclass
class CorridorReport:
    corridors: list
    A1_ok: bool
    A2_ok: bool
    incipient_present: bool
    violations: list
    table_type: str
    boundary_class: str | None

    @property
    def ok(self) -> bool:
        return self.A1_ok and self.A2_ok and not self.incipient_present

    def to_dict(self) -> dict:
        return {
            "table_type": self.table_type,
            "boundary_class": self.boundary_class,
            "A1_ok": self.A1_ok, "A2_ok": self.A2_ok,
            "incipient_present": self.incipient_present,
            "corridors": [c.to_dict() for c in self.corridors if not c.incipient],
            "incipient": [c.to_dict() for c in self.corridors if c.incipient],
            "violations": self.violations,
        }


def _tangent_parallel(table, sp: SupportPoint, v) -> bool:
    for j, u in sp.arcs:
        f1 = table.arcs[j].derivs(u)[1][0]
        t = f1 / math.hypot(*f1)
        if abs(t[0] * v[1] - t[1] * v[0]) < math.sin(A2_ANGLE_TOL):
            return True
    return False


def classify_and_check(table: BilliardTable) -> CorridorReport:
    corridors = find_corridors(table)
    violations = []
    a1 = a2 = True
    for c in corridors:
        desc = {"direction": list(c.direction), "offset": c.offset, "width": c.width}
        if c.incipient:
            violations.append({"kind": "incipient", **desc,
                               "points": [list(p.point) for p in c.lower + c.upper]})
            continue
        for side, pts in (("lower", c.lower), ("upper", c.upper)):
            if len(pts) > 1:
                a1 = False
                violations.append({"kind": "A1", "side": side, **desc,
                                   "points": [list(p.point) for p in pts]})
            for p in pts:
                if p.is_corner and _tangent_parallel(table, p, c.v):
                    a2 = False
                    violations.append({"kind": "A2", "side": side, **desc,
                                       "point": list(p.point)})
    genuine = [c for c in corridors if not c.incipient]
    has_corners = any(sc.corners for sc in table.scatterers)
    if not genuine:
        ttype, bclass = ("C" if has_corners else "A"), None
    else:
        any_corner = any(p.is_corner for c in genuine for p in c.lower + c.upper)
        bclass = "D2" if any_corner else "D1"
        ttype = bclass if has_corners else "B"
    return CorridorReport(corridors, a1, a2, any(c.incipient for c in corridors),
                          violations, ttype, bclass)


# ---------------------------------------------------------------- local enlargement

BOUNDARY_TOL = 1e-7


@dataclass(frozen=True)
class _Located:
    scatterer: int
    arcs: tuple[tuple[int, float], ...]  # (global arc index, native parameter)
    point: np.ndarray                     # in the scatterer's own coordinates
    distance: float


def _locate(table: BilliardTable, q) -> _Located:
    """Nearest boundary point to q (mod the lattice); corners report two arcs."""
    q = np.asarray(getattr(q, "point", q), dtype=float)
    hits = []
    for j, arc in enumerate(table.arcs):
        grid = np.linspace(0.0, arc.span, 4097)
        d = arc.points(grid) - q
        d -= np.round(d)
        dist = np.hypot(d[:, 0], d[:, 1])
        i = int(np.argmin(dist))

        def f(u):
            e = arc.points(u)[0] - q
            e -= np.round(e)
            return float(e @ e)

        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
        res = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-15})
        cands = [(f(lo), lo), (f(hi), hi), (float(res.fun), float(res.x))]
        d2, u = min(cands)
        hits.append((math.sqrt(d2), j, u))
    best = min(h[0] for h in hits)
    if best > BOUNDARY_TOL:
        raise NotOnBoundary(f"point {q.tolist()} is {best:.3g} away from the boundary")
    near = [(j, u) for dist, j, u in hits if dist <= max(BOUNDARY_TOL, 10 * best)]
    sc = int(table.arc_scatterer[near[0][0]])
    near = [(j, u) for j, u in near if table.arc_scatterer[j] == sc]
    p = table.arcs[near[0][0]].points(near[0][1])[0]
    return _Located(sc, tuple(near), p, best)


def _unit_normal(table, j, u) -> np.ndarray:
    f1 = table.arcs[j].derivs(u)[1][0]
    t = f1 / math.hypot(*f1)
    return np.array([-t[1], t[0]])  # points into D


def _displacement_norm(table, sc: int, bump: Bump) -> float:
    """C^3 size of a bump's displacement in the metric of table_distance."""
    w = np.linspace(0.0, 1.0, 513)
    worst = 0.0
    for arc in table.scatterers[sc].arcs:
        new = arc.with_bumps(tuple(arc.bumps) + (bump,))
        d0, d1 = arc.derivs(w * arc.span), new.derivs(w * arc.span)
        for k in range(4):
            worst = max(worst, float(np.max(np.hypot(*(d1[k] - d0[k]).T))))
    return worst


def local_enlargement(table: BilliardTable, q, eps: float, *, tilt=None,
                      radius: float | None = None) -> BilliardTable:
    """Grow the scatterer through q by a smooth bump of C^3 size below eps.

    The displacement points into the billiard domain, so the new domain is a
    subset of the old one and q ends up inside the enlarged scatterer.  The
    bump lives in the eps-disk around q.  ``tilt`` shifts the bump center by a
    quarter radius against the given direction, which rotates the one-sided
    tangents at a corner.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    loc = _locate(table, q)
    normals = [_unit_normal(table, j, u) for j, u in loc.arcs]
    d = np.sum(normals, axis=0)
    d /= math.hypot(*d)
    kappa = min(float(table.arcs[j].curvature(u)[0]) for j, u in loc.arcs)
    rho = radius if radius is not None else min(eps, 0.5 / kappa, 0.25)
    rho = min(rho, eps)
    center = loc.point.copy()
    if tilt is not None:
        t = np.asarray(tilt, dtype=float)
        center = center - 0.25 * rho * t / math.hypot(*t)
    unit = Bump(tuple(center.tolist()), float(rho), 1.0, tuple(d.tolist()))
    norm = _displacement_norm(table, loc.scatterer, unit)
    amp = min(eps, kappa) / (10.0 * norm)
    bump = Bump(unit.center, unit.radius, float(amp), unit.direction)
    cfg = json.loads(json.dumps(table.config))
    sd = cfg["scatterers"][loc.scatterer]
    sd["bumps"] = list(sd.get("bumps", [])) + [bump.to_dict()]
    try:
        return build_table(cfg)
    except AdmissibilityError as exc:
        raise EpsTooLarge(f"enlargement at {loc.point.tolist()} breaks admissibility: {exc}") from exc


@dataclass
class GenericityResult:
    table: BilliardTable
    steps: list
    cumulative_distance: float
    direct_distance: float
    report: CorridorReport

    @property
    def ok(self) -> bool:
        return self.report.ok

    def to_dict(self) -> dict:
        return {"ok": self.ok, "steps": self.steps,
                "cumulative_distance": self.cumulative_distance,
                "direct_distance": self.direct_distance,
                "report": self.report.to_dict(), "table": self.table.to_dict()}


def _bad_tangent(table, loc: _Located, v) -> np.ndarray | None:
    """Tangent (pointing away from the corner) of the arc parallel to v."""
    best = None
    for j, u in loc.arcs:
        f1 = table.arcs[j].derivs(u)[1][0]
        t = f1 / math.hypot(*f1)
        if u > 0.5 * table.arcs[j].span:
            t = -t  # arc ends at the corner
        cross = abs(t[0] * v[1] - t[1] * v[0])
        if best is None or cross < best[0]:
            best = (cross, t)
    return None if best is None else best[1]


def make_generic(table: BilliardTable, eps: float, max_steps: int | None = None) -> GenericityResult:
    """Remove incipient corridors and (A1)/(A2) violations by local enlargements.

    Corridors are visited in their canonical order; each bad one gets one
    enlargement with budget eps / (2k), k the number of bad corridors at the start.
    """
    report = classify_and_check(table)
    k = max(1, len({(tuple(v["direction"]), v["offset"]) for v in report.violations}))
    step_eps = eps / (2.0 * k)
    max_steps = max_steps if max_steps is not None else 4 * k + 4
    steps = []
    cur = table
    total = 0.0
    while not report.ok and len(steps) < max_steps:
        v = report.violations[0]
        tilt = None
        if v["kind"] == "A2":
            q = v["point"]
            P, Q = v["direction"]
            tilt = _bad_tangent(cur, _locate(cur, q), np.array([P, Q]) / math.hypot(P, Q))
        else:
            q = v["points"][0]
        new = local_enlargement(cur, q, step_eps, tilt=tilt)
        dist = table_distance(cur, new)
        total += dist
        steps.append({"kind": v["kind"], "direction": v["direction"], "q": list(map(float, q)),
                      "eps": step_eps, "distance": dist})
        cur = new
        report = classify_and_check(cur)
    return GenericityResult(cur, steps, total, table_distance(table, cur), report)
