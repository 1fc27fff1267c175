"""The billiard map: free flights through lattice copies, reflections, tangent map.

Circular-arc tables run through the numba kernels in :mod:`._kernels`; tables
with cubic or bumped arcs use a slower pure-Python path with safeguarded root
refinement.  Either path can be forced for cross-checking.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import _kernels as kern
from .geometry import BilliardTable, TWO_PI

T_MAX = 1e6
HALF_PI = 0.5 * math.pi
GRAZING_TOL = kern.GRAZING_TOL
CORNER_TOL = kern.CORNER_TOL
CORNER_SEQUENCE_LIMIT = 1000


class CornerHit(RuntimeError):
    """The flight ends at a corner; ``event.branches`` holds both continuations."""

    def __init__(self, event):
        super().__init__("flight hits a corner point")
        self.event = event


class NoCollision(RuntimeError):
    """Flight longer than the cap: the ray runs (numerically) inside a corridor."""


class SingularityTooClose(RuntimeError):
    pass


# ---------------------------------------------------------------- types

@dataclass(frozen=True)
class CollisionPoint:
    r: float
    phi: float
    scatterer: int
    arc: int

    def reflected(self) -> "CollisionPoint":
        return CollisionPoint(self.r, -self.phi, self.scatterer, self.arc)


@dataclass(frozen=True)
class CollisionEvent:
    next: CollisionPoint
    tau: float
    displacement: np.ndarray
    grazing: bool = False
    corner_hit: bool = False
    corner_branch: int = 0          # 0 regular; 1 reflected off the hit arc
    branches: tuple = ()            # both continuations at a corner hit
    lattice_jump: tuple = (0, 0)    # translate of the hit copy


@dataclass
class PhaseSample:
    """A batch of collision points stored as arrays; indexes to CollisionPoint."""

    r: np.ndarray
    phi: np.ndarray
    arc: np.ndarray
    scatterer: np.ndarray
    u: np.ndarray = field(repr=False, default=None)

    def __len__(self) -> int:
        return len(self.r)

    def __getitem__(self, i) -> CollisionPoint:
        return CollisionPoint(float(self.r[i]), float(self.phi[i]), int(self.scatterer[i]),
                              int(self.arc[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


# ---------------------------------------------------------------- workers

def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("BILLIARD_LAB_WORKERS", "1")))
    except ValueError:
        return 1


def set_workers(n: int | None) -> int:
    """Set the numba thread count; results never depend on it."""
    import numba

    n = default_workers() if n is None else int(n)
    n = max(1, min(n, numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


# ---------------------------------------------------------------- helpers

def kernel_pack(table: BilliardTable):
    K = getattr(table, "_kpack", None)
    if K is None:
        if not table.all_circular:
            raise TypeError("kernel path needs a table made of exact circular arcs")
        K = kern.pack_table(table)
        object.__setattr__(table, "_kpack", K)
    return K


def arc_param(table: BilliardTable, arc: int, r: float) -> float:
    a = table.arcs[arc]
    return float(a.u_of_s(r - table.offsets[arc])[0])


def arc_r(table: BilliardTable, arc: int, u: float) -> float:
    a = table.arcs[arc]
    return float(table.offsets[arc] + a.s_of_u(u)[0])


def frame(table: BilliardTable, arc: int, u: float):
    """Point (scatterer base copy), unit tangent, normal into D, curvature."""
    a = table.arcs[arc]
    f0, f1, f2, _ = a.derivs(u)
    sp = math.hypot(*f1[0])
    t = f1[0] / sp
    n = np.array([-t[1], t[0]])
    k = -(f1[0, 0] * f2[0, 1] - f1[0, 1] * f2[0, 0]) / sp**3
    return f0[0], t, n, float(k)


def point_and_velocity(table: BilliardTable, x: CollisionPoint):
    u = arc_param(table, x.arc, x.r)
    p, t, n, _ = frame(table, x.arc, u)
    v = math.cos(x.phi) * n + math.sin(x.phi) * t
    return p, v, u


def make_point(table: BilliardTable, arc: int, u: float, phi: float) -> CollisionPoint:
    return CollisionPoint(arc_r(table, arc, u), float(phi), int(table.arc_scatterer[arc]), int(arc))


def _phi_after(table, arc, u, v):
    _, t, n, _ = frame(table, arc, u)
    return math.atan2(float(v @ t), -float(v @ n))


def _corner_neighbor(table, arc, side):
    sc = int(table.arc_scatterer[arc])
    first = int(np.flatnonzero(table.arc_scatterer == sc)[0])
    cnt = len(table.scatterers[sc].arcs)
    loc = arc - first
    nb = first + ((loc + side) % cnt)
    nb_u = table.arcs[nb].span if side < 0 else 0.0
    return nb, nb_u


def _event(table, p, v, status, arc, u, t, mx, my, side):
    if status == kern.NO_COLLISION:
        raise NoCollision(f"no collision within T_max (direction {v[0]:.6g}, {v[1]:.6g})")
    phi1 = _phi_after(table, arc, u, v)
    nxt = make_point(table, arc, u, phi1)
    disp = t * np.asarray(v, dtype=float)
    grazing = abs(phi1) >= HALF_PI - GRAZING_TOL
    if status == kern.CORNER:
        nb, nb_u = _corner_neighbor(table, arc, side)
        alt = make_point(table, nb, nb_u, _phi_after(table, nb, nb_u, v))
        ev = CollisionEvent(nxt, float(t), disp, grazing, True, 1, (nxt, alt), (mx, my))
        raise CornerHit(ev)
    return CollisionEvent(nxt, float(t), disp, grazing, False, 0, (), (mx, my))


# ---------------------------------------------------------------- generic path

def _cast_generic(table, p, v, skip, tmax):
    """Python version of the lattice march for arbitrary (cubic/bumped) arcs."""
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    boxes = getattr(table, "_gboxes", None)
    if boxes is None:
        boxes = []
        for i, sc in enumerate(table.scatterers):
            c, rad = sc.bounding_disk()
            shift = np.floor(c)
            boxes.append((c - shift, rad, shift))
        object.__setattr__(table, "_gboxes", boxes)
    cands = []
    for i, (c, rad, _) in enumerate(boxes):
        for ox in range(-2, 3):
            for oy in range(-2, 3):
                b = c + (ox, oy)
                q = np.clip(b, 0.0, 1.0)
                if math.hypot(*(b - q)) <= rad:
                    cands.append((i, ox, oy))
    first_arc = np.concatenate([[0], np.cumsum([len(s.arcs) for s in table.scatterers])])
    kx, ky = math.floor(p[0]), math.floor(p[1])
    best = (math.inf, -1, 0.0, 0, 0, 0)
    while True:
        tx = ((kx + 1 - p[0]) / v[0]) if v[0] > 0 else ((kx - p[0]) / v[0] if v[0] < 0 else math.inf)
        ty = ((ky + 1 - p[1]) / v[1]) if v[1] > 0 else ((ky - p[1]) / v[1] if v[1] < 0 else math.inf)
        t_exit = min(tx, ty)
        for s, ox, oy in cands:
            mx, my = kx + ox, ky + oy
            if skip is not None and (s, mx, my) == skip:
                continue
            c, rad, shift = boxes[s]
            w = c + (mx, my) - p
            proj = w @ v
            if proj < -rad or proj - rad > best[0] or abs(w[0] * v[1] - w[1] * v[0]) > rad:
                continue
            off = np.array([mx, my]) - shift
            has_corner = first_arc[s + 1] - first_arc[s] > 1
            for j in range(first_arc[s], first_arc[s + 1]):
                hit = _arc_ray_hit(table.arcs[j], p - off, v, has_corner)
                if hit is not None and hit[0] < best[0]:
                    best = (hit[0], j, hit[1], mx, my, hit[2])
        if best[1] >= 0 and best[0] <= t_exit:
            break
        if t_exit > tmax:
            return kern.NO_COLLISION, -1, 0.0, t_exit, 0, 0, 0
        if tx < ty:
            kx += 1 if v[0] > 0 else -1
        else:
            ky += 1 if v[1] > 0 else -1
    t, j, u, mx, my, side = best
    return (kern.CORNER if side else kern.OK), j, u, t, mx, my, side


def _arc_ray_hit(arc, p, v, has_corner, samples=256):
    """Entering intersection of the ray p + t v with an arc: (t, u, corner_side)."""
    span = arc.span
    u = np.linspace(0.0, span, samples + 1)
    f = arc.points(u)
    g = (f[:, 0] - p[0]) * v[1] - (f[:, 1] - p[1]) * v[0]

    def gfun(x):
        q = arc.points(x)[0]
        return (q[0] - p[0]) * v[1] - (q[1] - p[1]) * v[0]

    best = None
    idx = np.flatnonzero(np.sign(g[:-1]) * np.sign(g[1:]) <= 0)
    for i in idx:
        a, b = u[i], u[i + 1]
        if g[i] == 0.0:
            root = a
        elif g[i + 1] == 0.0:
            root = b
        else:
            root = brentq(gfun, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        q, f1 = arc.derivs(root)[:2]
        t = float((q[0] - p) @ v)
        if t <= 1e-12:
            continue
        tang = f1[0] / math.hypot(*f1[0])
        nrm = np.array([-tang[1], tang[0]])
        if nrm @ v > 1e-12:
            continue  # exiting
        sp = math.hypot(*f1[0])
        side = 0
        if has_corner:
            if root * sp <= CORNER_TOL:
                side = -1
            elif (span - root) * sp <= CORNER_TOL:
                side = 1
        if best is None or t < best[0]:
            best = (t, float(root), side)
    return best


# ---------------------------------------------------------------- public API

def _use_kernel(table, force_generic):
    return table.all_circular and not force_generic


def next_collision(table: BilliardTable, q, v, *, tmax: float = T_MAX,
                   force_generic: bool = False) -> CollisionEvent:
    """First boundary hit along q + t v (q in D, |v| = 1), after reflection."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    v = v / math.hypot(*v)
    shift = np.floor(q)
    p = q - shift
    if _use_kernel(table, force_generic):
        K = kernel_pack(table)
        res = kern.cast(K, p[0], p[1], v[0], v[1], -1, 0, 0, tmax)
    else:
        res = _cast_generic(table, p, v, None, tmax)
    return _event(table, p, v, *res)


def billiard_map(table: BilliardTable, x: CollisionPoint, *, tmax: float = T_MAX,
                 force_generic: bool = False) -> CollisionEvent:
    """F(x) with the free flight tau(x); raises CornerHit / NoCollision."""
    if abs(x.phi) >= HALF_PI - GRAZING_TOL:
        raise SingularityTooClose("grazing start point")
    if _use_kernel(table, force_generic):
        K = kernel_pack(table)
        u = arc_param(table, x.arc, x.r)
        px, py, th = kern.point_of(K, x.arc, u)
        vx, vy = kern.velocity_of(th, x.phi)
        res = kern.cast(K, px, py, vx, vy, int(table.arc_scatterer[x.arc]), 0, 0, tmax)
        return _event(table, np.array([px, py]), np.array([vx, vy]), *res)
    p, v, _ = point_and_velocity(table, x)
    shift = np.floor(table.scatterers[x.scatterer].bounding_disk()[0])
    res = _cast_generic(table, p - shift, v, (x.scatterer, 0, 0), tmax)
    return _event(table, p - shift, v, *res)


def involution(x: CollisionPoint) -> CollisionPoint:
    return x.reflected()


def curvature_at(table: BilliardTable, x: CollisionPoint) -> float:
    return frame(table, x.arc, arc_param(table, x.arc, x.r))[3]


def tangent_matrix(k0, k1, phi0, phi1, tau) -> np.ndarray:
    c0, c1 = math.cos(phi0), math.cos(phi1)
    return -np.array([[tau * k0 + c0, tau],
                      [tau * k0 * k1 + k0 * c1 + k1 * c0, tau * k1 + c1]]) / c1


def tangent_map(table: BilliardTable, x: CollisionPoint, *, min_cos: float = 1e-8) -> np.ndarray:
    """d(r', phi')/d(r, phi) at x."""
    if math.cos(x.phi) < min_cos:
        raise SingularityTooClose("x is (nearly) grazing")
    try:
        ev = billiard_map(table, x)
    except CornerHit as exc:
        raise SingularityTooClose("flight ends at a corner") from exc
    if math.cos(ev.next.phi) < min_cos:
        raise SingularityTooClose("F(x) is (nearly) grazing")
    return tangent_matrix(curvature_at(table, x), curvature_at(table, ev.next),
                          x.phi, ev.next.phi, ev.tau)


def finite_difference_dmap(table: BilliardTable, x: CollisionPoint, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of F in (r, phi); the image stays on x's target arc."""
    base = billiard_map(table, x).next
    cols = []
    for dr, dp in ((h, 0.0), (0.0, h)):
        plus = billiard_map(table, CollisionPoint(x.r + dr, x.phi + dp, x.scatterer, x.arc)).next
        minus = billiard_map(table, CollisionPoint(x.r - dr, x.phi - dp, x.scatterer, x.arc)).next
        if plus.arc != base.arc or minus.arc != base.arc:
            raise SingularityTooClose("finite-difference stencil crosses a singularity")
        cols.append([(plus.r - minus.r) / (2 * h), (plus.phi - minus.phi) / (2 * h)])
    return np.array(cols).T


def flight_time_bounds(table: BilliardTable, n: int = 20000, seed: int = 0) -> float:
    """Empirical minimum free flight over sampled collisions (tau_min estimate)."""
    s = sample_invariant(table, n, seed)
    res = map_batch(table, s.arc, s.u, s.phi)
    ok = res["status"] == kern.OK
    return float(res["tau"][ok].min())


# ---------------------------------------------------------------- batches

def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


def sample_arrays(table: BilliardTable, n: int, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(arc, u, phi, r) arrays of n i.i.d. draws from mu."""
    rng = _rng(rng)
    L = table.total_length
    r = rng.random(n) * L
    phi = np.arcsin(rng.uniform(-1.0, 1.0, n))
    arc = np.clip(np.searchsorted(table.offsets, r, side="right") - 1, 0, table.n_arcs - 1)
    if table.all_circular:
        R = np.array([a.radius for a in table.arcs])
        u = (r - table.offsets[arc]) / R[arc]
    else:
        u = np.empty(n)
        for j in np.unique(arc):
            m = arc == j
            u[m] = table.arcs[j].u_of_s(r[m] - table.offsets[j])
    return arc.astype(np.int64), u, phi, r


def sample_invariant(table: BilliardTable, n: int, seed=0) -> PhaseSample:
    """i.i.d. draws from the invariant measure mu ~ cos(phi) dr dphi."""
    if n < 1:
        raise ValueError("n must be >= 1")
    arc, u, phi, r = sample_arrays(table, n, seed)
    return PhaseSample(r, phi, arc, table.arc_scatterer[arc], u)


def map_batch(table: BilliardTable, arc, u, phi, tmax: float = T_MAX) -> dict:
    """Vectorized F on (arc, u, phi) arrays of a circular table."""
    K = kernel_pack(table)
    arc = np.ascontiguousarray(arc, dtype=np.int64)
    u = np.ascontiguousarray(u, dtype=np.float64)
    phi = np.ascontiguousarray(phi, dtype=np.float64)
    n = len(arc)
    out = {
        "arc": np.empty(n, np.int64), "u": np.empty(n), "phi": np.empty(n), "tau": np.empty(n),
        "mx": np.empty(n, np.int64), "my": np.empty(n, np.int64),
        "status": np.empty(n, np.int64), "side": np.empty(n, np.int64), "D": np.empty((n, 4)),
    }
    kern.step_batch(K, arc, u, phi, tmax, out["arc"], out["u"], out["phi"], out["tau"],
                    out["mx"], out["my"], out["status"], out["side"], out["D"])
    out["r"] = K[7][out["arc"]] + K[2][out["arc"]] * out["u"]
    return out


def trajectory(table: BilliardTable, x: CollisionPoint, n: int, tmax: float = T_MAX) -> dict:
    """n collisions starting at x; columns of the trajectory CSV dump."""
    K = kernel_pack(table)
    u = arc_param(table, x.arc, x.r)
    arrs = [np.empty((1, n)) for _ in range(5)]
    stat = np.empty(1, np.int64)
    kern.segments(K, np.array([x.arc]), np.array([u]), np.array([x.phi]), n, tmax,
                  *arrs, stat)
    r, phi, tau, dx, dy = (a[0] for a in arrs)
    flags = np.zeros(n, dtype=np.int64)
    if stat[0] != kern.OK:
        # find the failing step by replaying
        last = _first_failure(table, x, n, tmax)
        flags[last:] = stat[0]
        r[last + 1:] = np.nan
        phi[last + 1:] = np.nan
        tau[last:] = np.nan
        dx[last:] = np.nan
        dy[last:] = np.nan
    graze = np.abs(phi) >= HALF_PI - GRAZING_TOL
    flags[graze] |= 8
    return {"step": np.arange(n), "r": r, "phi": phi, "tau": tau, "dx": dx, "dy": dy, "flags": flags}


def _first_failure(table, x, n, tmax):
    cur = x
    for l in range(n):
        try:
            cur = billiard_map(table, cur, tmax=tmax).next
        except (CornerHit, NoCollision, SingularityTooClose):
            return l
    return n


def write_trajectory_csv(path, traj: dict) -> None:
    cols = ["step", "r", "phi", "tau", "dx", "dy", "flags"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(len(traj["step"])):
            fh.write(f"{traj['step'][i]},{traj['r'][i]!r},{traj['phi'][i]!r},{traj['tau'][i]!r},"
                     f"{traj['dx'][i]!r},{traj['dy'][i]!r},{traj['flags'][i]}\n")
