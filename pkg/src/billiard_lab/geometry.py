"""Admissible billiard tables on the unit torus.

A table is a finite list of scatterers.  Each scatterer boundary is a closed
chain of strictly convex arcs traversed clockwise, so that the billiard domain
D lies to the left of the direction of travel.  Arcs are circular or cubic
parametric curves; either may carry smooth "bumps" (local normal displacements)
produced by the local enlargement operation in :mod:`billiard_lab.corridors`.

Arc-length coordinates: arc j of scatterer i occupies ``[a_ij, b_ij)`` and the
intervals are laid end to end in scatterer/arc order.  A junction value of r
belongs to the arc that starts there.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

# admissibility tolerances
CUSP_TOL = 1e-6
JOIN_TOL = 1e-9
SMOOTH_JOIN_TOL = 1e-8
DISJOINT_TOL = 1e-9
CURVATURE_GRID = 1024
LENGTH_RTOL = 1e-9


class AdmissibilityError(ValueError):
    """Base class for rejected table configurations."""


class CuspDetected(AdmissibilityError):
    pass


class NonConvexArc(AdmissibilityError):
    pass


class OverlappingScatterers(AdmissibilityError):
    pass


class OpenBoundaryChain(AdmissibilityError):
    pass


class DegenerateCorner(AdmissibilityError):
    """A tangent-continuous junction whose 2nd and 3rd derivatives also agree."""


class BadOrientation(AdmissibilityError):
    pass


class OutOfRange(ValueError):
    pass


# ---------------------------------------------------------------- bumps

def bump_profile(s):
    """C-infinity bump b(s) = exp(1 - 1/(1-s)) on s < 1 and its s-derivatives.

    ``s`` is the squared normalized distance |x - p|^2 / rho^2, so the support
    in space is the open disk of radius rho.  Returns (b, b', b'', b''').
    """
    s = np.asarray(s, dtype=float)
    inside = s < 1.0
    g = np.where(inside, 1.0 - s, 1.0)
    v = 1.0 - 1.0 / g
    b = np.where(inside, np.exp(v), 0.0)
    v1 = -1.0 / g**2
    v2 = -2.0 / g**3
    v3 = -6.0 / g**4
    b1 = b * v1
    b2 = b * (v2 + v1 * v1)
    b3 = b * (v3 + 3.0 * v1 * v2 + v1**3)
    return b, b1, b2, b3


@dataclass(frozen=True)
class Bump:
    """Displacement field x -> amplitude * b(|x-center|^2/radius^2) * direction."""

    center: tuple[float, float]
    radius: float
    amplitude: float
    direction: tuple[float, float]

    def to_dict(self) -> dict:
        return {"center": list(self.center), "radius": self.radius,
                "amplitude": self.amplitude, "direction": list(self.direction)}

    @classmethod
    def from_dict(cls, d: dict) -> "Bump":
        return cls(tuple(float(c) for c in d["center"]), float(d["radius"]),
                   float(d["amplitude"]), tuple(float(c) for c in d["direction"]))


def _apply_bumps(bumps, f0, f1, f2, f3):
    """Add bump displacements to a base curve given with three derivatives.

    All arrays have shape (n, 2); derivatives are w.r.t. the native parameter.
    """
    if not bumps:
        return f0, f1, f2, f3
    g0, g1, g2, g3 = f0.copy(), f1.copy(), f2.copy(), f3.copy()
    for bp in bumps:
        p = np.asarray(bp.center)
        d = np.asarray(bp.direction)
        rho2 = bp.radius**2
        w = f0 - p
        s = np.einsum("ij,ij->i", w, w) / rho2
        if not np.any(s < 1.0):
            continue
        s1 = 2.0 * np.einsum("ij,ij->i", w, f1) / rho2
        s2 = 2.0 * (np.einsum("ij,ij->i", f1, f1) + np.einsum("ij,ij->i", w, f2)) / rho2
        s3 = 2.0 * (3.0 * np.einsum("ij,ij->i", f1, f2) + np.einsum("ij,ij->i", w, f3)) / rho2
        b0, b1, b2, b3 = bump_profile(s)
        h0 = b0
        h1 = b1 * s1
        h2 = b2 * s1**2 + b1 * s2
        h3 = b3 * s1**3 + 3.0 * b2 * s1 * s2 + b1 * s3
        A = bp.amplitude
        g0 += A * h0[:, None] * d
        g1 += A * h1[:, None] * d
        g2 += A * h2[:, None] * d
        g3 += A * h3[:, None] * d
    return g0, g1, g2, g3


# ---------------------------------------------------------------- arcs

_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


class BoundaryArc:
    """Common interface: native parameter u in [0, span]."""

    kind: str
    bumps: tuple[Bump, ...]

    @property
    def span(self) -> float:
        raise NotImplementedError

    def _base(self, u):
        raise NotImplementedError

    def derivs(self, u):
        """Position and first three derivatives in the native parameter."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return _apply_bumps(self.bumps, *self._base(u))

    def points(self, u):
        return self.derivs(u)[0]

    def curvature(self, u):
        _, f1, f2, _ = self.derivs(u)
        cross = f1[:, 0] * f2[:, 1] - f1[:, 1] * f2[:, 0]
        speed = np.hypot(f1[:, 0], f1[:, 1])
        # clockwise traversal of a convex body turns right
        return -cross / speed**3

    def speed(self, u):
        f1 = self.derivs(u)[1]
        return np.hypot(f1[:, 0], f1[:, 1])

    @property
    def is_exact_circle(self) -> bool:
        return False

    # arclength <-> parameter, built lazily
    def _length_table(self):
        tab = getattr(self, "_ltab", None)
        if tab is None:
            panels = 512
            edges = np.linspace(0.0, self.span, panels + 1)
            half = 0.5 * (edges[1:] - edges[:-1])
            mid = 0.5 * (edges[1:] + edges[:-1])
            nodes = (mid[:, None] + half[:, None] * _GL_X[None, :]).ravel()
            sp = self.speed(nodes).reshape(panels, -1)
            seg = (sp * _GL_W[None, :]).sum(axis=1) * half
            cum = np.concatenate([[0.0], np.cumsum(seg)])
            tab = (edges, cum)
            object.__setattr__(self, "_ltab", tab)
        return tab

    @property
    def length(self) -> float:
        if self.is_exact_circle:
            return self.radius * self.span
        return float(self._length_table()[1][-1])

    def u_of_s(self, s):
        """Native parameter at arclength s from the arc start."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if self.is_exact_circle:
            return s / self.radius
        edges, cum = self._length_table()
        u = np.interp(s, cum, edges)
        for _ in range(4):  # Newton on s(u) = s
            err = self.s_of_u(u) - s
            u = np.clip(u - err / self.speed(u), 0.0, self.span)
        return u

    def s_of_u(self, u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if self.is_exact_circle:
            return u * self.radius
        edges, cum = self._length_table()
        idx = np.clip(np.searchsorted(edges, u, side="right") - 1, 0, len(edges) - 2)
        lo = edges[idx]
        half = 0.5 * (u - lo)
        mid = 0.5 * (u + lo)
        nodes = mid[:, None] + half[:, None] * _GL_X[None, :]
        sp = self.speed(nodes.ravel()).reshape(nodes.shape)
        return cum[idx] + (sp * _GL_W[None, :]).sum(axis=1) * half


@dataclass(frozen=True, eq=False)
class CircleArc(BoundaryArc):
    """Clockwise circular arc from angle theta0 to theta1 (theta = theta0 - u)."""

    center: tuple[float, float]
    radius: float
    theta0: float
    theta1: float
    bumps: tuple[Bump, ...] = ()
    kind: str = field(default="circle", init=False)

    @property
    def span(self) -> float:
        d = self.theta0 - self.theta1
        if d > 0 and d <= TWO_PI * (1 + 1e-15):
            return min(d, TWO_PI)
        m = d % TWO_PI
        return m if m > 0 else TWO_PI

    @property
    def is_exact_circle(self) -> bool:
        return not self.bumps

    def _base(self, u):
        th = self.theta0 - u
        c, s = np.cos(th), np.sin(th)
        R = self.radius
        cx, cy = self.center
        f0 = np.stack([cx + R * c, cy + R * s], axis=1)
        f1 = np.stack([R * s, -R * c], axis=1)
        f2 = np.stack([-R * c, -R * s], axis=1)
        f3 = np.stack([-R * s, R * c], axis=1)
        return f0, f1, f2, f3

    def to_dict(self) -> dict:
        return {"kind": "circle", "center": list(self.center), "radius": self.radius,
                "theta0": self.theta0, "theta1": self.theta1}

    def with_bumps(self, bumps) -> "CircleArc":
        return CircleArc(self.center, self.radius, self.theta0, self.theta1, tuple(bumps))

    def same_shape(self, other) -> bool:
        return isinstance(other, CircleArc)


@dataclass(frozen=True, eq=False)
class CubicArc(BoundaryArc):
    """Cubic parametric arc t -> (sum cx[i] t^i, sum cy[i] t^i), t in [0, 1]."""

    cx: tuple[float, float, float, float]
    cy: tuple[float, float, float, float]
    bumps: tuple[Bump, ...] = ()
    kind: str = field(default="cubic", init=False)

    @property
    def span(self) -> float:
        return 1.0

    def _base(self, u):
        out = []
        for coef in (self.cx, self.cy):
            p = np.polynomial.Polynomial(coef)
            out.append([p(u), p.deriv(1)(u), p.deriv(2)(u), p.deriv(3)(u) + 0 * u])
        return tuple(np.stack([out[0][k], out[1][k]], axis=1) for k in range(4))

    def to_dict(self) -> dict:
        return {"kind": "cubic", "cx": list(self.cx), "cy": list(self.cy)}

    def with_bumps(self, bumps) -> "CubicArc":
        return CubicArc(self.cx, self.cy, tuple(bumps))

    def same_shape(self, other) -> bool:
        return isinstance(other, CubicArc)


def arc_from_dict(d: dict, bumps=()) -> BoundaryArc:
    kind = d.get("kind")
    if kind == "circle":
        return CircleArc(tuple(float(c) for c in d["center"]), float(d["radius"]),
                         float(d["theta0"]), float(d["theta1"]), tuple(bumps))
    if kind == "cubic":
        cx, cy = d["cx"], d["cy"]
        if len(cx) != 4 or len(cy) != 4:
            raise ValueError("cubic arcs need 4 coefficients per coordinate")
        return CubicArc(tuple(float(c) for c in cx), tuple(float(c) for c in cy), tuple(bumps))
    raise ValueError(f"unknown arc kind {kind!r}")


# ---------------------------------------------------------------- scatterers

@dataclass(frozen=True)
class Corner:
    """Junction between arc ``arc_in`` (ending) and ``arc_out`` (starting)."""

    point: tuple[float, float]
    arc_in: int
    arc_out: int
    gamma: float  # interior angle of D at the corner, in (0, 2 pi)
    tangent_in: tuple[float, float]   # unit tangent of arc_in at its end
    tangent_out: tuple[float, float]  # unit tangent of arc_out at its start


@dataclass(frozen=True, eq=False)
class Scatterer:
    arcs: tuple[BoundaryArc, ...]
    bumps: tuple[Bump, ...] = ()
    corners: tuple[Corner, ...] = ()

    def boundary_samples(self, per_arc: int = 512) -> np.ndarray:
        pts = []
        for arc in self.arcs:
            u = np.linspace(0.0, arc.span, per_arc, endpoint=False)
            pts.append(arc.points(u))
        return np.concatenate(pts)

    def bounding_disk(self) -> tuple[np.ndarray, float]:
        pts = self.boundary_samples(256)
        c = 0.5 * (pts.max(axis=0) + pts.min(axis=0))
        rad = float(np.max(np.hypot(*(pts - c).T)))
        # chord sampling can miss a sliver of the curve; pad generously
        return c, rad * (1 + 1e-3) + 1e-6


def _corner_angle(t_in, t_out) -> float:
    """Angle inside D between the two one-sided tangent rays at a junction."""
    a_back = math.atan2(-t_in[1], -t_in[0])
    a_fwd = math.atan2(t_out[1], t_out[0])
    return (a_back - a_fwd) % TWO_PI


# ---------------------------------------------------------------- table

@dataclass(frozen=True, eq=False)
class BilliardTable:
    scatterers: tuple[Scatterer, ...]
    kappa_max: float
    kappa_min: float
    alpha0: float
    offsets: np.ndarray  # a_ij flattened, plus the total length at the end
    arc_scatterer: np.ndarray
    name: str = ""
    config: dict = field(default_factory=dict, repr=False)

    @property
    def arcs(self) -> list[BoundaryArc]:
        return [a for sc in self.scatterers for a in sc.arcs]

    @property
    def n_arcs(self) -> int:
        return len(self.arc_scatterer)

    @property
    def total_length(self) -> float:
        return float(self.offsets[-1])

    @property
    def all_circular(self) -> bool:
        return all(a.is_exact_circle for a in self.arcs)

    def arc_interval(self, j: int) -> tuple[float, float]:
        return float(self.offsets[j]), float(self.offsets[j + 1])

    def arc_of_r(self, r: float) -> int:
        if not (0.0 <= r <= self.total_length):
            raise OutOfRange(f"r={r} outside [0, {self.total_length}]")
        j = int(np.searchsorted(self.offsets, r, side="right") - 1)
        return min(j, self.n_arcs - 1)

    def to_dict(self) -> dict:
        return self.config

    def __reduce__(self):  # pickle through the config so worker copies stay cheap
        return (build_table, (self.config,))


def table_from_json(text: str) -> BilliardTable:
    return build_table(json.loads(text))


def table_to_json(table: BilliardTable) -> str:
    return json.dumps(table.to_dict(), indent=2)


def load_table(path) -> BilliardTable:
    with open(path) as fh:
        return table_from_json(fh.read())


def save_table(table: BilliardTable, path) -> None:
    with open(path, "w") as fh:
        fh.write(table_to_json(table))


def build_table(spec: dict, *, alpha_min: float = CUSP_TOL) -> BilliardTable:
    """Parse and validate a table configuration."""
    if "scatterers" not in spec or not spec["scatterers"]:
        raise ValueError("table config needs a non-empty 'scatterers' list")
    scatterers = []
    for sd in spec["scatterers"]:
        bumps = tuple(Bump.from_dict(b) for b in sd.get("bumps", []))
        arcs = tuple(arc_from_dict(ad, bumps) for ad in sd["arcs"])
        if not arcs:
            raise OpenBoundaryChain("scatterer without arcs")
        scatterers.append(_validate_scatterer(arcs, bumps, alpha_min))
    kmax, kmin = -np.inf, np.inf
    for sc in scatterers:
        for arc in sc.arcs:
            k = _checked_curvature(arc)
            kmax = max(kmax, float(k.max()))
            kmin = min(kmin, float(k.min()))
    _check_disjoint(scatterers)
    lengths = [arc.length for sc in scatterers for arc in sc.arcs]
    offsets = np.concatenate([[0.0], np.cumsum(lengths)])
    arc_sc = np.array([i for i, sc in enumerate(scatterers) for _ in sc.arcs], dtype=np.int64)
    alpha0 = math.inf
    for sc in scatterers:
        for c in sc.corners:
            alpha0 = min(alpha0, c.gamma, TWO_PI - c.gamma)
    return BilliardTable(tuple(scatterers), kmax, kmin, alpha0, offsets, arc_sc,
                         name=str(spec.get("name", "")), config=spec)


def _checked_curvature(arc: BoundaryArc) -> np.ndarray:
    u = np.linspace(0.0, arc.span, CURVATURE_GRID + 1)
    k = arc.curvature(u)
    if not np.all(np.isfinite(k)) or k.min() <= 0:
        raise NonConvexArc(f"{arc.kind} arc has non-positive curvature (min {k.min():.3g})")
    # between grid points kappa can dip by at most max|dk| (difference bound)
    dk = np.max(np.abs(np.diff(k)))
    if k.min() - dk <= 0:
        fine = np.linspace(0.0, arc.span, 16 * CURVATURE_GRID + 1)
        kf = arc.curvature(fine)
        if kf.min() - np.max(np.abs(np.diff(kf))) <= 0:
            raise NonConvexArc(f"{arc.kind} arc curvature not bounded away from 0")
    return k


def _validate_scatterer(arcs, bumps, alpha_min) -> Scatterer:
    n = len(arcs)
    corners = []
    if n == 1:
        a = arcs[0]
        f_end = a.derivs(a.span)
        f_start = a.derivs(0.0)
        if np.hypot(*(f_end[0][0] - f_start[0][0])) > JOIN_TOL:
            raise OpenBoundaryChain("single arc does not close")
    for j in range(n):
        a, b = arcs[j], arcs[(j + 1) % n]
        ea = a.derivs(a.span)
        sb = b.derivs(0.0)
        gap = float(np.hypot(*(ea[0][0] - sb[0][0])))
        if gap > JOIN_TOL:
            raise OpenBoundaryChain(f"arcs {j} and {(j + 1) % n} do not meet (gap {gap:.3g})")
        t_in = ea[1][0] / np.hypot(*ea[1][0])
        t_out = sb[1][0] / np.hypot(*sb[1][0])
        gamma = _corner_angle(t_in, t_out)
        if abs(gamma - math.pi) < SMOOTH_JOIN_TOL:
            # tangent-continuous: must still be a genuine junction
            ka, kb = a.curvature(a.span)[0], b.curvature(0.0)[0]
            dka = _dkappa_ds(a, a.span)
            dkb = _dkappa_ds(b, 0.0)
            if n > 1 and abs(ka - kb) < SMOOTH_JOIN_TOL and abs(dka - dkb) < SMOOTH_JOIN_TOL:
                raise DegenerateCorner(f"junction {j} is C3-smooth; merge the arcs")
            if n == 1:
                continue
        if gamma < max(alpha_min, CUSP_TOL) or gamma > TWO_PI - CUSP_TOL:
            raise CuspDetected(f"corner angle {gamma:.3g} at junction {j}")
        if gamma < math.pi - SMOOTH_JOIN_TOL:
            raise NonConvexArc(f"convex corner (angle {gamma:.3g} < pi) at junction {j}")
        corners.append(Corner(tuple(ea[0][0]), j, (j + 1) % n, gamma, tuple(t_in), tuple(t_out)))
    sc = Scatterer(tuple(arcs), tuple(bumps), tuple(corners))
    pts = sc.boundary_samples(256)
    x, y = pts[:, 0], pts[:, 1]
    area2 = np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    if area2 >= 0:
        raise BadOrientation("scatterer boundary must be traversed clockwise")
    return sc


def _dkappa_ds(arc: BoundaryArc, u: float) -> float:
    h = 1e-5 * arc.span
    u0 = min(max(u, h), arc.span - h)
    k = arc.curvature(np.array([u0 - h, u0 + h]))
    return float((k[1] - k[0]) / (2 * h) / arc.speed(u0)[0])


def _check_disjoint(scatterers) -> None:
    from scipy.spatial import cKDTree
    from shapely.geometry import Polygon

    samples = [sc.boundary_samples(512) for sc in scatterers]
    polys = [Polygon(s) for s in samples]
    for i, si in enumerate(samples):
        if not polys[i].is_valid:
            raise OverlappingScatterers(f"scatterer {i} boundary self-intersects")
        tree = cKDTree(si)
        for j in range(i, len(samples)):
            for mx in (-1, 0, 1):
                for my in (-1, 0, 1):
                    if i == j and mx == 0 and my == 0:
                        continue
                    sj = samples[j] + np.array([mx, my])
                    dist, _ = tree.query(sj, k=1)
                    pj = Polygon(sj)
                    if dist.min() <= DISJOINT_TOL or polys[i].intersects(pj):
                        raise OverlappingScatterers(
                            f"scatterers {i} and {j}+({mx},{my}) overlap or touch")


# ---------------------------------------------------------------- queries

@dataclass(frozen=True)
class BoundaryPoint:
    point: np.ndarray
    tangent: np.ndarray
    normal: np.ndarray
    curvature: float
    arc: int


def boundary_point(table: BilliardTable, r: float) -> BoundaryPoint:
    """Torus point, clockwise tangent, normal into D and curvature at r."""
    j = table.arc_of_r(r)
    arc = table.arcs[j]
    s = r - table.offsets[j]
    u = arc.u_of_s(s)
    f0, f1, f2, _ = arc.derivs(u)
    t = f1[0] / np.hypot(*f1[0])
    nrm = np.array([-t[1], t[0]])
    k = float(arc.curvature(u)[0])
    return BoundaryPoint(np.mod(f0[0], 1.0), t, nrm, k, j)


def table_distance(t1: BilliardTable, t2: BilliardTable, grid: int = 513) -> float:
    """Upper bound for the C^3 distance between two tables.

    Each arc is compared on a common normalized parameter in [0, 1].  Derivatives
    are taken in the natural parameter of the first table's arc, so for
    concentric circles of radii r and r' the value is |r - r'|.
    """
    if len(t1.scatterers) != len(t2.scatterers):
        return math.inf
    for s1, s2 in zip(t1.scatterers, t2.scatterers):
        if len(s1.arcs) != len(s2.arcs):
            return math.inf
        if any(not a.same_shape(b) for a, b in zip(s1.arcs, s2.arcs)):
            return math.inf
    w = np.linspace(0.0, 1.0, grid)
    worst = 0.0
    for a1, a2 in zip(t1.arcs, t2.arcs):
        S1, S2 = a1.span, a2.span
        d1 = a1.derivs(w * S1)
        d2 = a2.derivs(w * S2)
        for k in range(4):
            # k-th derivative w.r.t. the first arc's native parameter
            diff = d1[k] - d2[k] * (S2 / S1) ** k
            worst = max(worst, float(np.max(np.hypot(diff[:, 0], diff[:, 1]))))
    return worst


def tables_equal(t1: BilliardTable, t2: BilliardTable) -> bool:
    return json.dumps(t1.to_dict(), sort_keys=True) == json.dumps(t2.to_dict(), sort_keys=True)


def curvilinear_polygon(vertices: Sequence[Sequence[float]], bulges: Sequence[float]) -> dict:
    """Scatterer config with circular arcs joining clockwise-ordered vertices.

    ``bulges[j]`` is the angle between the chord from vertex j to j+1 and the
    arc's tangent at its endpoints (0 < bulge < pi/2).
    """
    V = [np.asarray(v, dtype=float) for v in vertices]
    arcs = []
    for j, beta in enumerate(bulges):
        P, Q = V[j], V[(j + 1) % len(V)]
        chord = Q - P
        L = float(np.hypot(*chord))
        R = L / (2 * math.sin(beta))
        right = np.array([chord[1], -chord[0]]) / L
        C = 0.5 * (P + Q) + right * R * math.cos(beta)
        th0 = math.atan2(P[1] - C[1], P[0] - C[0])
        arcs.append({"kind": "circle", "center": [float(C[0]), float(C[1])], "radius": R,
                     "theta0": th0, "theta1": th0 - 2 * beta})
    return {"arcs": arcs}
