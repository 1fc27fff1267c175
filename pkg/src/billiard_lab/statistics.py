"""Monte Carlo statistics of the billiard map: correlations, CLT, flight tails.

All estimators draw orbit segments whose starting points are i.i.d. from mu.
Orbits that hit a corner, graze, or exceed the flight cap are thrown away and
redrawn; the number of such rejections is always reported.  Random numbers are
drawn per fixed-size chunk from a counter-based generator keyed by
(seed, chunk), so results do not depend on the worker count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats as sps

from . import _kernels as kern
from .dynamics import (T_MAX, CornerHit, NoCollision, SingularityTooClose, billiard_map,
                       kernel_pack, make_point, point_and_velocity, sample_arrays)
from .geometry import BilliardTable

CHUNK = 256          # orbits per chunk for long segments
TAIL_CHUNK = 200_000
MAX_REDRAWS = 1000

BUILTINS = ("cos_phi", "sin_phi", "tau_capped", "displacement_x", "custom", "coboundary", "constant")

_SAFE_NP = {name: getattr(np, name) for name in (
    "sin", "cos", "tan", "arcsin", "arccos", "arctan", "arctan2", "exp", "log", "sqrt",
    "abs", "where", "minimum", "maximum", "clip", "floor", "sign", "pi", "tanh", "cosh", "sinh")}


class FiniteHorizon(ValueError):
    """The table has no corridors, so free flights are bounded."""


# ---------------------------------------------------------------- observables

@dataclass(frozen=True)
class ObservableSpec:
    """An observable on the collision space.

    kind: cos_phi, sin_phi, tau_capped (needs ``cap``), displacement_x,
    constant (``value``), custom (``expr`` in r and phi, or a callable
    ``fn(r, phi)``), or coboundary (f - f o F for the ``base`` observable).
    """

    kind: str
    cap: float | None = None
    expr: str | None = None
    fn: Callable | None = field(default=None, compare=False)
    base: "ObservableSpec | None" = None
    value: float = 1.0
    bound: float | None = None  # user-supplied sup norm for custom observables

    def __post_init__(self):
        if self.kind not in BUILTINS:
            raise ValueError(f"unknown observable {self.kind!r}; choose from {', '.join(BUILTINS)}")
        if self.kind == "tau_capped" and not (self.cap and self.cap > 0):
            raise ValueError("tau_capped needs a positive cap")
        if self.kind == "custom" and self.expr is None and self.fn is None:
            raise ValueError("custom observables need expr or fn")
        if self.kind == "coboundary" and self.base is None:
            object.__setattr__(self, "base", ObservableSpec("cos_phi"))

    @property
    def bounded(self) -> bool:
        return self.sup_bound is not None

    @property
    def sup_bound(self) -> float | None:
        k = self.kind
        if k in ("cos_phi", "sin_phi"):
            return 1.0
        if k == "tau_capped":
            return float(self.cap)
        if k == "constant":
            return abs(self.value)
        if k == "custom":
            return self.bound
        if k == "coboundary":
            b = self.base.sup_bound
            return None if b is None else 2.0 * b
        return None  # tau and displacement are unbounded

    @property
    def needs_next(self) -> bool:
        return self.kind == "coboundary"

    def evaluate(self, r, phi, tau, dx) -> np.ndarray:
        """Values at states with coordinates (r, phi) and outgoing flight (tau, dx)."""
        k = self.kind
        if k == "cos_phi":
            return np.cos(phi)
        if k == "sin_phi":
            return np.sin(phi)
        if k == "tau_capped":
            return np.minimum(tau, self.cap)
        if k == "displacement_x":
            return np.asarray(dx, dtype=float).copy()
        if k == "constant":
            return np.full(np.shape(phi), float(self.value))
        if k == "custom":
            if self.fn is not None:
                out = self.fn(r, phi)
            else:
                out = eval(self.expr, {"__builtins__": {}}, {**_SAFE_NP, "r": r, "phi": phi})
            return np.broadcast_to(np.asarray(out, dtype=float), np.shape(phi)).copy()
        raise ValueError("coboundary values need the orbit; use values_along")

    def values_along(self, seg: dict, L: int) -> np.ndarray:
        """Values at steps 0..L-1 of orbit segments (L + 1 columns for coboundaries)."""
        if self.kind == "coboundary":
            if self.base.kind == "coboundary":
                raise ValueError("nested coboundaries are not supported")
            f = self.base.values_along(seg, L + 1)
            return f[:, :L] - f[:, 1:]
        return self.evaluate(seg["r"][:, :L], seg["phi"][:, :L], seg["tau"][:, :L], seg["dx"][:, :L])

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.cap is not None:
            d["cap"] = self.cap
        if self.expr is not None:
            d["expr"] = self.expr
        if self.kind == "constant":
            d["value"] = self.value
        if self.base is not None:
            d["base"] = self.base.to_dict()
        return d


def parse_observable(text: str) -> ObservableSpec:
    """'cos_phi', 'tau_capped:50', 'coboundary:cos_phi', 'custom:cos(phi)**2', 'constant:2'."""
    kind, _, arg = text.partition(":")
    if kind == "tau_capped":
        return ObservableSpec(kind, cap=float(arg or 100.0))
    if kind == "custom":
        return ObservableSpec(kind, expr=arg)
    if kind == "constant":
        return ObservableSpec(kind, value=float(arg or 1.0))
    if kind == "coboundary":
        return ObservableSpec(kind, base=parse_observable(arg or "cos_phi"))
    return ObservableSpec(kind)


# ---------------------------------------------------------------- orbit generation

def _chunk_rng(seed: int, tag: int, c: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), tag, c])))


def _segments_kernel(table, arc, u, phi, nsteps, tmax):
    K = kernel_pack(table)
    n = len(arc)
    arrs = [np.empty((n, nsteps)) for _ in range(5)]
    stat = np.empty(n, np.int64)
    kern.segments(K, np.ascontiguousarray(arc, dtype=np.int64), np.ascontiguousarray(u),
                  np.ascontiguousarray(phi), nsteps, tmax, *arrs, stat)
    return arrs, stat == kern.OK


def _segments_generic(table, arc, u, phi, nsteps, tmax):
    n = len(arc)
    arrs = [np.full((n, nsteps), np.nan) for _ in range(5)]
    good = np.ones(n, dtype=bool)
    for i in range(n):
        x = make_point(table, int(arc[i]), float(u[i]), float(phi[i]))
        for l in range(nsteps):
            try:
                ev = billiard_map(table, x, tmax=tmax)
            except (CornerHit, NoCollision, SingularityTooClose):
                good[i] = False
                break
            if ev.grazing:
                good[i] = False
                break
            _, v, _ = point_and_velocity(table, x)
            arrs[0][i, l], arrs[1][i, l] = x.r, x.phi
            arrs[2][i, l] = ev.tau
            arrs[3][i, l], arrs[4][i, l] = ev.tau * v[0], ev.tau * v[1]
            x = ev.next
    return arrs, good


def orbit_segments(table: BilliardTable, n: int, nsteps: int, rng, tmax: float = T_MAX):
    """n good orbit segments of nsteps collisions from mu-random starts.

    Returns (dict of (n, nsteps) arrays r, phi, tau, dx, dy; rejection count).
    """
    gen = _segments_kernel if table.all_circular else _segments_generic
    parts = []
    have = 0
    rejected = 0
    for _ in range(MAX_REDRAWS):
        need = n - have
        if need <= 0:
            break
        arc, u, phi, _r = sample_arrays(table, need, rng)
        arrs, good = gen(table, arc, u, phi, nsteps, tmax)
        rejected += int(np.count_nonzero(~good))
        parts.append([a[good] for a in arrs])
        have += int(np.count_nonzero(good))
    else:
        raise RuntimeError("too many rejected orbits; the table may trap orbits at corners")
    cols = [np.concatenate([p[k] for p in parts])[:n] for k in range(5)]
    return dict(zip(("r", "phi", "tau", "dx", "dy"), cols)), rejected


# ---------------------------------------------------------------- correlations

@dataclass
class CorrelationEstimate:
    lags: list
    values: np.ndarray
    stderr: np.ndarray
    mean: float
    variance: float
    fits: dict
    n_segments: int
    segment_length: int
    rejected: int
    observable: dict = field(default_factory=dict)

    @property
    def preferred(self) -> str | None:
        e, p = self.fits.get("exponential"), self.fits.get("power")
        if not e or not p:
            return None
        return "exponential" if e["r2"] >= p["r2"] else "power"

    def to_dict(self) -> dict:
        return {"observable": self.observable, "lags": list(map(int, self.lags)),
                "values": [float(v) for v in self.values], "stderr": [float(s) for s in self.stderr],
                "mean": float(self.mean), "variance": float(self.variance), "fits": self.fits,
                "preferred": self.preferred, "n_segments": self.n_segments,
                "segment_length": self.segment_length, "rejected": self.rejected}

    def rows(self):
        for k, v, s in zip(self.lags, self.values, self.stderr):
            yield {"lag": int(k), "value": float(v), "stderr": float(s)}


def _linfit(x, y) -> dict:
    res = sps.linregress(x, y)
    return {"slope": float(res.slope), "intercept": float(res.intercept), "r2": float(res.rvalue**2)}


def fit_decay(lags, values, stderr, window=(1, 30), nsig: float = 3.0) -> dict:
    """Fit log|C| against k (exponential) and log k (power) over significant lags.

    A lag is used if it lies in the window and |C(k)| > nsig * stderr(k); the
    fit stops at the first insignificant lag, since noise-level values carry
    no information about the decay law.
    """
    lags = np.asarray(lags)
    values = np.asarray(values)
    stderr = np.asarray(stderr)
    use = []
    for k, v, s in zip(lags, values, stderr):
        if k < window[0] or k > window[1]:
            continue
        if not abs(v) > nsig * s or v == 0:
            break
        use.append(int(k))
    out = {"window": [int(window[0]), int(window[1])], "lags_used": use}
    if len(use) < 3:
        out["exponential"] = out["power"] = None
        return out
    idx = np.searchsorted(lags, use)
    y = np.log(np.abs(values[idx]))
    e = _linfit(np.array(use, float), y)
    p = _linfit(np.log(np.array(use, float)), y)
    out["exponential"] = {"model": "exponential", "rate": -e["slope"], "r2": e["r2"]}
    out["power"] = {"model": "power", "exponent": -p["slope"], "r2": p["r2"]}
    return out


def autocorrelation(table: BilliardTable, obs: ObservableSpec, max_lag: int = 30,
                    n_samples: int = 10_000, seed: int = 0, *, segment_length: int | None = None,
                    skip: int = 0, window: tuple[int, int] | None = None) -> CorrelationEstimate:
    """C(k) = E[f f o F^k] - (E f)^2 from n_samples orbit segments.

    Each segment starts at a fresh mu-random point, is advanced ``skip`` steps,
    and then contributes ``segment_length`` values.  Centering uses the global
    sample mean; standard errors come from the spread of per-segment estimates.
    """
    L = segment_length if segment_length is not None else max(10 * max_lag, 100)
    if L <= max_lag:
        raise ValueError("segment_length must exceed max_lag")
    extra = 1 if obs.needs_next else 0
    lags = np.arange(max_lag + 1)
    P = np.empty((n_samples, max_lag + 1))
    A = np.empty_like(P)
    B = np.empty_like(P)
    total = 0.0
    rejected = 0
    c0 = None
    done = 0
    c = 0
    while done < n_samples:
        m = min(CHUNK, n_samples - done)
        seg, rej = orbit_segments(table, m, skip + L + extra, _chunk_rng(seed, 1, c))
        rejected += rej
        seg = {k: v[:, skip:] for k, v in seg.items()}
        f = obs.values_along(seg, L)
        if c0 is None:
            c0 = float(np.mean(f))
        a = f - c0
        total += float(np.sum(a))
        for k in lags:
            P[done:done + m, k] = np.mean(a[:, :L - k] * a[:, k:], axis=1)
            A[done:done + m, k] = np.mean(a[:, :L - k], axis=1)
            B[done:done + m, k] = np.mean(a[:, k:], axis=1)
        done += m
        c += 1
    delta = total / (n_samples * L)
    g = P - delta * (A + B) + delta * delta
    values = g.mean(axis=0)
    stderr = g.std(axis=0, ddof=1) / math.sqrt(n_samples) if n_samples > 1 else np.full(len(lags), np.inf)
    win = window if window is not None else (1, max_lag)
    fits = fit_decay(lags, values, stderr, win)
    return CorrelationEstimate(lags.tolist(), values, stderr, c0 + delta, float(values[0]),
                               fits, n_samples, L, rejected, obs.to_dict())


# ---------------------------------------------------------------- CLT

@dataclass
class CLTResult:
    ks_stat: float
    p_value: float
    variance_slope: float
    sigma2: float
    checkpoints: list
    variances: list
    mean: float
    n_terms: int
    n_replicas: int
    rejected: int
    observable: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"observable": self.observable, "ks_stat": self.ks_stat, "p_value": self.p_value,
                "variance_slope": self.variance_slope, "sigma2": self.sigma2,
                "checkpoints": self.checkpoints, "variances": self.variances, "mean": self.mean,
                "n_terms": self.n_terms, "n_replicas": self.n_replicas, "rejected": self.rejected}

    def rows(self):
        for n, v in zip(self.checkpoints, self.variances):
            yield {"n": n, "var_S_n": v}


def _checkpoints(n_terms: int, per_decade: int = 4) -> np.ndarray:
    top = math.log10(n_terms)
    pts = np.unique(np.round(10 ** np.arange(1.0, top, 1.0 / per_decade)).astype(int))
    return np.unique(np.concatenate([pts[pts < n_terms], [n_terms]]))


def clt_test(table: BilliardTable, obs: ObservableSpec, n_terms: int = 10_000,
             n_replicas: int = 10_000, seed: int = 0, *, fit_from: float = 0.01) -> CLTResult:
    """Normality of S_n / sqrt(n) over replicas and growth rate of Var(S_n).

    The variance slope is the log-log slope of Var(S_n) against n over the
    checkpoints n >= fit_from * n_terms.
    """
    if not obs.bounded:
        raise ValueError(f"clt_test needs a bounded observable, got {obs.kind}")
    cps = _checkpoints(n_terms)
    extra = 1 if obs.needs_next else 0
    S = np.empty((n_replicas, len(cps)))
    total = 0.0
    rejected = 0
    done = 0
    c = 0
    while done < n_replicas:
        m = min(max(1, CHUNK * 1000 // max(n_terms, 1)), n_replicas - done)
        seg, rej = orbit_segments(table, m, n_terms + extra, _chunk_rng(seed, 2, c))
        rejected += rej
        f = obs.values_along(seg, n_terms)
        cs = np.cumsum(f, axis=1)
        S[done:done + m] = cs[:, cps - 1]
        total += float(cs[:, -1].sum())
        done += m
        c += 1
    mean = total / (n_replicas * n_terms)
    Sc = S - cps[None, :] * mean
    var = Sc.var(axis=0, ddof=1)
    z = Sc[:, -1] / math.sqrt(n_terms)
    sd = float(z.std(ddof=1))
    if sd > 0:
        ks = sps.kstest(z / sd, "norm")
        ks_stat, pval = float(ks.statistic), float(ks.pvalue)
    else:
        ks_stat, pval = 1.0, 0.0
    use = (cps >= fit_from * n_terms) & (var > 0)
    slope = float(np.polyfit(np.log(cps[use]), np.log(var[use]), 1)[0]) if use.sum() >= 2 else math.nan
    return CLTResult(ks_stat, pval, slope, sd * sd, cps.tolist(), [float(v) for v in var],
                     float(mean), n_terms, n_replicas, rejected, obs.to_dict())


# ---------------------------------------------------------------- free flight tail

@dataclass
class FlightTail:
    t: np.ndarray
    tail: np.ndarray
    counts: np.ndarray
    slope: float
    intercept: float
    window: tuple
    n_samples: int
    rejected: int

    def to_dict(self) -> dict:
        return {"t": self.t.tolist(), "tail": self.tail.tolist(), "counts": self.counts.tolist(),
                "slope": self.slope, "intercept": self.intercept, "window": list(self.window),
                "n_samples": self.n_samples, "rejected": self.rejected}

    def rows(self):
        for t, p, c in zip(self.t, self.tail, self.counts):
            yield {"t": float(t), "tail": float(p), "count": int(c)}


def flight_tail(table: BilliardTable, n_samples: int = 1_000_000, seed: int = 0, *,
                t_grid=None, window: tuple[float, float] = (10.0, 1000.0),
                min_count: int = 20) -> FlightTail:
    """Empirical mu(tau > t) on a logarithmic grid and its log-log slope over the window.

    Grid points with fewer than ``min_count`` exceedances are left out of the fit.
    """
    from .corridors import find_corridors

    if not find_corridors(table, include_incipient=False):
        raise FiniteHorizon("no corridors: the free flight is bounded")
    grid = np.asarray(t_grid if t_grid is not None else np.logspace(-2, 4, 61), dtype=float)
    counts = np.zeros(len(grid), dtype=np.int64)
    rejected = 0
    done = 0
    c = 0
    while done < n_samples:
        m = min(TAIL_CHUNK, n_samples - done)
        seg, rej = orbit_segments(table, m, 1, _chunk_rng(seed, 3, c))
        rejected += rej
        tau = np.sort(seg["tau"][:, 0])
        counts += m - np.searchsorted(tau, grid, side="right")
        done += m
        c += 1
    tail = counts / n_samples
    use = (grid >= window[0]) & (grid <= window[1]) & (counts >= min_count)
    if use.sum() >= 2:
        slope, icpt = np.polyfit(np.log(grid[use]), np.log(tail[use]), 1)
    else:
        slope = icpt = math.nan
    return FlightTail(grid, tail, counts, float(slope), float(icpt), tuple(window), n_samples, rejected)
