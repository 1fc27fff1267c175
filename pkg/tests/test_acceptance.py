"""Acceptance run: one test per criterion, each printing a PASS/FAIL line.

These are the slow, full-size experiments (about half an hour on one core).
"""

import math
import time

import numpy as np
import pytest
from scipy import stats

from billiard_lab import dynamics as dyn
from billiard_lab import singularity as sing
from billiard_lab.cli import run
from billiard_lab.corridors import classify_and_check, find_corridors, make_generic
from billiard_lab.dynamics import (CornerHit, NoCollision, SingularityTooClose, billiard_map,
                                   finite_difference_dmap, involution, tangent_map)
from billiard_lab.statistics import ObservableSpec, autocorrelation, clt_test, parse_observable
from conftest import fixture_table, report
from oracles import raycast_corridors

ALL = ["circle04", "circle03", "fig1", "fig1-D1", "incipient-pair", "degenerate_a1",
       "degenerate_a2", "finite-horizon-3disk"]


def test_criterion_01_corridor_oracle():
    t0 = time.perf_counter()
    worst, same = 0.0, True
    for name in ALL:
        t = fixture_table(name)
        rays = raycast_corridors(t)
        proj = sorted((c.direction, c.width) for c in find_corridors(t, include_incipient=False))
        same &= [d for d, _ in rays] == [d for d, _ in proj]
        if same:
            worst = max([worst] + [abs(a - b) for (_, a), (_, b) in zip(rays, proj)])
    dt = time.perf_counter() - t0
    report(1, same and worst < 1e-9 and dt < 60,
           f"directions equal={same}, max width error={worst:.2e}, {dt:.1f}s on 8 fixtures")


def test_criterion_02_analytic_widths():
    w4 = sorted((c.direction, c.width) for c in find_corridors(fixture_table("circle04")))
    w3 = find_corridors(fixture_table("circle03"))
    diag = [c.width for c in w3 if c.direction in ((1, 1), (1, -1))]
    ok4 = len(w4) == 2 and all(abs(w - 0.2) < 1e-9 for _, w in w4)
    ok3 = len(w3) == 4 and len(diag) == 2 and all(abs(w - (2**-0.5 - 0.6)) < 1e-9 for w in diag)
    report(2, ok4 and ok3, f"circle04 widths={[round(w, 12) for _, w in w4]}, "
                           f"circle03 {len(w3)} corridors, diagonal={diag[0]:.12f}")


def _r_of(table, arc, u):
    K = dyn.kernel_pack(table)
    return K[7][arc] + K[2][arc] * u


@pytest.mark.parametrize("name", ["circle04", "fig1"])
def test_criterion_03_measure_invariance(name):
    t = fixture_table(name)
    n = 10**6
    arc, u, phi, _ = dyn.sample_arrays(t, n, 1)
    res = dyn.map_batch(t, arc, u, phi)
    ok = res["status"] == 0
    r1, p1 = _r_of(t, res["arc"][ok], res["u"][ok]), res["phi"][ok]
    a2, u2, p2, _ = dyn.sample_arrays(t, n, 2)
    r2 = _r_of(t, a2, u2)
    L = t.total_length
    projections = [(r1 / L, r2 / L), (np.sin(p1), np.sin(p2)),
                   ((r1 / L + 0.5 * (np.sin(p1) + 1)) % 1.0, (r2 / L + 0.5 * (np.sin(p2) + 1)) % 1.0)]
    ks = max(stats.ks_2samp(a, b).statistic for a, b in projections)
    report(3, ks < 0.005, f"{name}: max KS over r, sin(phi), mixed = {ks:.4f} "
                          f"({ok.sum()} pushed vs {n} fresh)")


def _good_points(table, n, seed):
    s = dyn.sample_invariant(table, n, seed)
    return [s[i] for i in range(n)]


@pytest.mark.parametrize("name", ["circle04", "fig1"])
def test_criterion_04_involution_and_jacobian(name):
    t = fixture_table(name)
    worst_inv = worst_jac = 0.0
    count = 0
    for x in _good_points(t, 12000, 4):
        try:
            ev = billiard_map(t, x)
            if ev.grazing:
                continue
            z = billiard_map(t, involution(ev.next)).next
            D = tangent_map(t, x)
        except (CornerHit, NoCollision, SingularityTooClose):
            continue
        back = involution(z)
        worst_inv = max(worst_inv, abs(back.r - x.r), abs(back.phi - x.phi))
        lhs = abs(np.linalg.det(D)) * math.cos(ev.next.phi)
        worst_jac = max(worst_jac, abs(lhs - math.cos(x.phi)) / math.cos(x.phi))
        count += 1
        if count == 10**4:
            break
    report(4, count == 10**4 and worst_inv < 1e-9 and worst_jac < 1e-8,
           f"{name}: {count} points, max (IF)^2 error={worst_inv:.2e}, "
           f"max relative Jacobian error={worst_jac:.2e}")


@pytest.mark.parametrize("name", ["circle04", "fig1"])
def test_criterion_05_tangent_map_oracle(name):
    t = fixture_table(name)
    worst, count, worst_x = 0.0, 0, None
    for x in _good_points(t, 2000, 5):
        try:
            D = tangent_map(t, x)
            F = finite_difference_dmap(t, x)
        except (CornerHit, NoCollision, SingularityTooClose):
            continue
        err = np.max(np.abs(D - F)) / np.max(np.abs(D))
        if err > worst:
            worst, worst_x = err, x
        count += 1
        if count == 1000:
            break
    # at the worst point, halve the step and extrapolate: an O(h^2) oracle error
    # drops 4x and vanishes under Richardson, an error in DF would not
    D = tangent_map(t, worst_x)
    F1, F2 = finite_difference_dmap(t, worst_x, 1e-6), finite_difference_dmap(t, worst_x, 5e-7)
    rel = lambda M: np.max(np.abs(D - M)) / np.max(np.abs(D))
    report(5, count == 1000 and worst < 1e-5,
           f"{name}: {count} points, step 1e-6, max relative error={worst:.2e}; worst point "
           f"at step 5e-7 {rel(F2):.2e}, Richardson {rel((4 * F2 - F1) / 3):.2e}")


def test_criterion_06_cell_scaling():
    c4 = fixture_table("circle04")
    d = sing.probe_cell_geometry(c4, sing.boundary_point_ids(c4, "regular")[0])
    f1 = fixture_table("fig1")
    e = sing.probe_cell_geometry(f1, sing.boundary_point_ids(f1, "corner")[0])
    d1t = fixture_table("fig1-D1")
    d1 = sing.probe_cell_geometry(d1t, sing.boundary_point_ids(d1t, "regular")[0])
    spread = max(d.ratio_spread, d1.ratio_spread)
    ok = (abs(d.slope_unstable + 2) <= 0.15 and abs(d.slope_stable + 0.5) <= 0.1
          and abs(e.slope_unstable + 2) <= 0.15 and abs(e.slope_stable + 1) <= 0.15
          and spread <= 10.0)
    report(6, ok, f"D: {d.slope_unstable:.3f}/{d.slope_stable:.3f}, "
                  f"E: {e.slope_unstable:.3f}/{e.slope_stable:.3f}, "
                  f"expansion/(n k^2) spread {spread:.2f}")


@pytest.mark.parametrize("name", ["circle04", "fig1"])
def test_criterion_07_flight_growth(name):
    t = fixture_table(name)
    const = sing.fit_flight_growth(t, n_train=2000, seed=0)
    res = sing.flight_growth_validate(t, const, n=10**4, seed=1)
    report(7, res["fraction_ok"] == 1.0,
           f"{name}: C={const.C:.3g}, {res['fraction_ok'] * 100:.2f}% of 10^4 fresh points "
           f"(case 1: {res['case1']}, case 2: {res['case2']})")


@pytest.mark.parametrize("name", ["circle04", "fig1"])
def test_criterion_08_fragment_length_law(name):
    law = sing.fragment_length_law(fixture_table(name))
    ratios = [row["max_ratio"] for row in law["rows"]]
    # bounded by one constant: no growth of the ratio as |W| shrinks
    ok = all(b <= 2.0 * a for a, b in zip(ratios, ratios[1:]))
    report(8, ok, f"{name}: max |W'|/|W|^(1/3) per |W| = {[round(x, 3) for x in ratios]}, "
                  f"C = {law['C']:.3g}, length exponent {law['length_exponent']:.2f}")


def test_criterion_09_m_step_expansion():
    t = fixture_table("fig1-D1")
    m0, est, last = sing.find_m0(t, 1e-5, trials=1000, m_max=10, seed=0)
    ok = m0 is not None
    detail = f"m0={m0}, estimates by m={[round(x, 3) for x in est]}"
    if ok:
        by_delta = []
        for delta in (1e-3, 1e-4, 1e-5):
            # find_m0 already ran m0 on the delta=1e-5 sample
            res = last if delta == 1e-5 else sing.expansion_sup(t, m0, delta, trials=1000, seed=0)
            vals = res.values[np.isfinite(res.values)]
            # sampling error of the sup: spread of the top order statistics
            top = np.sort(vals)[-5:]
            by_delta.append((res.estimate, float(top[-1] - top[0])))
        ok = all(b[0] <= a[0] + a[1] + b[1] for a, b in zip(by_delta, by_delta[1:]))
        detail += f"; sup at m0 for delta 1e-3,1e-4,1e-5 = {[round(e, 4) for e, _ in by_delta]}"
    report(9, ok, detail)


def test_criterion_10_zq_contraction():
    t = fixture_table("fig1")
    exp = sing.zq_contraction_experiment(t, q=0.5, M=40, delta0=1e-5, trials=200, seed=7)
    row = next((s for s in exp.stats() if s["M"] == exp.M_star), None)
    h = sing.boundary_point_ids(t, "corner")[0]
    one = sing.expansion0_check(t, h)
    r = np.array([float(x["ratio"]) for x in one])
    uniform = r.max() / r.min() <= 4.0
    ok = exp.M_star is not None and exp.M_star <= 40 and uniform
    zs = f"M*={exp.M_star}" + (f", median={row['median']:.3f}, p95={row['p95']:.3f}" if row else "")
    report(10, ok, f"{zs}; one-step Z1 ratios over n={[x['n'] for x in one]}: "
                   f"{[round(float(x), 3) for x in r]}")


def test_criterion_11_genericity_workflow():
    eps = 0.1
    parts, ok = [], True
    for name in ("degenerate_a1", "degenerate_a2", "incipient-pair"):
        t = fixture_table(name)
        before = classify_and_check(t).ok
        res = make_generic(t, eps)
        ok &= (not before) and res.ok and res.cumulative_distance < eps
        parts.append(f"{name}: {len(res.steps)} steps, d={res.cumulative_distance:.4f}")
    report(11, ok, f"eps={eps}; " + "; ".join(parts))


def test_criterion_12_statistics():
    lines, ok = [], True
    for name in ("circle04", "fig1"):
        t = fixture_table(name)
        est = autocorrelation(t, ObservableSpec("cos_phi"), max_lag=30, n_samples=10**4,
                              seed=0, segment_length=1000)
        fe, fp = est.fits["exponential"], est.fits["power"]
        good = fe is not None and fp is not None and fe["r2"] - fp["r2"] > 0.05
        ok &= good
        lines.append(f"{name} corr: exp R2={fe and round(fe['r2'], 3)}, "
                     f"power R2={fp and round(fp['r2'], 3)}, "
                     f"resolved lags={est.fits.get('lags_used')}")
        clt = clt_test(t, ObservableSpec("cos_phi"), n_terms=10**4, n_replicas=10**4, seed=0)
        ok &= clt.ks_stat < 0.03
        lines.append(f"{name} CLT KS={clt.ks_stat:.4f}, Var slope={clt.variance_slope:.3f}")
    cob = clt_test(fixture_table("circle04"), parse_observable("coboundary:cos_phi"),
                   n_terms=10**4, n_replicas=10**4, seed=0)
    ok &= abs(cob.variance_slope) < 0.1
    lines.append(f"coboundary Var slope={cob.variance_slope:.3f}")
    report(12, ok, "; ".join(lines))


COMMANDS = [
    ["validate", "--table", "fig1"],
    ["corridors", "--table", "fig1"],
    ["cells", "--table", "circle04", "--h", "0", "--n-count", "4"],
    ["expansion", "--table", "fig1-D1", "--delta", "1e-5", "--trials", "20", "--m-max", "3"],
    ["zq", "--table", "fig1", "--q", "0.5", "--M", "2", "--trials", "10", "--seed", "7"],
    ["correlate", "--table", "fig1", "--lags", "10", "--samples", "500", "--segment-length", "200"],
    ["clt", "--table", "circle04", "--n-terms", "500", "--replicas", "500"],
    ["tail", "--table", "circle04", "--samples", "100000"],
    ["perturb", "--table", "degenerate_a2", "--eps", "0.1"],
]


def test_criterion_13_determinism(tmp_path):
    bad = []
    for argv in COMMANDS:
        outs = []
        for rep in ("a", "b"):
            d = tmp_path / f"{argv[0]}-{rep}"
            run([*argv, "--seed", "3", "--workers", "1", "--out", str(d), "--quiet"]
                if "--seed" not in argv else [*argv, "--workers", "1", "--out", str(d), "--quiet"])
            outs.append({p.name: p.read_bytes() for p in d.iterdir() if p.name != "run.log"})
        if outs[0] != outs[1] or not outs[0]:
            bad.append(argv[0])
    report(13, not bad, f"{len(COMMANDS)} commands rerun; differing outputs: {bad or 'none'}")
