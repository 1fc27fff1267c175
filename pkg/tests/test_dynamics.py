import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from billiard_lab import dynamics as dyn
from billiard_lab.dynamics import (CollisionPoint, CornerHit, NoCollision, SingularityTooClose,
                                   billiard_map, finite_difference_dmap, involution, make_point,
                                   next_collision, sample_invariant, tangent_map)
from conftest import fixture_table


def test_normal_incidence_on_translate(circle04):
    ev = next_collision(circle04, (0.05, 0.5), (-1.0, 0.0))
    assert ev.tau == pytest.approx(0.15, abs=1e-12)
    p, v, _ = dyn.point_and_velocity(circle04, ev.next)
    assert np.allclose(v, [1.0, 0.0], atol=1e-12)
    assert ev.lattice_jump == (-1, 0)
    assert np.hypot(*ev.displacement) == pytest.approx(ev.tau)


def test_corridor_ray_reaches_cap(fig1):
    with pytest.raises(NoCollision):
        next_collision(fig1, (0.3, 0.54), (1.0, 0.0), tmax=1e4)


def test_grazing_flag_on_corridor_line(circle04):
    ev = next_collision(circle04, (0.05, 0.9), (1.0, 0.0))
    assert ev.grazing
    assert abs(ev.next.phi) == pytest.approx(math.pi / 2, abs=1e-6)


def test_diameter_orbit(circle04):
    x = make_point(circle04, 0, 0.0, 0.0)  # leftmost point
    ev = billiard_map(circle04, x)
    assert ev.tau == pytest.approx(0.2, abs=1e-12)
    assert ev.next.r == pytest.approx(math.pi * 0.4, abs=1e-12)  # rightmost point
    assert ev.next.phi == pytest.approx(0.0, abs=1e-12)
    D = tangent_map(circle04, x)
    assert abs(np.linalg.det(D)) == pytest.approx(1.0, rel=1e-12)


def test_grazing_start_rejected(circle04):
    with pytest.raises(SingularityTooClose):
        billiard_map(circle04, CollisionPoint(0.1, math.pi / 2, 0, 0))


def test_corner_hit_reports_both_branches(fig1):
    corner = np.array(fig1.scatterers[0].corners[0].point)
    q = corner + np.array([0.0, 0.2])
    v = corner - q
    v /= np.hypot(*v)
    with pytest.raises(CornerHit) as info:
        next_collision(fig1, q, v)
    ev = info.value.event
    assert ev.corner_hit and len(ev.branches) == 2
    assert ev.branches[0].arc != ev.branches[1].arc


def _random_points(table, n, seed):
    s = sample_invariant(table, n, seed)
    return [s[i] for i in range(n)]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["circle04", "circle03", "fig1", "fig1-D1"]))
def test_time_reversal(seed, name):
    t = fixture_table(name)
    x = _random_points(t, 1, seed)[0]
    try:
        y = billiard_map(t, x).next
        z = billiard_map(t, involution(y)).next
    except (CornerHit, NoCollision, SingularityTooClose):
        return
    back = involution(z)
    assert back.arc == x.arc
    assert back.r == pytest.approx(x.r, abs=1e-9)
    assert back.phi == pytest.approx(x.phi, abs=1e-9)


def test_jacobian_and_finite_differences(fig1):
    for x in _random_points(fig1, 200, 3):
        try:
            D = tangent_map(fig1, x)
            Dfd = finite_difference_dmap(fig1, x)
            c1 = math.cos(billiard_map(fig1, x).next.phi)
        except (SingularityTooClose, CornerHit, NoCollision):
            continue
        if c1 < 1e-3 or math.cos(x.phi) < 1e-3:
            continue
        assert abs(np.linalg.det(D)) * c1 == pytest.approx(math.cos(x.phi), rel=1e-8)
        assert np.max(np.abs(D - Dfd)) / np.max(np.abs(D)) < 1e-5


def test_flat_front_slope_grows(circle04):
    k = 2.5
    for x in _random_points(circle04, 200, 5):
        try:
            D = tangent_map(circle04, x)
        except SingularityTooClose:
            continue
        w = D @ np.array([1.0, k])
        assert w[1] / w[0] >= k - 1e-9


def test_phi_law():
    t = fixture_table("circle04")
    s = sample_invariant(t, 10**6, 11)
    edges = np.linspace(-math.pi / 2, math.pi / 2, 41)
    obs, _ = np.histogram(s.phi, edges)
    exp = 10**6 * 0.5 * (np.sin(edges[1:]) - np.sin(edges[:-1]))
    assert stats.chisquare(obs, exp).pvalue > 0.01


@pytest.mark.parametrize("name", ["circle04", "circle03", "fig1"])
def test_mean_free_path(name):
    # E_mu tau = pi |D| / |boundary|
    t = fixture_table(name)
    from shapely.geometry import Polygon
    area = 1.0 - sum(Polygon(sc.boundary_samples(4096)).area for sc in t.scatterers)
    expected = math.pi * area / t.total_length
    for seed in (1, 2):
        arc, u, phi, _ = dyn.sample_arrays(t, 400_000, seed)
        res = dyn.map_batch(t, arc, u, phi)
        tau = res["tau"][res["status"] == 0]
        se = tau.std() / math.sqrt(len(tau))
        assert abs(tau.mean() - expected) < 2 * se


def test_min_flight_positive(all_fixtures):
    for t in all_fixtures.values():
        assert dyn.flight_time_bounds(t, 20000, 0) > 0


def test_trajectory_csv(tmp_path, circle04):
    x = make_point(circle04, 0, 0.3, 0.2)
    tr = dyn.trajectory(circle04, x, 50)
    p = tmp_path / "traj.csv"
    dyn.write_trajectory_csv(p, tr)
    lines = p.read_text().splitlines()
    assert lines[0] == "step,r,phi,tau,dx,dy,flags"
    assert len(lines) == 51
    assert np.allclose(np.hypot(tr["dx"], tr["dy"]), tr["tau"])


def test_generic_path_agrees_with_kernel(fig1):
    for x in _random_points(fig1, 30, 9):
        try:
            a = billiard_map(fig1, x)
            b = billiard_map(fig1, x, force_generic=True)
        except (CornerHit, NoCollision, SingularityTooClose):
            continue
        assert a.next.arc == b.next.arc
        assert a.tau == pytest.approx(b.tau, abs=1e-9)
        assert a.next.phi == pytest.approx(b.next.phi, abs=1e-8)


def test_worker_count_does_not_change_results(fig1):
    arc, u, phi, _ = dyn.sample_arrays(fig1, 5000, 4)
    dyn.set_workers(1)
    a = dyn.map_batch(fig1, arc, u, phi)
    dyn.set_workers(2)
    b = dyn.map_batch(fig1, arc, u, phi)
    dyn.set_workers(1)
    for k in a:
        assert np.array_equal(a[k], b[k], equal_nan=True)
