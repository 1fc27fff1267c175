import math

import numpy as np
import pytest

from billiard_lab.corridors import (EpsTooLarge, NotOnBoundary, boundary_set, candidate_directions,
                                    classify_and_check, direction_bound, find_corridors,
                                    local_enlargement, make_generic)
from billiard_lab.geometry import table_distance
from conftest import fixture_table
from oracles import raycast_corridors

ALL = ["circle04", "circle03", "fig1", "fig1-D1", "incipient-pair", "degenerate_a1",
       "degenerate_a2", "finite-horizon-3disk"]


@pytest.mark.parametrize("name", ALL)
def test_matches_ray_casting(name):
    t = fixture_table(name)
    rays = raycast_corridors(t)
    proj = sorted((c.direction, c.width) for c in find_corridors(t, include_incipient=False))
    assert [d for d, _ in rays] == [d for d, _ in proj]
    for (_, a), (_, b) in zip(rays, proj):
        assert a == pytest.approx(b, abs=1e-9)


def test_candidate_directions_small_bound():
    assert sorted(candidate_directions(bound=1)) == [(0, 1), (1, -1), (1, 0), (1, 1)]
    dirs = candidate_directions(bound=3)
    assert len(dirs) == len(set(dirs))
    assert all(math.gcd(P, abs(Q)) == 1 for P, Q in dirs)
    assert (2, 3) in dirs and (2, 2) not in dirs and (-1, 0) not in dirs


def test_circle04_widths(circle04):
    cs = find_corridors(circle04)
    assert sorted(c.direction for c in cs) == [(0, 1), (1, 0)]
    for c in cs:
        assert c.width == pytest.approx(0.2, abs=1e-12)
        assert c.type == 1
        assert len(c.boundary_points) == 4
        assert all(abs(abs(b.phi) - math.pi / 2) < 1e-12 for b in c.boundary_points)


def test_circle03_diagonals(circle03):
    cs = find_corridors(circle03)
    assert len(cs) == 4
    for c in cs:
        if abs(c.direction[1]) == 1 and c.direction[0] == 1:
            assert c.width == pytest.approx(2 ** -0.5 - 0.6, abs=1e-9)
        else:
            assert c.width == pytest.approx(0.4, abs=1e-12)


def test_incipient_pair():
    t = fixture_table("incipient-pair")
    inc = [c for c in find_corridors(t) if c.incipient]
    horiz = [c for c in inc if c.direction == (1, 0)]
    assert horiz and any(abs(c.offset - 0.5) < 1e-9 or abs(c.offset) < 1e-9 for c in horiz)
    rep = classify_and_check(t)
    assert rep.incipient_present and not rep.ok


def test_fig1_corner_corridor(fig1):
    rep = classify_and_check(fig1)
    assert rep.ok and rep.table_type == "D2"
    (c,) = rep.corridors
    assert c.direction == (1, 0) and c.type == 3
    assert len(c.boundary_points) == 4
    assert all(b.tag == "corner" for b in c.boundary_points)
    assert all(0 < abs(b.phi) < math.pi / 2 for b in c.boundary_points)
    # opposite velocities at one corner give opposite signs of phi
    by_point = {}
    for b in c.boundary_points:
        by_point.setdefault(b.point, []).append(b.phi)
    assert all(len(v) == 2 and v[0] * v[1] < 0 for v in by_point.values())


def test_fig1_D1_is_regular():
    rep = classify_and_check(fixture_table("fig1-D1"))
    assert rep.ok and rep.table_type == "D1"


def test_boundary_set_ids(fig1):
    A = boundary_set(fig1)
    assert len(A) == 4
    assert [i for c, _ in A[:1] for i in c.ids] == [0, 1, 2, 3]


def test_directions_within_bound(all_fixtures):
    for t in all_fixtures.values():
        B = direction_bound(t)
        for c in find_corridors(t):
            assert max(abs(c.direction[0]), abs(c.direction[1])) <= B


def test_a1_violation():
    rep = classify_and_check(fixture_table("degenerate_a1"))
    assert not rep.A1_ok
    assert any(v["kind"] == "A1" and len(v["points"]) > 1 for v in rep.violations)


def test_a2_violation():
    rep = classify_and_check(fixture_table("degenerate_a2"))
    assert rep.A1_ok and not rep.A2_ok
    assert any(v["kind"] == "A2" for v in rep.violations)


def test_finite_horizon():
    rep = classify_and_check(fixture_table("finite-horizon-3disk"))
    assert rep.corridors == [] and rep.table_type == "A"


def test_enlargement_distance_shrinks(circle04):
    prev = math.inf
    for eps in (1e-2, 1e-3, 1e-4):
        new = local_enlargement(circle04, (0.5, 0.9), eps)
        d = table_distance(circle04, new)
        assert 0 < d < eps and d < prev
        prev = d


def test_enlargement_swallows_q(circle04):
    from shapely.geometry import Point, Polygon
    new = local_enlargement(circle04, (0.5, 0.9), 1e-2)
    poly = Polygon(new.scatterers[0].boundary_samples(8192))
    assert poly.contains(Point(0.5, 0.9))
    assert not Polygon(circle04.scatterers[0].boundary_samples(8192)).contains(Point(0.5, 0.9))
    # the old scatterer sits inside the new one
    assert poly.buffer(1e-9).contains(Polygon(circle04.scatterers[0].boundary_samples(2048)))


def test_enlargement_errors(circle04):
    with pytest.raises(NotOnBoundary):
        local_enlargement(circle04, (0.0, 0.0), 1e-3)
    with pytest.raises(ValueError):
        local_enlargement(circle04, (0.5, 0.9), 0.0)


def test_enlargement_removes_incipient():
    t = fixture_table("incipient-pair")
    rep = classify_and_check(t)
    v = next(v for v in rep.violations if v["kind"] == "incipient")
    new = local_enlargement(t, v["points"][0], 0.05)
    key = (tuple(v["direction"]), round(v["offset"], 6))
    after = {(tuple(w["direction"]), round(w["offset"], 6))
             for w in classify_and_check(new).violations if w["kind"] == "incipient"}
    assert key not in after


@pytest.mark.parametrize("name", ["degenerate_a1", "degenerate_a2", "incipient-pair"])
def test_make_generic(name):
    t = fixture_table(name)
    assert not classify_and_check(t).ok
    res = make_generic(t, 0.5)
    assert res.ok
    assert res.cumulative_distance < 0.5
    assert res.direct_distance <= res.cumulative_distance + 1e-12
