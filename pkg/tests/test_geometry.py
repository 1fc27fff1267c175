import copy
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from billiard_lab.fixtures import fixture_configs
from billiard_lab.geometry import (AdmissibilityError, Bump, CuspDetected, NonConvexArc,
                                   OpenBoundaryChain, OutOfRange, OverlappingScatterers,
                                   boundary_point, build_table, curvilinear_polygon,
                                   table_distance, table_from_json, table_to_json, tables_equal)


def disk(cx, cy, r):
    return {"arcs": [{"kind": "circle", "center": [cx, cy], "radius": r,
                      "theta0": math.pi, "theta1": -math.pi}]}


def test_circle_table_curvature(circle04):
    assert len(circle04.scatterers) == 1
    assert len(circle04.scatterers[0].arcs) == 1
    assert circle04.kappa_max == pytest.approx(2.5, rel=1e-12)
    assert circle04.kappa_min == pytest.approx(2.5, rel=1e-12)
    assert circle04.total_length == pytest.approx(2 * math.pi * 0.4, rel=1e-12)


def test_cusp_rejected():
    # a lens whose arcs leave the tip in the same direction: scatterer angle ~ 0
    P, Q = (0.3, 0.5), (0.7, 0.5)
    cfg = curvilinear_polygon([P, Q], [1e-8, 1e-8])
    with pytest.raises(CuspDetected):
        build_table({"scatterers": [cfg]})


def test_smooth_junction_rejected():
    # two half circles of one disk join C3-smoothly: not a corner
    halves = curvilinear_polygon([(0.3, 0.5), (0.7, 0.5)], [math.pi / 2, math.pi / 2])
    with pytest.raises(AdmissibilityError):
        build_table({"scatterers": [halves]})


def test_overlap_and_open_chain():
    with pytest.raises(OverlappingScatterers):
        build_table({"scatterers": [disk(0.3, 0.5, 0.2), disk(0.6, 0.5, 0.2)]})
    with pytest.raises(OverlappingScatterers):
        build_table({"scatterers": [disk(0.5, 0.5, 0.5)]})  # touches its own translate
    half = {"arcs": [{"kind": "circle", "center": [0.5, 0.5], "radius": 0.2,
                      "theta0": math.pi, "theta1": 0.0}]}
    with pytest.raises(OpenBoundaryChain):
        build_table({"scatterers": [half]})


def test_non_positive_curvature_rejected():
    # closed chain of an inflected cubic and a straight cubic
    cub = {"kind": "cubic", "cx": [0.2, 0.6, 0.0, 0.0], "cy": [0.425, 0.45, -0.9, 0.6]}
    back = {"kind": "cubic", "cx": [0.8, -0.6, 0.0, 0.0], "cy": [0.575, -0.15, 0.0, 0.0]}
    with pytest.raises(NonConvexArc):
        build_table({"scatterers": [{"arcs": [cub, back]}]})


def test_fig1_accepted(fig1):
    assert fig1.kappa_max > 0
    assert 0 < fig1.alpha0 < math.pi
    assert all(len(sc.corners) == 8 for sc in fig1.scatterers)


def test_fig1_independent_distance_check(fig1):
    # independent pairwise-distance sampler over translates
    pts = [sc.boundary_samples(400) for sc in fig1.scatterers]
    best = math.inf
    for i in range(2):
        for j in range(2):
            for mx in (-1, 0, 1):
                for my in (-1, 0, 1):
                    if i == j and mx == 0 and my == 0:
                        continue
                    d = pts[i][:, None, :] - (pts[j] + [mx, my])[None, :, :]
                    best = min(best, float(np.sqrt((d**2).sum(-1)).min()))
    assert best > 1e-3


def test_boundary_point_leftmost(circle04):
    # clockwise from theta0 = pi: r = 0 is the leftmost point
    bp = boundary_point(circle04, 0.0)
    assert np.allclose(bp.point, [0.1, 0.5], atol=1e-12)
    assert np.allclose(bp.normal, [-1.0, 0.0], atol=1e-12)
    assert bp.curvature == pytest.approx(2.5)


def test_boundary_point_corner_ownership(fig1):
    j = 3
    r = float(fig1.offsets[j])
    bp = boundary_point(fig1, r)
    assert bp.arc == j
    t_out = np.array(fig1.scatterers[0].corners[(j - 1) % 8].tangent_out)
    assert np.allclose(bp.tangent, t_out, atol=1e-9)


def test_boundary_point_out_of_range(circle04):
    with pytest.raises(OutOfRange):
        boundary_point(circle04, -0.1)
    with pytest.raises(OutOfRange):
        boundary_point(circle04, circle04.total_length + 0.1)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 1.0))
def test_boundary_point_orthonormal(s):
    from conftest import fixture_table
    t = fixture_table("fig1")
    bp = boundary_point(t, s * t.total_length)
    assert abs(np.hypot(*bp.tangent) - 1) < 1e-12
    assert abs(np.hypot(*bp.normal) - 1) < 1e-12
    assert abs(bp.tangent @ bp.normal) < 1e-12


def test_table_distance_examples(circle04):
    assert table_distance(circle04, circle04) == 0.0
    t41 = build_table({"scatterers": [disk(0.5, 0.5, 0.41)]})
    d = table_distance(circle04, t41)
    assert 0.01 <= d <= 0.011
    two = build_table({"scatterers": [disk(0.25, 0.5, 0.1), disk(0.75, 0.5, 0.1)]})
    assert table_distance(circle04, two) == math.inf


def test_arc_lengths_match_quadrature(fig1):
    for j, arc in enumerate(fig1.arcs):
        u = np.linspace(0, arc.span, 20001)
        sp = arc.speed(u)
        quad = float(np.trapezoid(sp, u))
        assert fig1.offsets[j + 1] - fig1.offsets[j] == pytest.approx(quad, rel=1e-8)


def test_kappa_max_is_grid_max(all_fixtures):
    for t in all_fixtures.values():
        kmax = max(float(a.curvature(np.linspace(0, a.span, 1024)).max()) for a in t.arcs)
        assert t.kappa_max == pytest.approx(kmax, rel=1e-9)


def test_round_trip(all_fixtures):
    for t in all_fixtures.values():
        t2 = table_from_json(table_to_json(t))
        assert tables_equal(t, t2)
        assert np.array_equal(t.offsets, t2.offsets)
        assert t.kappa_max == t2.kappa_max and t.alpha0 == t2.alpha0


def test_bumped_table_round_trip(circle04):
    cfg = copy.deepcopy(circle04.config)
    cfg["scatterers"][0]["bumps"] = [Bump((0.5, 0.9), 0.05, 1e-6, (0.0, 1.0)).to_dict()]
    t = build_table(cfg)
    assert not t.all_circular
    t2 = table_from_json(json.dumps(t.to_dict()))
    assert table_distance(t, t2) == 0.0
    assert 0 < table_distance(circle04, t) < math.inf


def test_fixture_files_match_generator():
    from billiard_lab.fixtures import fixture_path
    for name, cfg in fixture_configs().items():
        with open(fixture_path(name)) as fh:
            assert json.load(fh) == json.loads(json.dumps(cfg))
