import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from billiard_lab import dynamics as dyn
from billiard_lab import statistics as stx
from billiard_lab.statistics import (FiniteHorizon, ObservableSpec, autocorrelation, clt_test,
                                     fit_decay, flight_tail, parse_observable)
from conftest import fixture_table


def test_parse_observable():
    assert parse_observable("tau_capped:50").cap == 50.0
    assert parse_observable("coboundary:sin_phi").base.kind == "sin_phi"
    assert parse_observable("constant:2").value == 2.0
    assert parse_observable("custom:cos(phi)**2").expr == "cos(phi)**2"
    with pytest.raises(ValueError):
        parse_observable("nonsense")
    with pytest.raises(ValueError):
        ObservableSpec("tau_capped")


def test_boundedness_flags():
    assert ObservableSpec("cos_phi").bounded
    assert not ObservableSpec("displacement_x").bounded
    assert parse_observable("tau_capped:10").sup_bound == 10.0
    assert parse_observable("coboundary:cos_phi").sup_bound == 2.0


def test_custom_observable():
    obs = parse_observable("custom:cos(phi)**2 + 0*r")
    phi = np.array([0.0, math.pi / 3])
    assert np.allclose(obs.evaluate(np.zeros(2), phi, None, None), [1.0, 0.25])
    f = ObservableSpec("custom", fn=lambda r, p: np.sin(p) ** 2)
    assert np.allclose(f.evaluate(np.zeros(2), phi, None, None), [0.0, 0.75])


def test_generic_segments_match_kernel(fig1):
    arc, u, phi, _ = dyn.sample_arrays(fig1, 20, 6)
    a, ga = stx._segments_kernel(fig1, arc, u, phi, 15, dyn.T_MAX)
    b, gb = stx._segments_generic(fig1, arc, u, phi, 15, dyn.T_MAX)
    ok = ga & gb
    assert ok.sum() >= 15
    for x, y in zip(a, b):
        assert np.allclose(x[ok], y[ok], atol=1e-8)


def test_constant_observable_has_no_correlation(circle04):
    est = autocorrelation(circle04, parse_observable("constant:2"), max_lag=5, n_samples=300)
    assert np.all(np.abs(est.values) <= 3 * est.stderr + 1e-15)
    assert est.mean == pytest.approx(2.0)


def test_lag_zero_is_invariant_variance(circle04):
    # under mu, phi has density cos(phi)/2: E cos = pi/4, E cos^2 = 2/3
    est = autocorrelation(circle04, ObservableSpec("cos_phi"), max_lag=3, n_samples=2000, seed=2)
    assert est.mean == pytest.approx(math.pi / 4, abs=2e-3)
    assert est.values[0] == pytest.approx(2 / 3 - math.pi**2 / 16, abs=2e-3)
    assert est.variance == est.values[0]


def test_stderr_shrinks_like_root_two(circle04):
    obs = ObservableSpec("cos_phi")
    a = autocorrelation(circle04, obs, max_lag=3, n_samples=4000, seed=5)
    b = autocorrelation(circle04, obs, max_lag=3, n_samples=8000, seed=6)
    ratio = a.stderr[1:] / b.stderr[1:]
    assert np.all(np.abs(ratio / math.sqrt(2) - 1) < 0.15)


def test_stationarity(fig1):
    obs = ObservableSpec("cos_phi")
    a = autocorrelation(fig1, obs, max_lag=5, n_samples=3000, seed=3, segment_length=100)
    b = autocorrelation(fig1, obs, max_lag=5, n_samples=3000, seed=3, segment_length=100, skip=100)
    se = np.hypot(a.stderr, b.stderr)
    assert np.all(np.abs(a.values - b.values) <= 3 * se)


def test_autocorrelation_is_deterministic(fig1):
    obs = ObservableSpec("sin_phi")
    a = autocorrelation(fig1, obs, max_lag=4, n_samples=600, seed=9)
    b = autocorrelation(fig1, obs, max_lag=4, n_samples=600, seed=9)
    assert np.array_equal(a.values, b.values) and a.to_dict() == b.to_dict()


@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 1.0), st.floats(0.1, 5.0))
def test_fit_decay_recovers_models(rate, amp):
    k = np.arange(31, dtype=float)
    se = np.full(31, 1e-9)
    exp = fit_decay(k, amp * np.exp(-rate * k), se)
    assert exp["exponential"]["rate"] == pytest.approx(rate, rel=1e-6)
    assert exp["exponential"]["r2"] > exp["power"]["r2"]
    k1 = np.maximum(k, 1)
    pw = fit_decay(k, amp * k1 ** -(1 + rate), se)
    assert pw["power"]["r2"] > pw["exponential"]["r2"]


def test_fit_decay_needs_resolved_lags():
    k = np.arange(10, dtype=float)
    vals = np.r_[1.0, 0.1, 1e-6, 0.01, 0.001, 0, 0, 0, 0, 0]
    res = fit_decay(k, vals, np.full(10, 1e-4))
    assert res["exponential"] is None and res["power"] is None


def test_clt_requires_bounded(circle04):
    with pytest.raises(ValueError):
        clt_test(circle04, ObservableSpec("displacement_x"), n_terms=100, n_replicas=10)


def test_clt_small(circle04):
    res = clt_test(circle04, ObservableSpec("cos_phi"), n_terms=2000, n_replicas=1000, seed=1)
    assert res.ks_stat < 0.06
    assert res.variance_slope == pytest.approx(1.0, abs=0.1)
    cob = clt_test(circle04, parse_observable("coboundary:cos_phi"), n_terms=2000,
                   n_replicas=1000, seed=1)
    assert abs(cob.variance_slope) < 0.1


def test_flight_tail(circle04):
    ft = flight_tail(circle04, 200_000, seed=0)
    tmin = dyn.flight_time_bounds(circle04, 20000, 0)
    assert np.all(ft.tail[ft.t < 0.99 * tmin] == 1.0)
    nz = ft.tail[ft.tail > 0]
    assert np.all(np.diff(nz) <= 0)
    assert ft.slope == pytest.approx(-2.0, abs=0.3)


def test_flight_tail_finite_horizon():
    with pytest.raises(FiniteHorizon):
        flight_tail(fixture_table("finite-horizon-3disk"), 1000)
