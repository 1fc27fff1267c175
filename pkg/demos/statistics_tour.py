"""Correlations, CLT and the free-flight tail at a modest size (about a minute).

The full-size runs behind the acceptance checks use 10^7 orbit steps and
10^4 x 10^4 CLT replicas; pass --full to use them here too.
"""

import sys

from billiard_lab.fixtures import load_fixture
from billiard_lab.statistics import ObservableSpec, autocorrelation, clt_test, flight_tail, parse_observable

full = "--full" in sys.argv
segs, reps = (10_000, 10_000) if full else (1_000, 1_000)

for name in ("circle04", "fig1"):
    table = load_fixture(name)
    est = autocorrelation(table, ObservableSpec("cos_phi"), max_lag=10, n_samples=segs,
                          segment_length=1000)
    print(f"\n{name}: cos_phi mean {est.mean:.5f}, variance {est.variance:.5f}")
    for k in range(1, 6):
        print(f"  C({k}) = {est.values[k]:+.2e} +- {est.stderr[k]:.1e}")
    fe, fp = est.fits["exponential"], est.fits["power"]
    if fe is None:
        print(f"  too few resolved lags for a decay fit: {est.fits['lags_used']}")
    else:
        print(f"  R^2 exponential {fe['r2']:.3f} vs power {fp['r2']:.3f}  (preferred: {est.preferred})")
    clt = clt_test(table, ObservableSpec("cos_phi"), n_terms=reps, n_replicas=reps)
    print(f"  CLT: KS {clt.ks_stat:.4f}, Var(S_n) slope {clt.variance_slope:.3f}, sigma^2 {clt.sigma2:.4f}")

cob = clt_test(load_fixture("circle04"), parse_observable("coboundary:cos_phi"), n_terms=reps,
               n_replicas=reps)
print(f"\ncoboundary f - f o F: Var(S_n) slope {cob.variance_slope:.3f} (bounded sums)")

tail = flight_tail(load_fixture("circle04"), 10**7 if full else 10**6)
print(f"circle04 free-flight tail slope over [10, 1000]: {tail.slope:.3f}")
