"""Repair degenerate tables by small local enlargements.

Each fixture below fails the corridor checks (a doubly realized side, a corner
whose tangent runs along the corridor, or a zero-width corridor).  make_generic
bumps the scatterers one bad corridor at a time and re-checks.
"""

from billiard_lab.corridors import classify_and_check, make_generic
from billiard_lab.fixtures import load_fixture

EPS = 0.1

for name in ("degenerate_a1", "degenerate_a2", "incipient-pair"):
    table = load_fixture(name)
    before = classify_and_check(table)
    print(f"\n{name}: {len(before.violations)} violation(s): "
          + ", ".join(sorted({v['kind'] for v in before.violations})))
    res = make_generic(table, EPS)
    for i, s in enumerate(res.steps, 1):
        print(f"  step {i}: {s['kind']:9s} dir {tuple(s['direction'])}  at q=({s['q'][0]:.4f}, "
              f"{s['q'][1]:.4f})  eps_i={s['eps']:.4f}  d={s['distance']:.2e}")
    print(f"  -> generic: {res.ok}, cumulative distance {res.cumulative_distance:.4f} < {EPS}, "
          f"table type {res.report.table_type}")
