"""Walk through the corridor geometry of the shipped fixtures.

Run:  python3 demos/corridors_tour.py
"""

import math

from billiard_lab.corridors import classify_and_check, find_corridors
from billiard_lab.fixtures import FIXTURE_NAMES, load_fixture

for name in FIXTURE_NAMES:
    table = load_fixture(name)
    rep = classify_and_check(table)
    print(f"\n{name}: kappa_max={table.kappa_max:.3f}, type {rep.table_type}, "
          f"A1 {'ok' if rep.A1_ok else 'FAILS'}, A2 {'ok' if rep.A2_ok else 'FAILS'}")
    for c in find_corridors(table):
        label = "incipient" if c.incipient else f"type {c.type}"
        print(f"  direction {c.direction}  width {c.width:.6f}  offset {c.offset:.4f}  {label}")
        for b in c.boundary_points:
            print(f"      {b.tag:8s} {b.side:5s} v{'+' if b.velocity > 0 else '-'}"
                  f"  r={b.r:.4f}  phi={b.phi:+.4f}")

# a quick sanity check against the closed forms
w = [c.width for c in find_corridors(load_fixture("circle03")) if c.direction == (1, 1)][0]
print(f"\ncircle03 diagonal width {w:.12f}  vs  1/sqrt(2) - 0.6 = {2 ** -0.5 - 0.6:.12f}")
print(f"circle04 horizontal width should be 1 - 2*0.4 = {1 - 0.8:.1f}")
assert math.isclose(w, 2 ** -0.5 - 0.6, abs_tol=1e-9)
