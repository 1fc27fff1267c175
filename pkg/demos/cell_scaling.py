"""Corridor cells shrink like powers of n; print the measured slopes.

D-cells sit next to a regular tangency (circle04), E-cells next to a corner
(fig1).  Slopes are log-log fits of the cell extents against n in [10, 200].
"""

import numpy as np

from billiard_lab import singularity as sing
from billiard_lab.fixtures import load_fixture

for name, tag, expect in (("circle04", "regular", (-2, -0.5)), ("fig1", "corner", (-2, -1))):
    table = load_fixture(name)
    h = sing.boundary_point_ids(table, tag)[0]
    probe = sing.probe_cell_geometry(table, h)
    print(f"\n{name} ({probe.family}-cells at boundary point {h})")
    print("     n    unstable      stable")
    for rec in probe.records:
        print(f"  {rec['n']:4d}  {rec['unstable_extent']:.3e}  {rec['stable_extent']:.3e}")
    print(f"  slopes: unstable {probe.slope_unstable:.3f} (expect {expect[0]}), "
          f"stable {probe.slope_stable:.3f} (expect {expect[1]})")
    if probe.family == "D":
        ratio = probe.expansion[np.abs(probe.expansion[:, 1]) > 0, 3]
        print(f"  expansion / (n k^2) ranges over [{ratio.min():.2f}, {ratio.max():.2f}]")
