"""Reference tables shipped with the package.

The JSON files in this directory are generated by :func:`fixture_configs`;
``python -m billiard_lab.fixtures`` rewrites them.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

from ..geometry import BilliardTable, build_table, curvilinear_polygon

FIXTURE_DIR = Path(__file__).resolve().parent

FIXTURE_NAMES = (
    "circle04", "circle03", "fig1", "fig1-D1", "incipient-pair",
    "degenerate_a1", "degenerate_a2", "finite-horizon-3disk",
)


def _disk(cx, cy, r) -> dict:
    return {"arcs": [{"kind": "circle", "center": [cx, cy], "radius": r,
                      "theta0": math.pi, "theta1": -math.pi}]}


def _diamond(cx, cy, a, s, bulges) -> dict:
    # vertices N, E, S, W in clockwise order
    verts = [(cx, cy + s), (cx + a, cy), (cx, cy - s), (cx - a, cy)]
    return curvilinear_polygon(verts, bulges)


def _octagon(cx, cy, rho, bulge) -> dict:
    # vertices at 90, 45, 0, ... degrees (clockwise), so N, E, S, W are corners
    verts = [(cx + rho * math.cos(math.radians(90 - 45 * k)),
              cy + rho * math.sin(math.radians(90 - 45 * k))) for k in range(8)]
    return curvilinear_polygon(verts, [bulge] * 8)


def _square(cx, cy, h, bulge) -> dict:
    verts = [(cx - h, cy + h), (cx + h, cy + h), (cx + h, cy - h), (cx - h, cy - h)]
    return curvilinear_polygon(verts, [bulge] * 4)


def fixture_configs() -> dict[str, dict]:
    b12 = math.radians(12.0)
    return {
        "circle04": {"name": "circle04", "scatterers": [_disk(0.5, 0.5, 0.4)]},
        "circle03": {"name": "circle03", "scatterers": [_disk(0.5, 0.5, 0.3)]},
        # two curvilinear octagons; the N corner of one and the S corner of the
        # other bound the only corridor, horizontal with 0.5 < y < 0.58
        "fig1": {"name": "fig1", "scatterers": [
            _octagon(0.25, 0.20, 0.3, b12),
            _octagon(0.75, 0.88, 0.3, b12),
        ]},
        # curvilinear square: corridors touch only the smooth arc midpoints
        "fig1-D1": {"name": "fig1-D1", "scatterers": [_square(0.5, 0.5, 0.35, math.radians(20.0))]},
        "incipient-pair": {"name": "incipient-pair", "scatterers": [
            _disk(0.25, 0.25, 0.25), _disk(0.75, 0.75, 0.25)]},
        # both sides of the horizontal corridor are realized twice
        "degenerate_a1": {"name": "degenerate_a1", "scatterers": [
            _disk(0.25, 0.3, 0.2), _disk(0.75, 0.3, 0.2)]},
        # the NE arc has a horizontal tangent at the N corner and a vertical one at E
        "degenerate_a2": {"name": "degenerate_a2", "scatterers": [
            _diamond(0.5, 0.5, 0.38, 0.38,
                     [math.radians(45.0), math.radians(30.0), math.radians(30.0), math.radians(30.0)])]},
        "finite-horizon-3disk": {"name": "finite-horizon-3disk", "scatterers": [
            _disk(0.0, 0.0, 0.3), _disk(0.5, 0.5, 0.3), _disk(0.5, 0.0, 0.18)]},
    }


def fixture_path(name: str) -> Path:
    return FIXTURE_DIR / f"{name}.json"


def load_fixture(name: str) -> BilliardTable:
    if name not in FIXTURE_NAMES:
        raise KeyError(f"unknown fixture {name!r}; choose from {', '.join(FIXTURE_NAMES)}")
    with open(fixture_path(name)) as fh:
        return build_table(json.load(fh))


def write_fixtures() -> None:
    for name, cfg in fixture_configs().items():
        build_table(cfg)
        with open(fixture_path(name), "w") as fh:
            json.dump(cfg, fh, indent=2)
            fh.write("\n")
