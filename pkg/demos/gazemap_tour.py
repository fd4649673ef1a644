"""Render gazemaps for a few gaze directions and print where the iris lands.

    python3 demos/gazemap_tour.py [OUT_DIR]

Writes one iris and one eyeball PGM per direction into OUT_DIR (default
./gazemap_tour) and prints the iris centroid next to its closed form.
"""
import math
import sys
from pathlib import Path

from gazenet.geometry import (IRIS, GazemapSpec, iris_center, iris_ellipse, mask_centroid, render_gazemap,
                              save_gazemap_pgms)

out = Path(sys.argv[1] if len(sys.argv) > 1 else "gazemap_tour")
spec = GazemapSpec(75, 45)
print(f"map {spec.width}x{spec.height}, eyeball radius {spec.eyeball_radius:.1f} px")

for name, pitch, yaw in [("ahead", 0, 0), ("left", 0, 30), ("right", 0, -30), ("up", 20, 0), ("down_right", -20, -25)]:
    p, y = math.radians(pitch), math.radians(yaw)
    maps = render_gazemap(spec, p, y)
    got = mask_centroid(maps[IRIS])
    want = iris_center(spec, p, y)
    e = iris_ellipse(spec, p, y)
    save_gazemap_pgms(out, maps, stem=name)
    print(f"{name:>10}: iris centroid ({got[0]:5.1f}, {got[1]:5.1f})  closed form ({want[0]:5.1f}, {want[1]:5.1f})"
          f"  axes {e.major_diameter:.1f} x {e.minor_diameter:.1f}")
