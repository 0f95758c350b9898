"""Regenerate deform_golden.json with plain scalar math (no numpy, no tacgraph).

Hexagonal127 rest layout from axial hex coordinates, a radial lens term, then
the radial Gaussian push for y_depth = 4 mm, theta_roll = 15 deg, no shear and
no noise.
"""

import json
import math
from pathlib import Path

RINGS = 6
LENS_K = 0.02
ALPHA, SIGMA, ROLL_GAIN, EPS = 0.25, 3.0, 8.0, 1e-9
DEPTH, THETA = 4.0, 15.0


def rest_markers():
    pts = []
    for q in range(-RINGS, RINGS + 1):
        for r in range(-RINGS, RINGS + 1):
            ring = max(abs(q), abs(r), abs(q + r))
            if ring > RINGS:
                continue
            x = q + 0.5 * r
            y = r * math.sqrt(3) / 2
            ang = math.atan2(y, x) % (2 * math.pi)
            pts.append((ring, round(ang, 9), x, y))
    pts.sort()
    rmax = max(math.hypot(x, y) for _, _, x, y in pts)
    out = []
    for _, _, x, y in pts:
        s = 1 + LENS_K * (math.hypot(x, y) / rmax) ** 2
        out.append((x * s, y * s))
    return out


def push(p):
    cx, cy = ROLL_GAIN * math.radians(THETA), 0.0
    dx, dy = p[0] - cx, p[1] - cy
    dist = math.hypot(dx, dy)
    w = math.exp(-dist * dist / (2 * SIGMA * SIGMA))
    g = ALPHA * DEPTH * w / max(dist, EPS)
    return (p[0] + g * dx, p[1] + g * dy)


if __name__ == "__main__":
    rest = rest_markers()
    golden = {"pose": {"y_depth": DEPTH, "theta_roll": THETA, "shear_x": 0.0, "shear_roll": 0.0},
              "params": {"push_gain": ALPHA, "contact_sigma": SIGMA, "roll_offset_gain": ROLL_GAIN,
                         "noise_std": 0.0, "lens_k": LENS_K},
              "rest": [list(p) for p in rest], "deformed": [list(push(p)) for p in rest]}
    Path(__file__).with_name("deform_golden.json").write_text(json.dumps(golden, indent=1))
