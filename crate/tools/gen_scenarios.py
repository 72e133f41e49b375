#!/usr/bin/env python3
"""Regenerates the bundled scenario files (pure math, no randomness).

    python3 tools/gen_scenarios.py

Overwrites scenarios/single_wall.toml and scenarios/demo_679.toml in place.
"""

import math
import os

ROOT = os.path.join(os.path.dirname(__file__), "..", "scenarios")
MAX_STEP_M = 5.0


def fmt_point(p):
    return f"[{p[0]!r}, {p[1]!r}]"


def check_speeds(name, traj):
    steps = [
        math.dist(a, b) for a, b in zip(traj, traj[1:])
    ]
    assert all(s <= MAX_STEP_M for s in steps), f"{name}: step too long"
    print(f"{name}: {len(traj)} waypoints, step length "
          f"{min(steps):.4f}..{max(steps):.4f} m")


def write(name, header, bounds, segments, pas, traj):
    check_speeds(name, traj)
    lines = [f"# {h}" for h in header]
    lines.append("")
    lines.append("bounds = [" + ", ".join(repr(v) for v in bounds) + "]")
    lines.append("segments = [")
    for s in segments:
        lines.append("    [" + ", ".join(repr(float(v)) for v in s) + "],")
    lines.append("]")
    lines.append("pas = [" + ", ".join(fmt_point(p) for p in pas) + "]")
    lines.append("trajectory = [")
    for p in traj:
        lines.append(f"    {fmt_point(p)},")
    lines.append("]")
    path = os.path.join(ROOT, name)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    print(f"wrote {path}")


def single_wall():
    # One reflecting wall below the scene: two paths everywhere (LOS plus the
    # bounce off the wall), the canonical minimal multipath scene.
    #
    # The track is a short straight run-up, a gentle left turn, then a long
    # straight leg. On a straight track a delay-only feature is determined
    # only up to mirroring across the track line, and that symmetry is broken
    # by curvature alone — so the turn comes early, while the bounce
    # feature's annulus is still being carved down, instead of after it has
    # already committed to one lobe. Ranges to the PA and its image stay in
    # a band where the true path intensities drift slowly.
    wall = (0.0, 0.0, 12.0, 0.0, 0)
    pa = (6.5, 1.2)
    n = 56
    traj = [(1.2, 2.2)]
    heading = 0.0
    for k in range(n - 1):
        if k < 3:
            v = 0.18
        elif k < 5:
            v = 0.18 - 0.02 * (k - 2)  # ease into the turn
        elif k < 16:
            v = 0.12
            heading += 0.0833  # ≈1σ lateral accel at v=0.12
        else:
            v = min(0.15, 0.12 + 0.005 * (k - 15))
        x, y = traj[-1]
        traj.append((x + v * math.cos(heading), y + v * math.sin(heading)))
    write(
        "single_wall.toml",
        ["Minimal scene: one reflecting wall, one PA, a straight-turn-straight",
         "track. Every step sees exactly two paths (LOS + one bounce)."],
        [-2.0, -4.0, 14.0, 8.0],
        [wall],
        [pa],
        traj,
    )


def demo_679():
    # Rectangular 15 m x 8 m room with an alcove recessed into the top wall,
    # two PAs, and a 679-step ellipse tour. The bounds are inflated so every
    # single-bounce mirror image of both PAs lies inside them.
    segments = [
        (0.0, 0.0, 15.0, 0.0, 0),    # bottom
        (15.0, 0.0, 15.0, 8.0, 1),   # right
        (0.0, 0.0, 0.0, 8.0, 2),     # left
        (0.0, 8.0, 6.0, 8.0, 3),     # top, left of the alcove
        (6.0, 8.0, 6.0, 9.5, 4),     # alcove left cheek
        (6.0, 9.5, 9.0, 9.5, 5),     # alcove back
        (9.0, 9.5, 9.0, 8.0, 6),     # alcove right cheek
        (9.0, 8.0, 15.0, 8.0, 7),    # top, right of the alcove
    ]
    pas = [(2.0, 1.5), (13.0, 6.5)]
    center, a, b, n = (7.5, 4.0), 5.0, 2.5, 679
    traj = [
        (center[0] + a * math.cos(2.0 * math.pi * k / n),
         center[1] + b * math.sin(2.0 * math.pi * k / n))
        for k in range(n)
    ]
    write(
        "demo_679.toml",
        ["Demo floor plan: 15 m x 8 m room with an alcove in the top wall,",
         "two PAs, 679-step ellipse tour. Approximate by construction; the",
         "bounds contain every single-bounce mirror image of both PAs."],
        [-16.0, -10.0, 31.0, 19.0],
        segments,
        pas,
        traj,
    )


if __name__ == "__main__":
    single_wall()
    demo_679()
