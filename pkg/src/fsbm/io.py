"""Plain-text artifacts: keypoint files, trajectory CSV and SVG snapshots.

Keypoint file layout::

    FSBM-KP v1 N d T
    t_0 t_1 ... t_{T-1}
    <N blocks of T lines, each with d floats>

Floats are written with ``repr`` so a round trip is bitwise exact.
"""

from __future__ import annotations

import csv
from xml.sax.saxutils import escape

import numpy as np

from .guidance import KeypointSet

__all__ = [
    "write_keypoints",
    "read_keypoints",
    "write_trajectory_csv",
    "read_trajectory_csv",
    "snapshot_indices",
    "render_svg",
]

KP_MAGIC = "FSBM-KP"
KP_VERSION = "v1"


def _fmt(row) -> str:
    return " ".join(repr(float(v)) for v in row)


def write_keypoints(ks: KeypointSet, path) -> None:
    N, T, d = ks.trajectories.shape
    with open(path, "w") as fh:
        fh.write(f"{KP_MAGIC} {KP_VERSION} {N} {d} {T}\n")
        fh.write(_fmt(ks.time_grid) + "\n")
        for n in range(N):
            for row in ks.trajectories[n]:
                fh.write(_fmt(row) + "\n")


def read_keypoints(path) -> KeypointSet:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty keypoint file")
    head = lines[0].split()
    if len(head) != 5 or head[0] != KP_MAGIC or head[1] != KP_VERSION:
        raise ValueError(f"{path}: bad keypoint header {lines[0]!r}")
    N, d, T = (int(v) for v in head[2:])
    if len(lines) != 2 + N * T:
        raise ValueError(f"{path}: expected {2 + N * T} lines, found {len(lines)}")
    grid = np.array([float(v) for v in lines[1].split()])
    vals = np.array([[float(v) for v in ln.split()] for ln in lines[2:]])
    if grid.shape != (T,) or vals.shape != (N * T, d):
        raise ValueError(f"{path}: keypoint block shape mismatch")
    return KeypointSet(vals.reshape(N, T, d), grid)


def snapshot_indices(n_steps: int, fractions=(0.0, 1 / 3, 2 / 3, 1.0)) -> list:
    """Trajectory rows closest to the given fractions of the time span."""
    return [int(round(f * n_steps)) for f in fractions]


def write_trajectory_csv(traj, path, times=None, rows=None) -> None:
    """Rows ``t, particle_id, x_0..x_{d-1}`` for the selected time slices."""
    traj = np.asarray(traj, dtype=float)
    steps = traj.shape[0] - 1
    times = np.linspace(0.0, 1.0, steps + 1) if times is None else np.asarray(times)
    rows = range(steps + 1) if rows is None else rows
    d = traj.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "particle_id"] + [f"x_{k}" for k in range(d)])
        for r in rows:
            for i, x in enumerate(traj[r]):
                w.writerow([repr(float(times[r])), i] + [repr(float(v)) for v in x])


def read_trajectory_csv(path):
    """Inverse of :func:`write_trajectory_csv`: ``(times, traj)``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(v) for v in row] for row in reader])
    d = len(header) - 2
    times = np.unique(data[:, 0])
    n = int(data[:, 1].max()) + 1
    traj = np.empty((times.size, n, d))
    for k, t in enumerate(times):
        block = data[data[:, 0] == t]
        traj[k, block[:, 1].astype(int)] = block[:, 2:]
    return times, traj


def render_svg(snapshots, times, obstacles=(), target=None, size: int = 320,
               bounds=None, dims=(0, 1)) -> str:
    """Side-by-side scatter panels, one per snapshot, with obstacle polygons.

    Each particle is a ``<circle class="particle">``; target samples, if
    given, are drawn in the last panel with class ``target``.
    """
    snaps = [np.asarray(s, dtype=float)[:, list(dims)] for s in snapshots]
    pts = np.concatenate(snaps + ([np.asarray(target)[:, list(dims)]] if target is not None else []))
    if bounds is None:
        lo = np.percentile(pts, 0.5, axis=0)
        hi = np.percentile(pts, 99.5, axis=0)
        for ob in obstacles:
            lo = np.minimum(lo, ob.vertices.min(0))
            hi = np.maximum(hi, ob.vertices.max(0))
        pad = 0.05 * (hi - lo).max()
        lo, hi = lo - pad, hi + pad
    else:
        lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    span = max((hi - lo).max(), 1e-9)

    def px(p):
        q = (np.asarray(p) - lo) / span * size
        return q[..., 0], size - q[..., 1]

    width = size * len(snaps)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{size + 20}" '
           f'viewBox="0 0 {width} {size + 20}">']
    for k, (snap, t) in enumerate(zip(snaps, times)):
        out.append(f'<g class="panel" transform="translate({k * size},0)">')
        out.append(f'<rect x="0" y="0" width="{size}" height="{size}" fill="white" stroke="black"/>')
        for ob in obstacles:
            x, y = px(ob.vertices)
            pts_s = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(x, y))
            out.append(f'<polygon class="obstacle" points="{pts_s}" fill="#999999"/>')
        if target is not None and k == len(snaps) - 1:
            x, y = px(np.asarray(target)[:, list(dims)])
            for a, b in zip(x, y):
                out.append(f'<circle class="target" cx="{a:.2f}" cy="{b:.2f}" r="1.2" fill="#d62728" '
                           f'fill-opacity="0.4"/>')
        x, y = px(snap)
        for a, b in zip(x, y):
            out.append(f'<circle class="particle" cx="{a:.2f}" cy="{b:.2f}" r="1.2" fill="#1f3a93"/>')
        out.append(f'<text x="4" y="{size + 15}" font-size="12">{escape(f"t = {t:.3f}")}</text>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out)
