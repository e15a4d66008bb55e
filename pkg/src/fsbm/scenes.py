"""Benchmark scenes: crowd navigation through obstacles and opinion depolarization.

Crowd scenes live in the plane with convex polygonal obstacles; the opinion
scene carries the party-model polarizing drift as its reference dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .guidance import KeypointSet
from .paths import SplineOptions, optimize_splines, spline_eval, uniform_knot_times
from .transport import sample_pairs_from_plan, sinkhorn_plan, sqeuclidean_cost

__all__ = [
    "Polygon",
    "InitialCondition",
    "Scene",
    "INITIAL_CONDITIONS",
    "stunnel_scene",
    "vneck_scene",
    "opinion_scene",
    "make_scene",
    "obstacle_cost",
    "obstacle_cost_grad",
    "polarize_drift",
    "generate_keypoints",
    "route_around",
    "STUNNEL_SLABS",
    "VNECK_WEDGES",
]

OBSTACLE_WEIGHT = 1500.0

# Axis-aligned slabs (xmin, xmax, ymin, ymax) forming the S corridor.
STUNNEL_SLABS = ((-6.0, -4.0, -12.0, 0.5), (-1.0, 1.0, -0.5, 12.0), (4.0, 6.0, -12.0, 0.5))
# Two wedges whose apexes leave a gap of half-width 1 around the origin.
VNECK_WEDGES = (((-7.0, 12.0), (7.0, 12.0), (0.0, 1.0)),
                ((-7.0, -12.0), (0.0, -1.0), (7.0, -12.0)))


@dataclass(frozen=True, eq=False)
class Polygon:
    """Convex polygon given by its vertices; stored as halfplanes ``A x <= b``."""

    vertices: np.ndarray
    A: np.ndarray = field(init=False, repr=False)
    b: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise ValueError("polygon needs at least three 2-D vertices")
        # orient counter-clockwise
        area = 0.5 * np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1])
        if area < 0:
            v = v[::-1]
        edge = np.roll(v, -1, axis=0) - v
        normal = np.stack([edge[:, 1], -edge[:, 0]], axis=1)
        normal /= np.linalg.norm(normal, axis=1, keepdims=True)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "A", normal)
        object.__setattr__(self, "b", (normal * v).sum(1))

    @classmethod
    def box(cls, xmin, xmax, ymin, ymax) -> "Polygon":
        return cls(np.array([[xmin, ymin], [xmax, ymin], [xmax, ymax], [xmin, ymax]]))

    def depth(self, x) -> np.ndarray:
        """Penetration depth (distance to the boundary inside, 0 outside)."""
        slack = self.b - np.asarray(x, dtype=float) @ self.A.T
        return np.maximum(slack.min(-1), 0.0)

    def inflate(self, margin: float) -> "Polygon":
        """Polygon with every face pushed out by ``margin``."""
        A, b = self.A, self.b + margin
        n = len(b)
        verts = []
        for j in range(n):
            k = (j - 1) % n
            verts.append(np.linalg.solve(np.stack([A[k], A[j]]), np.array([b[k], b[j]])))
        return Polygon(np.array(verts))


@dataclass(frozen=True)
class InitialCondition:
    """Evaluation-time source distribution for the crowd scenes.

    ``scale`` is the standard deviation for Gaussian modes and the box
    half-width for ``Uniform``.
    """

    mode: str
    mean: tuple
    scale: float

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=float)
        if self.mode == "Uniform":
            return mean + rng.uniform(-self.scale, self.scale, size=(n, mean.size))
        return mean + self.scale * rng.standard_normal((n, mean.size))


INITIAL_CONDITIONS = {
    "Vanilla": InitialCondition("Vanilla", (-11.0, -1.0), 0.5),
    "PerturbedMean": InitialCondition("PerturbedMean", (-11.0, -4.0), 0.5),
    "PerturbedSTD": InitialCondition("PerturbedSTD", (-11.0, -1.0), 3.0),
    "Uniform": InitialCondition("Uniform", (-11.0, -1.0), 1.0),
}


@dataclass
class Scene:
    """Benchmark definition.

    ``base_drift(x, rng)`` is the reference drift added to the learned one
    (opinion scene only); it may depend on the whole batch.
    """

    name: str
    dim: int
    sigma: float
    source: Callable
    target: Callable
    obstacles: Sequence[Polygon] = ()
    base_drift: Optional[Callable] = None
    polarize_scale: float = 1.0

    def sample_source(self, n: int, rng) -> np.ndarray:
        return self.source(n, rng)

    def sample_target(self, n: int, rng) -> np.ndarray:
        return self.target(n, rng)

    @property
    def is_crowd(self) -> bool:
        return len(self.obstacles) > 0


def _gaussian(mean, std):
    mean = np.asarray(mean, dtype=float)

    def sample(n, rng):
        return mean + std * rng.standard_normal((n, mean.size))
    return sample


def stunnel_scene(sigma: float = 1.0, slabs=STUNNEL_SLABS) -> Scene:
    return Scene("stunnel", 2, sigma, INITIAL_CONDITIONS["Vanilla"].sample,
                 _gaussian([11.0, 1.0], 0.5), tuple(Polygon.box(*s) for s in slabs))


def vneck_scene(sigma: float = 1.0, wedges=VNECK_WEDGES) -> Scene:
    return Scene("vneck", 2, sigma, INITIAL_CONDITIONS["Vanilla"].sample,
                 _gaussian([11.0, 1.0], 0.5), tuple(Polygon(np.array(w)) for w in wedges))


def polarize_drift(batch, xi, queries=None) -> np.ndarray:
    """Party-model drift ``f(x) = mean_y a(x, y, xi) ybar`` with ``ybar = y / |y|^(1/2)``.

    ``a`` is +1 when ``x`` and ``y`` fall on the same side of ``xi`` and -1
    otherwise. ``queries`` default to the batch itself. Since
    ``a = s_x s_y`` with ``s = sign(<., xi>)``, the mean factorises and the
    cost is linear in the batch size.
    """
    y = np.atleast_2d(np.asarray(batch, dtype=float))
    if y.shape[0] == 0:
        raise ValueError("empty batch")
    x = y if queries is None else np.atleast_2d(np.asarray(queries, dtype=float))
    xi = np.asarray(xi, dtype=float)
    norm = np.linalg.norm(y, axis=1, keepdims=True)
    ybar = np.where(norm > 0, y / np.sqrt(np.where(norm > 0, norm, 1.0)), 0.0)
    # sign(0) counts as its own side, matching a literal sign comparison
    sy = np.sign(y @ xi)
    sx = np.sign(x @ xi)
    groups = {s: ybar[sy == s].sum(0) for s in (-1.0, 0.0, 1.0)}
    n = y.shape[0]
    total = groups[-1.0] + groups[0.0] + groups[1.0]
    out = np.empty_like(x)
    for s in (-1.0, 0.0, 1.0):
        mask = sx == s
        if mask.any():
            out[mask] = (2 * groups[s] - total) / n
    return out


def opinion_scene(dim: int = 10, sigma: float = 0.5, polarize_scale: float = 1.0) -> Scene:
    """Opinion depolarization: N(0, 0.25 I) to N(0, 4 I) under the polarizing drift."""
    if dim < 2:
        raise ValueError("opinion scene needs dim >= 2")

    def drift(x, rng):
        xi = rng.standard_normal(x.shape[1])
        return polarize_scale * polarize_drift(x, xi)

    return Scene("opinion", dim, sigma, _gaussian(np.zeros(dim), 0.5),
                 _gaussian(np.zeros(dim), 2.0), (), drift, polarize_scale)


def make_scene(name: str, **kw) -> Scene:
    builders = {"stunnel": stunnel_scene, "vneck": vneck_scene, "opinion": opinion_scene}
    if name not in builders:
        raise ValueError(f"unknown scene {name!r}; choose from {sorted(builders)}")
    return builders[name](**kw)


def obstacle_cost_grad(x, obstacles, weight: float = OBSTACLE_WEIGHT):
    """``weight * sum depth^2`` over obstacles and its gradient; ``x`` is (..., 2)."""
    x = np.asarray(x, dtype=float)
    cost = np.zeros(x.shape[:-1])
    grad = np.zeros_like(x)
    for ob in obstacles:
        slack = ob.b - x @ ob.A.T
        j = slack.argmin(-1)
        depth = np.maximum(np.take_along_axis(slack, j[..., None], -1)[..., 0], 0.0)
        cost += weight * depth ** 2
        grad -= (2 * weight * depth)[..., None] * ob.A[j]
    return cost, grad


def obstacle_cost(x, scene: Scene):
    """Squared penetration depth summed over the scene's obstacles, times 1500."""
    if not scene.is_crowd:
        raise ValueError(f"scene {scene.name!r} has no obstacles")
    c = obstacle_cost_grad(x, scene.obstacles)[0]
    return float(c) if c.ndim == 0 else c


def _pairing(x0, x1, epsilon, rng):
    C = sqeuclidean_cost(x0, x1)
    scale = C.mean() if C.mean() > 0 else 1.0
    n, m = C.shape
    plan = sinkhorn_plan(C / scale, np.full(n, 1.0 / n), np.full(m, 1.0 / m), epsilon,
                         max_iter=5000, tol=1e-6)
    cols = np.array([sample_pairs_from_plan(plan.plan[i:i + 1], 1, rng)[0, 1] for i in range(n)])
    return cols, plan


def route_around(x0, x1, obstacles, knot_times, resolution: float = 0.25) -> np.ndarray:
    """Shortest grid routes from each ``x0`` to ``x1`` avoiding ``obstacles``.

    Dijkstra on an 8-connected lattice whose cells inside any obstacle are
    removed. Each route is resampled at constant speed at ``knot_times``;
    returns shape ``(P, K, 2)``. Pairs whose endpoints fall outside the free
    lattice get the chord.
    """
    x0 = np.atleast_2d(x0)
    x1 = np.atleast_2d(x1)
    pts = np.concatenate([x0, x1] + [ob.vertices for ob in obstacles])
    lo = pts.min(0) - 2.0
    hi = pts.max(0) + 2.0
    nx, ny = np.ceil((hi - lo) / resolution).astype(int) + 1
    gx, gy = np.meshgrid(lo[0] + resolution * np.arange(nx), lo[1] + resolution * np.arange(ny),
                         indexing="ij")
    nodes = np.stack([gx.ravel(), gy.ravel()], axis=1)
    free = np.ones(len(nodes), bool)
    for ob in obstacles:
        free &= ob.depth(nodes) <= 0
    idx = np.arange(len(nodes)).reshape(nx, ny)
    rows, cols, w = [], [], []
    for dx, dy in ((1, 0), (0, 1), (1, 1), (1, -1)):
        a = idx[max(0, -dx):nx - max(0, dx), max(0, -dy):ny - max(0, dy)].ravel()
        b = idx[max(0, dx):nx - max(0, -dx) or None, max(0, dy):ny - max(0, -dy) or None].ravel()
        ok = free[a] & free[b]
        rows.append(a[ok])
        cols.append(b[ok])
        w.append(np.full(ok.sum(), resolution * np.hypot(dx, dy)))
    rows, cols, w = map(np.concatenate, (rows, cols, w))
    graph = coo_matrix((w, (rows, cols)), shape=(len(nodes),) * 2).tocsr()

    def nearest(p):
        d = np.where(free, ((nodes - p) ** 2).sum(1), np.inf)
        return int(np.argmin(d))

    starts = np.array([nearest(p) for p in x0])
    _, pred = dijkstra(graph, directed=False, indices=starts, return_predecessors=True)
    tk = np.asarray(knot_times, dtype=float)
    out = (1 - tk)[None, :, None] * x0[:, None] + tk[None, :, None] * x1[:, None]
    for p in range(len(x0)):
        j = nearest(x1[p])
        if pred[p, j] < 0 and j != starts[p]:
            continue
        chain = [j]
        while chain[-1] != starts[p]:
            chain.append(pred[p, chain[-1]])
        poly = np.concatenate([x0[p:p + 1], nodes[chain[::-1]], x1[p:p + 1]])
        arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(poly, axis=0), axis=1))])
        s = tk * arc[-1]
        out[p] = np.stack([np.interp(s, arc, poly[:, k]) for k in range(2)], axis=1)
    return out


def generate_keypoints(scene: Scene, n_kp: int, epsilon: float = 0.01,
                       rng: Optional[np.random.Generator] = None, n_steps: int = 64,
                       opts: Optional[SplineOptions] = None, margin: float = 0.3) -> KeypointSet:
    """Draw, pair and connect ``n_kp`` aligned samples.

    Sources and targets are paired by entropic OT (cost normalised by its
    mean, one target drawn from each source's plan row). Crowd trajectories
    are the means of splines started on lattice routes around the obstacles
    and optimised against the obstacle penalty on obstacles inflated by
    ``margin``; opinion trajectories are straight lines.
    """
    if n_kp < 1:
        raise ValueError("n_kp must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    x0 = scene.sample_source(n_kp, rng)
    x1 = scene.sample_target(n_kp, rng)
    cols, _ = _pairing(x0, x1, epsilon, rng)
    x1 = x1[cols]
    if not scene.is_crowd:
        return KeypointSet.straight(x0, x1, n_steps)

    opts = opts or SplineOptions(n_knots=12, steps=400, lr=0.1)
    inflated = tuple(ob.inflate(margin) for ob in scene.obstacles)

    def penalty(p):
        return obstacle_cost_grad(p, inflated)

    start = route_around(x0, x1, inflated, uniform_knot_times(opts.n_knots))
    path, _ = optimize_splines(x0, x1, None, None, scene.sigma, scene.sigma, opts, rng, penalty,
                               init_means=start)
    grid = np.linspace(0.0, 1.0, n_steps)
    traj = spline_eval(path, np.broadcast_to(grid, (n_kp, n_steps)))[0]
    traj[:, 0] = x0
    traj[:, -1] = x1
    return KeypointSet(traj, grid)
