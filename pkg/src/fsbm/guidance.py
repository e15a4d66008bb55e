"""Keypoint guidance: the distance-preserving guidance function and its calculus.

All functions broadcast over leading axes: states are ``(..., d)``, times and
keypoint indices are ``(...)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "KeypointSet",
    "GuidanceContext",
    "assign_keypoint",
    "assign_keypoints",
    "keypoint_position",
    "guidance_value",
    "guidance_grad",
    "guidance_laplacian",
    "g_coefficient",
    "hamiltonian",
    "lagrangian",
    "optimal_drift",
    "bregman_residual",
]

_TINY = 1e-12


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """Aligned (source, target) pairs with their fixed trajectories.

    ``trajectories`` has shape ``(N, T, d)`` on ``time_grid`` (``T`` values
    from 0 to 1); the first and last slices are the source and target points.
    """

    trajectories: np.ndarray
    time_grid: np.ndarray

    def __post_init__(self):
        traj = np.asarray(self.trajectories, dtype=float)
        grid = np.asarray(self.time_grid, dtype=float)
        if traj.ndim != 3 or traj.shape[0] < 1:
            raise ValueError("trajectories must have shape (N, T, d) with N >= 1")
        if grid.shape != (traj.shape[1],) or grid.size < 2:
            raise ValueError("time_grid must have one entry per trajectory step")
        if grid[0] != 0.0 or grid[-1] != 1.0 or np.any(np.diff(grid) <= 0):
            raise ValueError("time_grid must increase strictly from 0 to 1")
        object.__setattr__(self, "trajectories", traj)
        object.__setattr__(self, "time_grid", grid)

    @classmethod
    def straight(cls, source, target, n_steps: int = 64) -> "KeypointSet":
        """Keypoints joined by straight lines on a uniform grid."""
        source = np.atleast_2d(np.asarray(source, dtype=float))
        target = np.atleast_2d(np.asarray(target, dtype=float))
        grid = np.linspace(0.0, 1.0, n_steps)
        traj = (1 - grid)[None, :, None] * source[:, None] + grid[None, :, None] * target[:, None]
        traj[:, 0] = source
        traj[:, -1] = target
        return cls(traj, grid)

    @property
    def source_points(self) -> np.ndarray:
        return self.trajectories[:, 0]

    @property
    def target_points(self) -> np.ndarray:
        return self.trajectories[:, -1]

    @property
    def n(self) -> int:
        return self.trajectories.shape[0]

    @property
    def dim(self) -> int:
        return self.trajectories.shape[2]

    def __eq__(self, other):
        if not isinstance(other, KeypointSet):
            return NotImplemented
        return (np.array_equal(self.trajectories, other.trajectories)
                and np.array_equal(self.time_grid, other.time_grid))


@dataclass(frozen=True)
class GuidanceContext:
    keypoints: KeypointSet
    alpha: float = 1.0
    assignment_metric: str = "L2"
    guidance_metric: str = "L1"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.assignment_metric != "L2" or self.guidance_metric != "L1":
            raise ValueError("only L2 assignment and L1 guidance distances are supported")


def assign_keypoints(x0, ctx: GuidanceContext) -> np.ndarray:
    """Index of the nearest keypoint source (Euclidean) for each row of ``x0``.

    Ties resolve to the lowest index.
    """
    x0 = np.asarray(x0, dtype=float)
    src = ctx.keypoints.source_points
    flat = x0.reshape(-1, src.shape[1])
    d2 = (flat * flat).sum(1)[:, None] - 2 * flat @ src.T + (src * src).sum(1)[None, :]
    return np.argmin(d2, axis=1).reshape(x0.shape[:-1])


def assign_keypoint(x0, ctx: GuidanceContext) -> int:
    return int(assign_keypoints(np.asarray(x0, dtype=float)[None], ctx)[0])


def keypoint_position(ctx: GuidanceContext, i, t) -> np.ndarray:
    """Position of keypoint ``i`` at time ``t`` by linear interpolation in time."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    kp = ctx.keypoints
    i = np.asarray(i)
    i, t = np.broadcast_arrays(i, t)
    grid = kp.time_grid
    j = np.clip(np.searchsorted(grid, t, side="right") - 1, 0, grid.size - 2)
    w = ((t - grid[j]) / (grid[j + 1] - grid[j]))[..., None]
    traj = kp.trajectories
    return (1 - w) * traj[i, j] + w * traj[i, j + 1]


def _offsets(x_t, t, x0, i, ctx):
    x_t = np.asarray(x_t, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    diff = x_t - keypoint_position(ctx, i, t)
    u = np.abs(diff).sum(-1)
    c = np.abs(x0 - ctx.keypoints.source_points[np.asarray(i)]).sum(-1)
    return diff, u, c


def guidance_value(x_t, t, x0, i, ctx: GuidanceContext):
    """alpha * (|x_t - k_i(t)|_1 - |x0 - k_i(0)|_1)^2."""
    _, u, c = _offsets(x_t, t, x0, i, ctx)
    return ctx.alpha * (u - c) ** 2


def guidance_grad(x_t, t, x0, i, ctx: GuidanceContext):
    """Gradient in ``x_t``: 2 alpha (u - c) sign(x_t - k_i(t)), with sign(0) = 0."""
    diff, u, c = _offsets(x_t, t, x0, i, ctx)
    return 2.0 * ctx.alpha * (u - c)[..., None] * np.sign(diff)


def guidance_laplacian(x_t, t, x0, i, ctx: GuidanceContext):
    """Almost-everywhere Laplacian: 2 alpha times the count of nonzero offsets.

    The distributional terms on the coordinate kinks are dropped.
    """
    diff, _, _ = _offsets(x_t, t, x0, i, ctx)
    return 2.0 * ctx.alpha * np.count_nonzero(diff, axis=-1).astype(float)


def g_coefficient(a, grad_g):
    """Clipped projection coefficient of ``a`` on ``grad_g``; lies in [-1, 1].

    Returns 0 where ``|grad_g|^2 < 1e-12``.
    """
    a = np.asarray(a, dtype=float)
    grad_g = np.asarray(grad_g, dtype=float)
    inner = (a * grad_g).sum(-1)
    sq = (grad_g * grad_g).sum(-1)
    safe = np.where(sq < _TINY, 1.0, sq)
    out = np.where(np.abs(inner) <= sq, inner / safe, np.sign(inner))
    out = np.where(sq < _TINY, 0.0, out)
    return out[()] if out.ndim == 0 else out


def lagrangian(u, grad_g, laplacian_g, sigma):
    """Per-state integrand: 0.5|u|^2 + |u . grad G| + sigma^2/2 lap G."""
    u = np.asarray(u, dtype=float)
    return (0.5 * (u * u).sum(-1) + np.abs((u * np.asarray(grad_g)).sum(-1))
            + 0.5 * sigma ** 2 * np.asarray(laplacian_g))


def optimal_drift(a, grad_g):
    """Maximiser of <u, a> - L(u): a - g(a . grad G) grad G."""
    g = np.asarray(g_coefficient(a, grad_g))
    return np.asarray(a) - g[..., None] * np.asarray(grad_g)


def hamiltonian(a, grad_g, laplacian_g, sigma):
    """Convex conjugate of :func:`lagrangian` in ``u``."""
    r = optimal_drift(a, grad_g)
    return 0.5 * (r * r).sum(-1) - 0.5 * sigma ** 2 * np.asarray(laplacian_g)


def bregman_residual(a_theta, u_star, grad_g):
    """|a_theta - u_star - g(a_theta . grad G) grad G|^2."""
    g = np.asarray(g_coefficient(a_theta, grad_g))
    r = np.asarray(a_theta) - np.asarray(u_star) - g[..., None] * np.asarray(grad_g)
    return (r * r).sum(-1)
