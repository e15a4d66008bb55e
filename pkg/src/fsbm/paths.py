"""Spline-parameterized Gaussian bridges between pinned endpoints.

A path carries control points for its mean ``I(t)`` and standard deviation
``sigma(t)``. The mean is a natural cubic spline through
``(0, x0), (t_k, mean_k), (1, x1)``. The standard deviation is written as
``nu * sqrt(t (1 - t)) * exp(rho(t))`` where ``rho`` is a natural cubic spline
through ``(0, 0), (t_k, log(std_k / (nu sqrt(t_k (1 - t_k))))), (1, 0)``, so
``sigma`` passes through every std knot, vanishes at both ends and is positive
inside. With all std knots on the Brownian profile the path is exactly the
Brownian bridge.

Every function accepts a single path (``x0`` of shape ``(d,)``) or a batch of
paths sharing knot times (``x0`` of shape ``(P, d)``). For a batch, ``t`` must
carry the pair axis first.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import expit

from .guidance import GuidanceContext, keypoint_position, lagrangian
from .guidance import guidance_grad, guidance_laplacian

__all__ = [
    "T_MIN",
    "SIGMA_FLOOR",
    "MAX_KNOTS",
    "ConditionalPath",
    "PathSample",
    "SplineOptions",
    "OptimizeInfo",
    "uniform_knot_times",
    "spline_eval",
    "brownian_bridge_path",
    "sample_conditional",
    "conditional_drift",
    "reverse_conditional_drift",
    "conditional_objective",
    "sample_times",
    "objective_and_grad",
    "optimize_spline",
    "optimize_splines",
]

T_MIN = 1e-3
SIGMA_FLOOR = 1e-6
QUAD_EPS = 1e-9
MAX_KNOTS = 30


def uniform_knot_times(k: int) -> np.ndarray:
    return np.arange(1, k + 1) / (k + 1)


def _base_std(t, nu):
    with np.errstate(invalid="ignore", divide="ignore"):
        q = t * (1.0 - t)
        b = nu * np.sqrt(np.maximum(q, 0.0))
        db = nu * (1.0 - 2.0 * t) / (2.0 * np.sqrt(q))
    return b, db


# Time integrals run over [t_min, 1 - t_min] in the logit variable
# v = log(t / (1 - t)). The bridge drift energy grows like 1/(1 - t) near the
# end; dt = t (1 - t) dv cancels that, so both the quadrature and the Monte
# Carlo times see a bounded integrand.

def _logit_range(t_min):
    return np.log(t_min / (1 - t_min)), np.log((1 - t_min) / t_min)


def _time_weight(t, t_min):
    """Density ratio turning logit-uniform times into averages over uniform t."""
    lo, hi = _logit_range(t_min)
    return t * (1 - t) * (hi - lo) / (1 - 2 * t_min)


def sample_times(rng: np.random.Generator, shape, t_min: float = T_MIN):
    """Times uniform in logit(t) on [t_min, 1 - t_min]; weight them with the density ratio."""
    lo, hi = _logit_range(t_min)
    return expit(rng.uniform(lo, hi, size=shape))


@dataclass(frozen=True, eq=False)
class ConditionalPath:
    x0: np.ndarray
    x1: np.ndarray
    knot_times: np.ndarray
    mean_knots: np.ndarray
    std_knots: np.ndarray
    nu: float

    def __post_init__(self):
        for name in ("x0", "x1", "knot_times", "mean_knots", "std_knots"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        k = self.knot_times.size
        if k > MAX_KNOTS:
            raise ValueError(f"at most {MAX_KNOTS} interior knots are supported")
        if k and (self.knot_times[0] <= 0 or self.knot_times[-1] >= 1
                  or np.any(np.diff(self.knot_times) <= 0)):
            raise ValueError("knot times must increase strictly inside (0, 1)")
        if self.x0.shape != self.x1.shape or self.x0.ndim not in (1, 2):
            raise ValueError("x0 and x1 must share shape (d,) or (P, d)")
        if self.mean_knots.shape != self.batch_shape + (k, self.dim):
            raise ValueError("mean_knots has the wrong shape")
        if self.std_knots.shape != self.batch_shape + (k,):
            raise ValueError("std_knots has the wrong shape")
        if np.any(self.std_knots <= 0):
            raise ValueError("std knots must be positive")
        if self.nu <= 0:
            raise ValueError("nu must be positive")

    @property
    def dim(self) -> int:
        return self.x0.shape[-1]

    @property
    def batch_shape(self) -> tuple:
        return self.x0.shape[:-1]

    @property
    def n_knots(self) -> int:
        return self.knot_times.size

    def __len__(self):
        if not self.batch_shape:
            raise TypeError("single path has no length")
        return self.batch_shape[0]

    def __getitem__(self, idx):
        if not self.batch_shape:
            raise TypeError("cannot index a single path")
        return replace(self, x0=self.x0[idx], x1=self.x1[idx],
                       mean_knots=self.mean_knots[idx], std_knots=self.std_knots[idx])

    @property
    def log_ratio(self) -> np.ndarray:
        """rho at the knots: log of std knots relative to the Brownian profile."""
        b, _ = _base_std(self.knot_times, self.nu)
        return np.log(self.std_knots / b)

    def node_values(self) -> np.ndarray:
        return np.concatenate([self.x0[..., None, :], self.mean_knots, self.x1[..., None, :]],
                              axis=-2)


class PathSample(NamedTuple):
    t: np.ndarray
    x_t: np.ndarray
    z: np.ndarray


@lru_cache(maxsize=64)
def _identity_spline(nodes: tuple) -> CubicSpline:
    n = len(nodes)
    return CubicSpline(np.asarray(nodes), np.eye(n), bc_type="natural")


def _weights(knot_times, t):
    """Spline weights for values and derivatives: shape t.shape + (K + 2,)."""
    nodes = (0.0,) + tuple(float(v) for v in knot_times) + (1.0,)
    cs = _identity_spline(nodes)
    flat = np.asarray(t, dtype=float).ravel()
    W = cs(flat).reshape(np.shape(t) + (len(nodes),))
    dW = cs(flat, 1).reshape(np.shape(t) + (len(nodes),))
    return W, dW


def _expand(arr, path, t):
    # Align per-pair arrays with the extra sample axes of t.
    extra = np.ndim(t) - len(path.batch_shape)
    if extra < 0:
        raise ValueError("t must carry the pair axis for a batch of paths")
    shape = path.batch_shape + (1,) * extra + arr.shape[len(path.batch_shape):]
    return arr.reshape(shape)


def _eval(path: ConditionalPath, t):
    t = np.asarray(t, dtype=float)
    W, dW = _weights(path.knot_times, t)
    Y = _expand(path.node_values(), path, t)
    I = np.einsum("...j,...jd->...d", W, Y)
    dI = np.einsum("...j,...jd->...d", dW, Y)
    rho_k = _expand(path.log_ratio, path, t)
    rho = np.einsum("...j,...j->...", W[..., 1:-1], rho_k)
    drho = np.einsum("...j,...j->...", dW[..., 1:-1], rho_k)
    b, db = _base_std(t, path.nu)
    e = np.exp(rho)
    sigma = b * e
    inner = (t > 0) & (t < 1)
    with np.errstate(invalid="ignore"):
        dsigma = np.where(inner, db * e + sigma * drho, np.where(t <= 0, np.inf, -np.inf))
    sigma = np.where(inner, np.maximum(sigma, SIGMA_FLOOR), 0.0)
    # pin the endpoints exactly; the spline basis is only accurate to round-off there
    x0 = _expand(path.x0[..., None, :], path, t)[..., 0, :]
    x1 = _expand(path.x1[..., None, :], path, t)[..., 0, :]
    I = np.where((t <= 0)[..., None], x0, np.where((t >= 1)[..., None], x1, I))
    return I, dI, sigma, dsigma, W, dW


def spline_eval(path: ConditionalPath, t):
    """Return ``(I(t), dI/dt, sigma(t), dsigma/dt)``.

    ``sigma`` is clamped below at ``SIGMA_FLOOR`` on the open interval and is
    exactly 0 at the endpoints, where ``dsigma/dt`` is reported as +/-inf.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    I, dI, sigma, dsigma, _, _ = _eval(path, t)
    return I, dI, sigma, dsigma


def brownian_bridge_path(x0, x1, nu: float, knot_times=None, n_knots: int = 8) -> ConditionalPath:
    """Brownian bridge written in spline form: mean on the chord, std nu sqrt(t(1-t))."""
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    tk = uniform_knot_times(n_knots) if knot_times is None else np.asarray(knot_times, float)
    shape_b = x0.shape[:-1]
    mean = (1 - tk)[:, None] * x0[..., None, :] + tk[:, None] * x1[..., None, :]
    std = np.broadcast_to(_base_std(tk, nu)[0], shape_b + tk.shape).copy()
    return ConditionalPath(x0, x1, tk, mean, std, float(nu))


def sample_conditional(path: ConditionalPath, t, rng: np.random.Generator) -> PathSample:
    """Draw ``X_t = I(t) + sigma(t) z`` with ``z ~ N(0, I_d)``."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0) or np.any(t >= 1):
        raise ValueError("sampling needs 0 < t < 1")
    I, _, sigma, _ = spline_eval(path, t)
    z = rng.standard_normal(I.shape)
    return PathSample(t, I + sigma[..., None] * z, z)


def _check_open(t):
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0) or np.any(t >= 1):
        raise ValueError("the conditional drift is singular at t = 0 and t = 1")
    return t


def conditional_drift(path: ConditionalPath, x_t, t):
    """dI/dt + (dsigma/sigma - nu^2 / (2 sigma^2)) (x_t - I)."""
    t = _check_open(t)
    I, dI, sigma, dsigma = spline_eval(path, t)
    s = sigma[..., None]
    return dI + (dsigma[..., None] / s - path.nu ** 2 / (2 * s * s)) * (np.asarray(x_t) - I)


def reverse_conditional_drift(path: ConditionalPath, x_t, t):
    """Drift of the time-reversed bridge, for integration in s = 1 - t.

    Equals ``-u + nu^2 * score`` with the Gaussian score ``(I - x_t) / sigma^2``.
    """
    t = _check_open(t)
    I, dI, sigma, dsigma = spline_eval(path, t)
    s = sigma[..., None]
    x_t = np.asarray(x_t, dtype=float)
    u = dI + (dsigma[..., None] / s - path.nu ** 2 / (2 * s * s)) * (x_t - I)
    return -u + path.nu ** 2 * (I - x_t) / (s * s)


def _broadcast_pairs(path, values, extra):
    values = np.asarray(values)
    shape = path.batch_shape + (1,) * extra + values.shape[len(path.batch_shape):]
    return values.reshape(shape)


def conditional_objective(path: ConditionalPath, guidance: Optional[GuidanceContext], i,
                          sigma: float, mc_times: int, mc_samples: int,
                          rng: np.random.Generator, t_min: float = T_MIN,
                          return_samples: bool = False):
    """Monte Carlo estimate of the guided kinetic objective of a conditional path.

    Averages ``0.5|u|^2 + |u . grad G| + sigma^2/2 lap G`` over uniform
    ``t in [t_min, 1 - t_min]`` and ``X_t ~ N(I_t, sigma_t^2 I)``, with ``u`` the
    closed-form conditional drift at ``X_t``. Times are drawn uniform in
    logit(t) and reweighted, which keeps the estimate unbiased while taming
    the 1/(1 - t) growth of the drift energy. ``guidance=None`` or ``alpha=0``
    keeps only the kinetic term. With ``return_samples`` the per-draw integrand
    of shape ``batch + (mc_times, mc_samples)`` is returned instead of the mean.
    """
    if mc_times < 1 or mc_samples < 1:
        raise ValueError("mc_times and mc_samples must be >= 1")
    B = path.batch_shape
    t = sample_times(rng, B + (mc_times,), t_min)
    z = rng.standard_normal(B + (mc_times, mc_samples, path.dim))
    I, dI, sd, dsd, _, _ = _eval(path, t)
    a = dsd - path.nu ** 2 / (2 * sd)
    X = I[..., None, :] + sd[..., None, None] * z
    u = dI[..., None, :] + a[..., None, None] * z
    if guidance is None or guidance.alpha == 0:
        vals = 0.5 * (u * u).sum(-1)
    else:
        tt = np.broadcast_to(t[..., None], X.shape[:-1])
        x0 = _broadcast_pairs(path, path.x0, 2)
        ii = _broadcast_pairs(path, np.asarray(i), 2)
        ii = np.broadcast_to(ii, X.shape[:-1])
        grad = guidance_grad(X, tt, x0, ii, guidance)
        lap = guidance_laplacian(X, tt, x0, ii, guidance)
        vals = lagrangian(u, grad, lap, sigma)
    vals = vals * _time_weight(t, t_min)[..., None]
    if return_samples:
        return vals
    out = vals.mean(axis=(-2, -1))
    return float(out) if out.ndim == 0 else out


@dataclass
class SplineOptions:
    """Knobs for the simulation-free spline optimisation.

    The kinetic part is integrated in closed form over ``z`` on a Gauss-Legendre
    grid; guidance terms are Monte Carlo with fresh draws each step. Steps are
    preconditioned by the Hessian of the guidance-free objective at the
    Brownian bridge and follow a cosine-decayed learning rate.
    """

    n_knots: int = 8
    steps: int = 200
    lr: float = 0.05
    mc_times: int = 8
    mc_samples: int = 16
    t_min: float = T_MIN
    n_quad: int = 48
    max_step: float = 1.0
    max_log_step: float = 0.25
    divergence_factor: float = 10.0
    eval_times: int = 32
    eval_samples: int = 16
    penalty_points: int = 129

    def __post_init__(self):
        if not 0 <= self.n_knots <= MAX_KNOTS:
            raise ValueError(f"n_knots must be in [0, {MAX_KNOTS}]")
        if min(self.steps, self.mc_times, self.mc_samples, self.n_quad) < 1:
            raise ValueError("counts must be >= 1")


@dataclass
class OptimizeInfo:
    initial: np.ndarray
    final: np.ndarray
    stderr: np.ndarray  # of the initial estimate, per pair
    diverged: np.ndarray
    reverted: np.ndarray
    history: list = field(default_factory=list)


# A penalty maps points (..., d) to (cost (...), grad (..., d)).
Penalty = Callable[[np.ndarray], tuple]


def _segment_quadrature(knot_times, n_quad):
    """Gauss-Legendre per spline segment on [0, 1].

    The two end segments are mapped through logit(t), which resolves the
    square-root behaviour of the std at the endpoints; inner segments get
    ``max(4, n_quad // 6)`` plain nodes each.
    """
    edges = np.concatenate([[0.0], knot_times, [1.0]])
    ts, ws = [], []
    g, w = np.polynomial.legendre.leggauss(n_quad)
    for lo_t, hi_t in ((QUAD_EPS, edges[1]), (edges[-2], 1 - QUAD_EPS)):
        lo, hi = np.log(lo_t / (1 - lo_t)), np.log(hi_t / (1 - hi_t))
        t = expit(0.5 * (hi - lo) * g + 0.5 * (hi + lo))
        ts.append(t)
        ws.append(0.5 * w * (hi - lo) * t * (1 - t))
    g, w = np.polynomial.legendre.leggauss(max(4, n_quad // 6))
    for a, b in zip(edges[1:-2], edges[2:-1]):
        ts.append(0.5 * (a + b) + 0.5 * (b - a) * g)
        ws.append(0.5 * (b - a) * w)
    t, wt = np.concatenate(ts), np.concatenate(ws)
    order = np.argsort(t)
    return t[order], wt[order]


class _Setup:
    """Quadrature grids, spline weights and preconditioners shared by a batch."""

    def __init__(self, knot_times, nu, dim, opts: SplineOptions, penalty=None):
        self.knot_times = knot_times
        self.nu = nu
        self.dim = dim
        self.opts = opts
        # the std term is integrated relative to the bridge, whose own
        # 1/(1 - t) energy is added back in closed form on [t_min, 1 - t_min];
        # the difference is finite on [0, 1], leaving the bridge stationary
        self.tq, self.wq = _segment_quadrature(knot_times, opts.n_quad)
        self.wq = self.wq / (1 - 2 * opts.t_min)
        self.bq, self.dbq = _base_std(self.tq, nu)
        a_bb = _sigma_terms(self.bq, self.dbq, 0.0, 0.0, nu)[2]
        self.a_bb2 = a_bb * a_bb

        def F(t):
            return -t - np.log1p(-t)
        self.J_bb = 0.5 * dim * nu ** 2 * (F(1 - opts.t_min) - F(opts.t_min)) / (1 - 2 * opts.t_min)
        # the mean's energy is finite on [0, 1]: Gauss-Legendre per spline
        # segment integrates it exactly, so the chord stays stationary
        edges = np.concatenate([[0.0], knot_times, [1.0]])
        g3, w3 = np.polynomial.legendre.leggauss(3)
        mid, half = 0.5 * (edges[1:] + edges[:-1]), 0.5 * np.diff(edges)
        self.tm = (mid[:, None] + half[:, None] * g3).ravel()
        self.wm = (half[:, None] * w3).ravel() / (1 - 2 * opts.t_min)
        _, self.dWm = _weights(knot_times, self.tm)
        self.Wq, self.dWq = _weights(knot_times, self.tq)
        self.penalty = penalty
        if penalty is not None:
            self.tp = np.linspace(0.0, 1.0, opts.penalty_points)
            self.wp = np.full(self.tp.size, 1.0 / self.tp.size)
            self.Wp, _ = _weights(knot_times, self.tp)

        K = knot_times.size
        dWi = self.dWm[:, 1:-1]
        M = dWi.T @ (self.wm[:, None] * dWi)
        R, dR = self.Wq[:, 1:-1], self.dWq[:, 1:-1]
        J = (self.dbq + nu ** 2 / (2 * self.bq))[:, None] * R + self.bq[:, None] * dR
        H = dim * J.T @ (self.wq[:, None] * J)
        ridge = 1e-10 * np.eye(K)
        self.M_inv = np.linalg.inv(M + ridge * np.trace(M))
        self.H_inv = np.linalg.inv(H + ridge * np.trace(H))


def _sigma_terms(b, db, rho, drho, nu):
    e = np.exp(rho)
    sd = b * e
    dsd = db * e + sd * drho
    live = sd > SIGMA_FLOOR
    sd = np.maximum(sd, SIGMA_FLOOR)
    a = dsd - nu ** 2 / (2 * sd)
    return sd, dsd, a, live


def objective_and_grad(Yint, rho, x0, x1, setup: _Setup, guidance=None, idx=None,
                       sigma: float = 0.0, draws=None):
    """Surrogate objective per pair and its gradient in the interior knots.

    ``Yint`` has shape ``(P, K, d)`` and ``rho`` shape ``(P, K)``. ``draws`` is
    ``(t, z)`` with shapes ``(P, M)`` and ``(P, M, S, d)`` for the guidance
    Monte Carlo term, ``t`` drawn by :func:`sample_times`; it is ignored when
    guidance is off.
    Returns ``(J, grad_Y, grad_rho)``.
    """
    nu = setup.nu
    d = setup.dim
    Y = np.concatenate([x0[:, None], Yint, x1[:, None]], axis=1)
    wq = setup.wq

    # kinetic part, expectation over z in closed form
    dI = np.einsum("qj,pjd->pqd", setup.dWm, Y)
    J = (0.5 * (dI * dI).sum(-1) * setup.wm).sum(-1)
    gY = np.einsum("qk,pqd->pkd", setup.wm[:, None] * setup.dWm[:, 1:-1], dI)
    R, dR = setup.Wq[:, 1:-1], setup.dWq[:, 1:-1]
    rq = rho @ R.T
    drq = rho @ dR.T
    sd, dsd, a, live = _sigma_terms(setup.bq, setup.dbq, rq, drq, nu)
    J = J + setup.J_bb + (0.5 * d * (a * a - setup.a_bb2) * wq).sum(-1)
    da = (dsd + nu ** 2 / (2 * sd))[..., None] * R + sd[..., None] * dR
    gR = np.einsum("pq,pqk->pk", wq * d * a * live, da)

    if setup.penalty is not None:
        Ip = np.einsum("qj,pjd->pqd", setup.Wp, Y)
        c, gc = setup.penalty(Ip)
        J = J + (c * setup.wp).sum(-1)
        gY = gY + np.einsum("qk,pqd->pkd", setup.wp[:, None] * setup.Wp[:, 1:-1], gc)

    if guidance is not None and guidance.alpha > 0:
        t, z = draws
        P, M, S, _ = z.shape
        W, dW = _weights(setup.knot_times, t)
        I = np.einsum("pmj,pjd->pmd", W, Y)
        dIm = np.einsum("pmj,pjd->pmd", dW, Y)
        Rm, dRm = W[..., 1:-1], dW[..., 1:-1]
        rm = np.einsum("pmk,pk->pm", Rm, rho)
        drm = np.einsum("pmk,pk->pm", dRm, rho)
        b, db = _base_std(t, nu)
        sdm, dsdm, am, livem = _sigma_terms(b, db, rm, drm, nu)
        X = I[:, :, None] + sdm[..., None, None] * z
        u = dIm[:, :, None] + am[..., None, None] * z
        kp = keypoint_position(guidance, idx[:, None, None], t[:, :, None])
        diff = X - kp
        sg = np.sign(diff)
        dist = np.abs(diff).sum(-1)
        c0 = np.abs(x0 - guidance.keypoints.source_points[idx]).sum(-1)
        alpha = guidance.alpha
        gradG = 2 * alpha * (dist - c0[:, None, None])[..., None] * sg
        s = (u * gradG).sum(-1)
        ss = np.sign(s)
        lap = 2 * alpha * np.count_nonzero(diff, axis=-1)
        wt = _time_weight(t, setup.opts.t_min)[..., None]
        J = J + (wt * (np.abs(s) + 0.5 * sigma ** 2 * lap)).mean(axis=(1, 2))
        dTdu = (wt * ss)[..., None] * gradG
        dTdX = (wt * ss * 2 * alpha * (sg * u).sum(-1))[..., None] * sg
        n = M * S
        gY = gY + (np.einsum("pmk,pmd->pkd", Rm, dTdX.sum(2))
                   + np.einsum("pmk,pmd->pkd", dRm, dTdu.sum(2))) / n
        A = (dTdX * z).sum((2, 3))
        Bz = (dTdu * z).sum((2, 3))
        dam = (dsdm + nu ** 2 / (2 * sdm))[..., None] * Rm + sdm[..., None] * dRm
        gR = gR + (np.einsum("pm,pmk->pk", A * sdm * livem, Rm)
                   + np.einsum("pm,pmk->pk", Bz * livem, dam)) / n
    return J, gY, gR


def _path_from(x0, x1, knot_times, Yint, rho, nu):
    b, _ = _base_std(knot_times, nu)
    return ConditionalPath(x0, x1, knot_times, Yint, b * np.exp(rho), nu)


def _crn_objective(path, guidance, idx, sigma, opts, seed, setup):
    rng = np.random.default_rng(seed)
    vals = conditional_objective(path, guidance, idx, sigma, opts.eval_times,
                                 opts.eval_samples, rng, opts.t_min, return_samples=True)
    vals = vals.reshape(vals.shape[0], -1)
    if setup.penalty is not None:
        Ip = np.einsum("qj,pjd->pqd", setup.Wp, path.node_values())
        vals = vals + (setup.penalty(Ip)[0] * setup.wp).sum(-1)[:, None]
    return vals


def optimize_splines(x0, x1, guidance: Optional[GuidanceContext], idx, nu: float,
                     sigma: float, opts: SplineOptions, rng: np.random.Generator,
                     penalty: Optional[Penalty] = None, init_means=None):
    """Optimise the conditional paths of a batch of pairs independently.

    Starts every pair from its Brownian bridge and takes preconditioned
    gradient steps on the control points. A pair whose surrogate objective
    exceeds ``divergence_factor`` times its initial value is frozen at the
    initialisation and flagged. At the end the initial and optimised paths are
    compared on a common-random-numbers estimate of the objective and any pair
    that got worse is reverted. ``init_means`` (shape ``(P, K, d)``) replaces
    the chord as the starting mean; the reference for reverting is then the
    path with those means and the Brownian-bridge std.

    Returns ``(path_batch, OptimizeInfo)``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    P, d = x0.shape
    tk = uniform_knot_times(opts.n_knots)
    init = brownian_bridge_path(x0, x1, nu, tk)
    if init_means is not None:
        init = ConditionalPath(x0, x1, tk, np.asarray(init_means, float).reshape(init.mean_knots.shape),
                               init.std_knots, nu)
    guided = guidance is not None and guidance.alpha > 0
    if guided:
        idx = np.asarray(idx, dtype=int).reshape(P)
    if opts.n_knots == 0:
        z = np.zeros(P)
        return init, OptimizeInfo(z, z.copy(), z.copy(), np.zeros(P, bool), np.zeros(P, bool))

    setup = _Setup(tk, nu, d, opts, penalty)
    Y = init.mean_knots.copy()
    rho = np.zeros((P, tk.size))

    def draws():
        if not guided:
            return None
        t = sample_times(rng, (P, opts.mc_times), opts.t_min)
        return t, rng.standard_normal((P, opts.mc_times, opts.mc_samples, d))

    diverged = np.zeros(P, bool)
    J0 = None
    history = []
    for step in range(opts.steps):
        J, gY, gR = objective_and_grad(Y, rho, x0, x1, setup, guidance, idx, sigma, draws())
        if J0 is None:
            J0 = J.copy()
        history.append(float(J.mean()))
        bad = ~np.isfinite(J) | (J > opts.divergence_factor * np.maximum(np.abs(J0), 1e-12))
        diverged |= bad
        lr = opts.lr * 0.5 * (1 + np.cos(np.pi * step / opts.steps))
        dY = -lr * np.einsum("kl,pld->pkd", setup.M_inv, gY)
        dR = -lr * gR @ setup.H_inv.T
        dY *= np.minimum(1.0, opts.max_step / np.maximum(np.abs(dY).max((1, 2)), 1e-300))[:, None, None]
        dR *= np.minimum(1.0, opts.max_log_step / np.maximum(np.abs(dR).max(1), 1e-300))[:, None]
        live = ~diverged
        Y[live] += dY[live]
        rho[live] += dR[live]
    Y[diverged] = init.mean_knots[diverged]
    rho[diverged] = 0.0

    path = _path_from(x0, x1, tk, Y, rho, nu)
    seed = int(rng.integers(2 ** 63))
    before = _crn_objective(init, guidance, idx, sigma, opts, seed, setup)
    after = _crn_objective(path, guidance, idx, sigma, opts, seed, setup)
    diff = after - before
    # standard error of the objective estimate itself
    stderr = before.std(1, ddof=1) / np.sqrt(before.shape[1])
    worse = diff.mean(1) > 0
    reverted = worse & ~diverged
    keep = diverged | worse
    Y[keep] = init.mean_knots[keep]
    rho[keep] = 0.0
    path = _path_from(x0, x1, tk, Y, rho, nu)
    final = np.where(keep, before.mean(1), after.mean(1))
    return path, OptimizeInfo(before.mean(1), final, stderr, diverged, reverted, history)


def optimize_spline(x0, x1, guidance: Optional[GuidanceContext], i, opts: SplineOptions,
                    rng: np.random.Generator, nu: float = 1.0, sigma: Optional[float] = None,
                    penalty: Optional[Penalty] = None):
    """Single-pair wrapper around :func:`optimize_splines`."""
    sigma = nu if sigma is None else sigma
    idx = None if i is None else np.array([i])
    batch, info = optimize_splines(np.asarray(x0, float)[None], np.asarray(x1, float)[None],
                                   guidance, idx, nu, sigma, opts, rng, penalty)
    return batch[0], info
