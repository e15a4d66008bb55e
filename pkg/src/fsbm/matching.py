"""Feedback bridge matching driver with the forward-backward alternation.

Each epoch samples a coupling, fits conditional Gaussian paths to its pairs
(guided by the keypoints when ``alpha > 0``), and regresses one of two drift
networks on the closed-form conditional drifts. Even epochs fit the forward
net on couplings simulated backward from the target; odd epochs fit the
backward net on couplings simulated forward from the source. Epoch 0 uses the
independent coupling.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .driftnet import (DriftNetwork, OptimizerState, adamw_step, regression_grads,
                       save_checkpoint)
from .guidance import GuidanceContext, assign_keypoints
from .paths import (T_MIN, SplineOptions, brownian_bridge_path, conditional_drift,
                    optimize_splines, reverse_conditional_drift, sample_conditional)
from .scenes import INITIAL_CONDITIONS, Scene
from .transport import exact_w2, knn_kl, subsampled_w2

__all__ = [
    "FORWARD",
    "BACKWARD",
    "Coupling",
    "TrainConfig",
    "TrainState",
    "DivergenceError",
    "TrainingAbort",
    "euler_maruyama",
    "sample_coupling",
    "train_epoch",
    "run_fsbm",
    "simulate",
    "evaluate",
]

FORWARD = "Forward"
BACKWARD = "Backward"


class DivergenceError(RuntimeError):
    """Raised when a simulated particle leaves the finite reals."""


class TrainingAbort(RuntimeError):
    """Raised when too many spline optimisations diverge in one epoch."""


@dataclass
class Coupling:
    x0: np.ndarray
    x1: np.ndarray
    source: str

    def __post_init__(self):
        if self.x0.shape != self.x1.shape:
            raise ValueError("coupled batches must have equal shapes")


@dataclass
class TrainConfig:
    epochs: int = 20
    pairs: int = 1024
    inner_steps: int = 500
    batch: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.0
    clip_norm: Optional[float] = 10.0
    sde_steps: int = 100
    time_groups: int = 16
    ema_decay: float = 0.99
    hidden: int = 128
    n_blocks: int = 4
    embed_dim: int = 32
    n_eval: int = 2048
    patience_tol: float = 1e-3
    max_diverged_frac: float = 0.1
    drift_clamp: float = 1e3
    spline: SplineOptions = field(default_factory=SplineOptions)
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "pairs", "inner_steps", "batch", "sde_steps", "time_groups",
                     "hidden", "n_blocks", "n_eval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if isinstance(self.spline, dict):
            self.spline = SplineOptions(**self.spline)


@dataclass
class TrainState:
    forward_net: DriftNetwork
    backward_net: DriftNetwork
    forward_opt: OptimizerState
    backward_opt: OptimizerState
    forward_ema: Optional[DriftNetwork] = None
    backward_ema: Optional[DriftNetwork] = None
    epoch: int = 0
    direction: str = FORWARD
    metrics_log: list = field(default_factory=list)
    timing_log: list = field(default_factory=list)

    @classmethod
    def fresh(cls, dim: int, config: TrainConfig, rng: np.random.Generator) -> "TrainState":
        def make():
            return DriftNetwork(dim, config.hidden, config.n_blocks, config.embed_dim, rng)

        def opt():
            return OptimizerState(lr=config.lr, weight_decay=config.weight_decay,
                                  clip_norm=config.clip_norm)
        f, b = make(), make()
        return cls(f, b, opt(), opt(), f.copy(), b.copy())


def _clamp(u, limit):
    norm = np.linalg.norm(u, axis=-1, keepdims=True)
    return u * np.minimum(1.0, limit / np.maximum(norm, 1e-300))


def euler_maruyama(net, x0, sigma: float, steps: int, rng: np.random.Generator,
                   direction: str = FORWARD, base_drift=None, clamp: float = 1e3) -> np.ndarray:
    """Simulate ``dX = (b(X) + u(X, s)) ds + sigma dW`` on a uniform grid of [0, 1].

    ``net`` is a drift network or a callable ``(x, s) -> drift``, or None for
    zero drift. For ``direction == BACKWARD`` the clock ``s`` runs from
    ``t = 1`` towards ``t = 0``; the caller supplies the backward net and
    target-side states. ``base_drift(x, rng)`` is only applied forward.
    The drift is clamped to norm ``clamp`` per particle.

    Returns the trajectory tensor of shape ``(steps + 1, n, d)``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(x0, dtype=float)
    dt = 1.0 / steps
    out = np.empty((steps + 1,) + x.shape)
    out[0] = x
    for k in range(steps):
        s = k * dt
        u = np.zeros_like(x) if net is None else net(x, np.full(len(x), s))
        if base_drift is not None and direction == FORWARD:
            u = u + base_drift(x, rng)
        u = _clamp(u, clamp)
        x = x + u * dt + sigma * np.sqrt(dt) * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            bad = int((~np.isfinite(x)).any(-1).sum())
            raise DivergenceError(f"{bad} particles became non-finite at step {k + 1}/{steps} "
                                  f"({direction}, s={s + dt:.3f})")
        out[k + 1] = x
    return out


def sample_coupling(state: TrainState, scene: Scene, n: int, steps: int,
                    rng: np.random.Generator, clamp: float = 1e3) -> Coupling:
    """Coupling used to fit the net named by ``state.direction``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if state.epoch == 0:
        return Coupling(scene.sample_source(n, rng), scene.sample_target(n, rng), "Independent")
    if state.direction == BACKWARD:
        x0 = scene.sample_source(n, rng)
        traj = euler_maruyama(state.forward_ema, x0, scene.sigma, steps, rng, FORWARD,
                              scene.base_drift, clamp)
        return Coupling(x0, traj[-1], "ForwardSimulated")
    x1 = scene.sample_target(n, rng)
    traj = euler_maruyama(state.backward_ema, x1, scene.sigma, steps, rng, BACKWARD, None, clamp)
    return Coupling(traj[-1], x1, "BackwardSimulated")


def _stratified_times(m: int, rng) -> np.ndarray:
    lo, hi = T_MIN, 1 - T_MIN
    return lo + (hi - lo) * (np.arange(m) + rng.uniform(size=m)) / m


def regression_batch(paths, scene: Scene, direction: str, batch: int, groups: int, rng):
    """Fresh ``(x_t, clock, target)`` minibatch drawn from a batch of conditional paths.

    The minibatch is split into ``groups`` blocks sharing one time each, so a
    mean-field base drift can be evaluated on the bridge population of the
    block. Forward targets subtract the base drift; backward targets are the
    reversed-time drift and use the clock ``s = 1 - t``.
    """
    P = len(paths)
    ts = _stratified_times(groups, rng)
    sizes = np.full(groups, batch // groups)
    sizes[: batch % groups] += 1
    xs, clocks, targets = [], [], []
    for t, m in zip(ts, sizes):
        if m == 0:
            continue
        sub = paths[rng.integers(0, P, m)]
        tt = np.full(m, t)
        x = sample_conditional(sub, tt, rng).x_t
        if direction == FORWARD:
            y = conditional_drift(sub, x, tt)
            if scene.base_drift is not None:
                y = y - scene.base_drift(x, rng)
            clocks.append(tt)
        else:
            y = reverse_conditional_drift(sub, x, tt)
            clocks.append(1.0 - tt)
        xs.append(x)
        targets.append(y)
    return np.concatenate(xs), np.concatenate(clocks), np.concatenate(targets)


def fit_paths(coupling: Coupling, scene: Scene, guidance: Optional[GuidanceContext],
              opts: SplineOptions, rng):
    """Conditional paths for every pair; the Brownian bridge when guidance is off."""
    x0, x1 = coupling.x0, coupling.x1
    if guidance is None or guidance.alpha == 0:
        n = len(x0)
        return brownian_bridge_path(x0, x1, scene.sigma, n_knots=opts.n_knots), {
            "spline_diverged": 0, "spline_reverted": 0, "n_pairs": n}
    idx = assign_keypoints(x0, guidance)
    paths, info = optimize_splines(x0, x1, guidance, idx, scene.sigma, scene.sigma, opts, rng)
    return paths, {"spline_diverged": int(info.diverged.sum()),
                   "spline_reverted": int(info.reverted.sum()), "n_pairs": len(x0)}


def train_epoch(state: TrainState, scene: Scene, guidance: Optional[GuidanceContext],
                config: TrainConfig, rng: np.random.Generator) -> TrainState:
    """One pass of coupling, path fitting and drift regression; flips the direction."""
    t0 = time.perf_counter()
    coupling = sample_coupling(state, scene, config.pairs, config.sde_steps, rng,
                               config.drift_clamp)
    t1 = time.perf_counter()
    paths, info = fit_paths(coupling, scene, guidance, config.spline, rng)
    if info["spline_diverged"] > config.max_diverged_frac * info["n_pairs"]:
        raise TrainingAbort(f"epoch {state.epoch}: {info['spline_diverged']} of "
                            f"{info['n_pairs']} spline optimisations diverged")
    t2 = time.perf_counter()
    fwd = state.direction == FORWARD
    net = state.forward_net if fwd else state.backward_net
    opt = state.forward_opt if fwd else state.backward_opt
    if not net.normalized:
        x, _, y = regression_batch(paths, scene, state.direction, 4096, 64, rng)
        net.fit_normalization(x, y)
        ema = net.copy()
        if fwd:
            state.forward_ema = ema
        else:
            state.backward_ema = ema
    ema = state.forward_ema if fwd else state.backward_ema
    losses = []
    for step in range(config.inner_steps):
        x, clock, y = regression_batch(paths, scene, state.direction, config.batch,
                                       config.time_groups, rng)
        loss, grads = regression_grads(net, x, clock, y)
        lr = config.lr * 0.5 * (1 + np.cos(np.pi * step / config.inner_steps))
        adamw_step(net, grads, opt, lr=lr)
        for k in grads:
            ema.params[k] *= config.ema_decay
            ema.params[k] += (1 - config.ema_decay) * net.params[k]
        losses.append(loss)
    t3 = time.perf_counter()

    record = {"epoch": state.epoch, "direction": state.direction, "coupling": coupling.source,
              "bm_loss": float(np.mean(losses[-50:])), "bm_loss_start": float(np.mean(losses[:50])),
              **info}
    state.metrics_log.append(record)
    state.timing_log.append({"epoch": state.epoch, "simulate": t1 - t0, "splines": t2 - t1,
                             "regress": t3 - t2})
    state.epoch += 1
    state.direction = BACKWARD if state.direction == FORWARD else FORWARD
    return state


def simulate(state: TrainState, scene: Scene, x0, steps: int, rng, controlled: bool = True,
             clamp: float = 1e3) -> np.ndarray:
    """Forward trajectories from ``x0``; ``controlled=False`` drops the learned drift."""
    net = state.forward_ema if (controlled and state is not None) else None
    return euler_maruyama(net, x0, scene.sigma, steps, rng, FORWARD, scene.base_drift, clamp)


def _w2(a, b, rng):
    n = min(len(a), len(b))
    if n == len(a) == len(b) and n <= 2048:
        return exact_w2(a, b)
    return subsampled_w2(a, b, rng)


def evaluate(state: TrainState, scene: Scene, n: int, rng: np.random.Generator,
             initial_condition: str = "Vanilla", steps: int = 100, controlled: bool = True,
             with_kl: bool = False) -> dict:
    """Terminal W2 (and optionally k-NN KL) to fresh target samples."""
    if scene.is_crowd:
        x0 = INITIAL_CONDITIONS[initial_condition].sample(n, rng)
    else:
        x0 = scene.sample_source(n, rng)
    traj = simulate(state, scene, x0, steps, rng, controlled)
    target = scene.sample_target(n, rng)
    out = {"initial_condition": initial_condition if scene.is_crowd else "source",
           "w2": _w2(traj[-1], target, rng), "trajectory": traj}
    if with_kl:
        out["kl"] = knn_kl(traj[-1], target)
    return out


def _eval_seed(config: TrainConfig, epoch: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, 7919, epoch])


def run_fsbm(scene: Scene, guidance: Optional[GuidanceContext], config: TrainConfig,
             run_dir: Optional[str] = None, log=None) -> TrainState:
    """Alternate epochs until ``config.epochs`` or the W2 plateau.

    W2 of the forward simulation is logged after every epoch on a seed fixed
    by ``(config.seed, epoch)``. Training stops early once the W2 values of the
    last three forward-fit epochs lie within ``patience_tol`` of each other.
    With ``run_dir`` set, metrics go to ``metrics.jsonl`` (one JSON record per
    epoch, no timings), wallclock to ``timing.jsonl`` and the nets to
    ``forward.ckpt`` / ``backward.ckpt`` (the weight averages used for
    simulation).
    """
    rng = np.random.default_rng(config.seed)
    state = TrainState.fresh(scene.dim, config, rng)
    fwd_w2 = []
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        for name in ("metrics.jsonl", "timing.jsonl"):
            open(os.path.join(run_dir, name), "w").close()
    for _ in range(config.epochs):
        fitted = state.direction
        train_epoch(state, scene, guidance, config, rng)
        ev = evaluate(state, scene, config.n_eval, _eval_seed(config, state.epoch - 1),
                      steps=config.sde_steps)
        rec = state.metrics_log[-1]
        rec["w2"] = ev["w2"]
        if log is not None:
            log(rec)
        if run_dir:
            with open(os.path.join(run_dir, "metrics.jsonl"), "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            with open(os.path.join(run_dir, "timing.jsonl"), "a") as fh:
                fh.write(json.dumps(state.timing_log[-1], sort_keys=True) + "\n")
            save_checkpoint(state.forward_ema, os.path.join(run_dir, "forward.ckpt"))
            save_checkpoint(state.backward_ema, os.path.join(run_dir, "backward.ckpt"))
        if fitted == FORWARD:
            fwd_w2.append(ev["w2"])
            if len(fwd_w2) >= 3 and np.ptp(fwd_w2[-3:]) < config.patience_tol:
                break
    return state


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
