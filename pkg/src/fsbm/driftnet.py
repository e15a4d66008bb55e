"""Residual MLP drift network with hand-written backprop and AdamW.

Layer layout, in parameter order::

    xn  = (x - x_mean) / x_scale
    h   = xn W_in^T + b_in
    for each block:
        s = silu(silu(h) W1^T + e(t) Wt^T + b1)
        h = h + s W2^T + b2
    out = out_scale * (silu(h) W_out^T + b_out)

``x_mean``, ``x_scale`` and ``out_scale`` are fixed normalisation arrays, set
once from data by :meth:`DriftNetwork.fit_normalization`; they are stored in
checkpoints but never trained.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

__all__ = [
    "time_embed",
    "DriftNetwork",
    "OptimizerState",
    "forward",
    "regression_loss",
    "regression_grads",
    "adamw_step",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"FSBMNET\x00"
VERSION = 1
_STATS = ("x_mean", "x_scale", "out_scale")


def time_embed(t, dim: int) -> np.ndarray:
    """Sinusoidal features ``[sin(w_k t), cos(w_k t)]`` with w_k geometric in [1, 1000]."""
    if dim % 2 or dim < 2:
        raise ValueError("embedding dimension must be a positive even number")
    t = np.asarray(t, dtype=float)
    w = np.geomspace(1.0, 1000.0, dim // 2)
    arg = t[..., None] * w
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def _silu(z):
    return z * expit(z)


def _dsilu(z):
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


class DriftNetwork:
    """u(x, t) as a pre-activation residual MLP in float64.

    Parameters
    ----------
    dim : int
        State dimension ``d``; also the output dimension.
    hidden : int
        Width of the residual stream.
    n_blocks : int
        Number of residual blocks.
    embed_dim : int
        Size of the sinusoidal time embedding (even).
    rng : numpy.random.Generator, optional
        Source for the initial weights. The output head starts at zero, so a
        fresh network is the zero drift.
    """

    def __init__(self, dim: int, hidden: int = 128, n_blocks: int = 4, embed_dim: int = 32,
                 rng: np.random.Generator | None = None):
        if min(dim, hidden, n_blocks) < 1:
            raise ValueError("dim, hidden and n_blocks must be positive")
        if embed_dim % 2:
            raise ValueError("embed_dim must be even")
        self.dim, self.hidden, self.n_blocks, self.embed_dim = dim, hidden, n_blocks, embed_dim
        rng = np.random.default_rng(0) if rng is None else rng

        def lin(n_out, n_in, gain=1.0):
            return rng.normal(0.0, gain / np.sqrt(n_in), (n_out, n_in))

        p = {"x_mean": np.zeros(dim), "x_scale": np.ones(dim), "out_scale": np.ones(dim),
             "W_in": lin(hidden, dim), "b_in": np.zeros(hidden)}
        for k in range(n_blocks):
            p[f"Wt{k}"] = lin(hidden, embed_dim)
            p[f"W1{k}"] = lin(hidden, hidden)
            p[f"b1{k}"] = np.zeros(hidden)
            p[f"W2{k}"] = lin(hidden, hidden, gain=1.0 / np.sqrt(n_blocks))
            p[f"b2{k}"] = np.zeros(hidden)
        p["W_out"] = np.zeros((dim, hidden))
        p["b_out"] = np.zeros(dim)
        self.params = p
        self.normalized = False

    @property
    def names(self) -> list[str]:
        """All arrays in checkpoint order."""
        return list(self.params)

    @property
    def trainable(self) -> list[str]:
        return [k for k in self.params if k not in _STATS]

    def copy(self) -> "DriftNetwork":
        new = object.__new__(DriftNetwork)
        new.__dict__.update(self.__dict__)
        new.params = {k: v.copy() for k, v in self.params.items()}
        return new

    def fit_normalization(self, x, target) -> None:
        """Set input standardisation and output scale from a regression batch."""
        x = np.asarray(x, dtype=float)
        target = np.asarray(target, dtype=float)
        self.params["x_mean"] = x.mean(0)
        self.params["x_scale"] = np.maximum(x.std(0), 1e-3)
        self.params["out_scale"] = np.full(self.dim, max(float(np.sqrt((target ** 2).mean())), 1e-3))
        self.normalized = True

    def __call__(self, x, t):
        return forward(self, x, t)


def _forward(net: DriftNetwork, x, t, keep=False):
    p = net.params
    x = np.asarray(x, dtype=float)
    t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:1])
    e = time_embed(t, net.embed_dim)
    xn = (x - p["x_mean"]) / p["x_scale"]
    h = xn @ p["W_in"].T + p["b_in"]
    cache = []
    for k in range(net.n_blocks):
        a = _silu(h)
        pre = a @ p[f"W1{k}"].T + e @ p[f"Wt{k}"].T + p[f"b1{k}"]
        s = _silu(pre)
        if keep:
            cache.append((h, a, pre, s))
        h = h + s @ p[f"W2{k}"].T + p[f"b2{k}"]
    ho = _silu(h)
    out = (ho @ p["W_out"].T + p["b_out"]) * p["out_scale"]
    if keep:
        return out, (xn, e, cache, h, ho)
    return out


def forward(net: DriftNetwork, x, t) -> np.ndarray:
    """Evaluate the drift on a batch ``x`` of shape (n, d) at times ``t`` (n,) or scalar."""
    for k, v in net.params.items():
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"non-finite weights in {k}")
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != net.dim:
        raise ValueError(f"expected states of shape (n, {net.dim}), got {x.shape}")
    return _forward(net, x, t)


def regression_loss(net: DriftNetwork, x, t, target) -> float:
    r = forward(net, x, t) - np.asarray(target, dtype=float)
    return float(0.5 * np.mean(np.sum(r * r, axis=1)))


def regression_grads(net: DriftNetwork, x, t, target):
    """Loss ``0.5 mean_n |u(x_n, t_n) - target_n|^2`` and its gradients.

    Returns
    -------
    loss : float
    grads : dict
        One array per trainable parameter, same shapes as ``net.params``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    p = net.params
    out, (xn, e, cache, h, ho) = _forward(net, x, t, keep=True)
    n = x.shape[0]
    r = out - np.asarray(target, dtype=float)
    loss = float(0.5 * np.mean(np.sum(r * r, axis=1)))

    g = {}
    dy = r * p["out_scale"] / n
    g["W_out"] = dy.T @ ho
    g["b_out"] = dy.sum(0)
    dh = (dy @ p["W_out"]) * _dsilu(h)
    for k in reversed(range(net.n_blocks)):
        hk, a, pre, s = cache[k]
        g[f"W2{k}"] = dh.T @ s
        g[f"b2{k}"] = dh.sum(0)
        dpre = (dh @ p[f"W2{k}"]) * _dsilu(pre)
        g[f"W1{k}"] = dpre.T @ a
        g[f"Wt{k}"] = dpre.T @ e
        g[f"b1{k}"] = dpre.sum(0)
        dh = dh + (dpre @ p[f"W1{k}"]) * _dsilu(hk)
    g["W_in"] = dh.T @ xn
    g["b_in"] = dh.sum(0)
    return loss, {k: g[k] for k in net.trainable}


@dataclass
class OptimizerState:
    """Adam moments and hyperparameters; ``weight_decay`` is decoupled."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = None
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(net: DriftNetwork, grads: dict, state: OptimizerState, lr: float | None = None):
    """One in-place AdamW update of ``net``; returns ``(net, state)``."""
    lr = state.lr if lr is None else lr
    if state.clip_norm is not None:
        norm = np.sqrt(sum(float(np.sum(gk * gk)) for gk in grads.values()))
        if norm > state.clip_norm:
            grads = {k: gk * (state.clip_norm / norm) for k, gk in grads.items()}
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for k, gk in grads.items():
        w = net.params[k]
        if gk.shape != w.shape:
            raise ValueError(f"gradient shape {gk.shape} does not match {k} {w.shape}")
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(w)
            state.v[k] = np.zeros_like(w)
        v = state.v[k]
        m *= state.beta1
        m += (1 - state.beta1) * gk
        v *= state.beta2
        v += (1 - state.beta2) * gk * gk
        w *= 1.0 - lr * state.weight_decay
        w -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return net, state


# Checkpoint: MAGIC, then little-endian uint32 {version, d, embed_dim, hidden,
# n_blocks, normalized}, then every array of ``net.names`` as '<f8' in order.

def save_checkpoint(net: DriftNetwork, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<6I", VERSION, net.dim, net.embed_dim, net.hidden, net.n_blocks,
                             int(net.normalized)))
        for k in net.names:
            fh.write(np.ascontiguousarray(net.params[k], dtype="<f8").tobytes())


def load_checkpoint(path) -> DriftNetwork:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:len(MAGIC)] != MAGIC:
        raise ValueError("not a drift network checkpoint")
    off = len(MAGIC)
    version, d, emb, hidden, blocks, normalized = struct.unpack_from("<6I", data, off)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off += 24
    net = DriftNetwork(d, hidden, blocks, emb)
    for k in net.names:
        shape = net.params[k].shape
        size = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=off)
        net.params[k] = arr.reshape(shape).astype(float)
        off += 8 * size
    if off != len(data):
        raise ValueError("checkpoint has trailing bytes")
    net.normalized = bool(normalized)
    return net
