"""Residual dense network that maps a network input to user powers.

Layout for an input of shape ``(K, M+1)`` (users x [pilot index, fading]):

- feature extraction: ``1 x (M+1)`` convolution with valid padding collapses
  each row to ``G`` channels, then the inner activation -> ``B0``
- residual dense block: layer ``l`` convolves ``[B0, ..., B_{l-1}]`` with a
  ``3 x 3`` kernel (same padding) and applies the activation -> ``B_l``;
  a ``1 x 1`` fusion maps all ``(L+1) G`` channels back to ``G`` and the
  result is added to ``B0``
- reinforcement: ``3 x 3`` convolution to one channel, output activation

Feature maps are ``K x 1``, so with zero padding only the middle column of
each ``3 x 3`` kernel ever touches data.  The full kernels are still stored
(and receive exactly-zero gradients in the outer columns) to keep the
parameter layout and counts of the original design.

Everything is batched over a leading sample axis and runs in float64.
"""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import kernels
from .channel import NetworkRealization
from .dataset import NormalizationStats, build_input
from .metrics import net_se
from .solver import refine

_ACTS = {"tanh": 0, "relu": 1}
_OUTS = {"sigmoid": 0, "tanh": 1}


@dataclass(frozen=True)
class RDNConfig:
    M: int
    K: int
    tau: int
    G: int = 32
    L: int = 4
    inner: str = "tanh"
    output: str = "sigmoid"

    def __post_init__(self):
        if self.G < 1 or self.L < 1:
            raise ValueError("G and L must be >= 1")
        if self.inner not in _ACTS:
            raise ValueError(f"inner activation must be one of {sorted(_ACTS)}")
        if self.output not in _OUTS:
            raise ValueError(f"output activation must be one of {sorted(_OUTS)}")

    @classmethod
    def from_dict(cls, d: dict) -> "RDNConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 128
    lr: float = 1e-4
    drop_factor: float = 0.1
    drop_period: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.drop_period < 1:
            raise ValueError("epochs, batch_size and drop_period must be >= 1")
        if self.lr <= 0 or self.drop_factor <= 0:
            raise ValueError("lr and drop_factor must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        return self.lr * self.drop_factor ** ((epoch - 1) // self.drop_period)


# -- parameters ---------------------------------------------------------------

def parameter_shapes(cfg: RDNConfig) -> dict:
    """Tensor shapes in declaration order (kernels are ``out x kh x kw x in``)."""
    G, L = cfg.G, cfg.L
    shapes = {"fel_w": (G, 1, cfg.M + 1), "fel_b": (G,)}
    for l in range(1, L + 1):
        shapes[f"rdb{l}_w"] = (G, 3, 3, l * G)
        shapes[f"rdb{l}_b"] = (G,)
    shapes["fuse_w"] = (G, 1, 1, (L + 1) * G)
    shapes["fuse_b"] = (G,)
    shapes["frl_w"] = (1, 3, 3, G)
    shapes["frl_b"] = (1,)
    return shapes


def count_parameters(cfg: RDNConfig) -> tuple[int, int, int]:
    """(weights, biases, total) from the closed-form layer counts."""
    G, L, M = cfg.G, cfg.L, cfg.M
    weights = G * (M + 1) + 9 * G * G * L * (L + 1) // 2 + (L + 1) * G * G + 9 * G
    biases = G + L * G + G + 1
    return weights, biases, weights + biases


def init_parameters(cfg: RDNConfig, seed: int) -> dict:
    """Glorot-uniform kernels, zero biases.

    ``fan_in = receptive * in_channels`` and ``fan_out = receptive *
    out_channels``; the feature-extraction kernel has one input channel.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
            continue
        if len(shape) == 3:
            out_ch, in_ch, receptive = shape[0], 1, shape[1] * shape[2]
        else:
            out_ch, in_ch, receptive = shape[0], shape[3], shape[1] * shape[2]
        s = math.sqrt(6.0 / (receptive * (in_ch + out_ch)))
        params[name] = rng.uniform(-s, s, size=shape)
    return params


# -- activations ----------------------------------------------------------------

def _act(name, z):
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _act_grad(name, z, a):
    return 1.0 - a * a if name == "tanh" else (z > 0).astype(float)


def _out(name, z):
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    return 0.5 * (np.tanh(z) + 1.0)


def _out_grad(name, a):
    if name == "sigmoid":
        return a * (1.0 - a)
    # a = (tanh z + 1)/2  ->  da/dz = (1 - tanh^2)/2 = 2 a (1 - a)
    return 2.0 * a * (1.0 - a)


# -- convolution along the user axis ---------------------------------------------

def _conv3(x, w, b):
    """Same-padded 3-tap convolution over users; ``x`` is ``(N, K, C)``."""
    K = x.shape[1]
    xp = np.pad(x, ((0, 0), (1, 1), (0, 0)))
    out = xp[:, 0:K] @ w[:, 0, 1, :].T
    out += xp[:, 1:K + 1] @ w[:, 1, 1, :].T
    out += xp[:, 2:K + 2] @ w[:, 2, 1, :].T
    return out + b, xp


def _conv3_backward(dz, xp, w):
    K = dz.shape[1]
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp)
    for j in range(3):
        dw[:, j, 1, :] = np.einsum("nkg,nkc->gc", dz, xp[:, j:j + K])
        dxp[:, j:j + K] += dz @ w[:, j, 1, :]
    return dw, dz.sum(axis=(0, 1)), dxp[:, 1:-1]


# -- forward / backward -----------------------------------------------------------

def forward(params: dict, x, cfg: RDNConfig):
    """Predicted powers ``(N, K)`` for normalized inputs ``(N, K, M+1)``.

    A single ``(K, M+1)`` input is accepted and gives a ``(K,)`` result.
    Returns ``(p_hat, cache)``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[1:] != (cfg.K, cfg.M + 1):
        raise ValueError(f"input shape {x.shape[1:]} does not match ({cfg.K}, {cfg.M + 1})")
    L = cfg.L
    z0 = x @ params["fel_w"][:, 0, :].T + params["fel_b"]
    feats = [_act(cfg.inner, z0)]
    zs, pads = [z0], []
    for l in range(1, L + 1):
        inp = np.concatenate(feats, axis=-1)
        z, xp = _conv3(inp, params[f"rdb{l}_w"], params[f"rdb{l}_b"])
        zs.append(z)
        pads.append(xp)
        feats.append(_act(cfg.inner, z))
    cat = np.concatenate(feats, axis=-1)
    fused = cat @ params["fuse_w"][:, 0, 0, :].T + params["fuse_b"]
    bf = feats[0] + fused
    zr, xpr = _conv3(bf, params["frl_w"], params["frl_b"])
    p_hat = _out(cfg.output, zr[..., 0])
    cache = {"x": x, "zs": zs, "feats": feats, "pads": pads, "cat": cat,
             "xp_frl": xpr, "p_hat": p_hat}
    return (p_hat[0] if single else p_hat), cache


def loss(p_hat, target) -> float:
    """Mean over samples of the squared Euclidean error."""
    d = np.atleast_2d(p_hat) - np.atleast_2d(target)
    return float(np.mean(np.sum(d * d, axis=-1)))


def backward(params: dict, cache: dict, target, cfg: RDNConfig) -> dict:
    """Gradients of :func:`loss` with respect to every parameter."""
    G, L = cfg.G, cfg.L
    p_hat = cache["p_hat"]
    target = np.asarray(target, dtype=float).reshape(p_hat.shape)
    n = p_hat.shape[0]
    grads = {}

    dz_r = (2.0 / n) * (p_hat - target) * _out_grad(cfg.output, p_hat)
    grads["frl_w"], grads["frl_b"], d_bf = _conv3_backward(dz_r[..., None], cache["xp_frl"], params["frl_w"])

    # B_F = B0 + fuse(cat)
    wf = params["fuse_w"][:, 0, 0, :]
    grads["fuse_w"] = np.einsum("nkg,nkc->gc", d_bf, cache["cat"])[:, None, None, :]
    grads["fuse_b"] = d_bf.sum(axis=(0, 1))
    d_cat = d_bf @ wf
    d_feats = [d_cat[..., j * G:(j + 1) * G].copy() for j in range(L + 1)]
    d_feats[0] += d_bf

    for l in range(L, 0, -1):
        dz = d_feats[l] * _act_grad(cfg.inner, cache["zs"][l], cache["feats"][l])
        dw, db, d_inp = _conv3_backward(dz, cache["pads"][l - 1], params[f"rdb{l}_w"])
        grads[f"rdb{l}_w"], grads[f"rdb{l}_b"] = dw, db
        for j in range(l):
            d_feats[j] += d_inp[..., j * G:(j + 1) * G]

    dz0 = d_feats[0] * _act_grad(cfg.inner, cache["zs"][0], cache["feats"][0])
    grads["fel_w"] = np.einsum("nkg,nkf->gf", dz0, cache["x"])[:, None, :]
    grads["fel_b"] = dz0.sum(axis=(0, 1))
    return {name: grads[name] for name in params}


def pack_rdn(params: dict, cfg: RDNConfig) -> tuple:
    """Contiguous weights for the single-sample kernel.

    Only the middle column of each ``3 x 3`` kernel is kept; the outer
    columns only ever see zero padding.
    """
    c = np.ascontiguousarray
    rdb_w = np.concatenate([
        params[f"rdb{l}_w"][:, :, 1, :].ravel() for l in range(1, cfg.L + 1)])
    rdb_b = np.stack([params[f"rdb{l}_b"] for l in range(1, cfg.L + 1)])
    return (
        c(params["fel_w"][:, 0, :]), c(params["fel_b"]), c(rdb_w), c(rdb_b),
        c(params["fuse_w"][:, 0, 0, :]), c(params["fuse_b"]),
        c(params["frl_w"][0, :, 1, :]), float(params["frl_b"][0]),
        int(cfg.inner == "relu"), int(cfg.output == "tanh"),
    )


def rmse(p, p_hat):
    """Euclidean norm of the prediction error (per sample if batched)."""
    d = np.asarray(p, dtype=float) - np.asarray(p_hat, dtype=float)
    return np.sqrt(np.sum(d * d, axis=-1))


# -- optimizer -----------------------------------------------------------------------

class AdamState:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- training -------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    curve: list  # (epoch, lr, train_rmse, val_rmse)
    best_epoch: int


def _mean_rmse(params, x, y, cfg, chunk=1024):
    errs = []
    for s in range(0, len(x), chunk):
        p_hat, _ = forward(params, x[s:s + chunk], cfg)
        errs.append(rmse(y[s:s + chunk], p_hat))
    return float(np.mean(np.concatenate(errs)))


def train(x_train, y_train, x_val, y_val, cfg: RDNConfig, tcfg: TrainConfig = TrainConfig(),
          seed: int | None = None, params: dict | None = None) -> TrainResult:
    """Mini-batch Adam on the squared error; returns the best-validation weights.

    Inputs must already be normalized.  ``seed`` (default ``tcfg.seed``)
    drives both initialization and shuffling.
    """
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("training and validation splits must be nonempty")
    seed = tcfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, 1])
    params = init_parameters(cfg, seed) if params is None else {k: v.copy() for k, v in params.items()}
    state = AdamState(params, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    x_train = np.asarray(x_train, dtype=float)
    y_train = np.asarray(y_train, dtype=float)
    n = len(x_train)

    best = (math.inf, 0, {k: v.copy() for k, v in params.items()})
    curve = []
    for epoch in range(1, tcfg.epochs + 1):
        lr = tcfg.lr_at(epoch)
        order = rng.permutation(n)
        for s in range(0, n, tcfg.batch_size):
            idx = order[s:s + tcfg.batch_size]
            p_hat, cache = forward(params, x_train[idx], cfg)
            adam_step(params, backward(params, cache, y_train[idx], cfg), state, lr)
        tr = _mean_rmse(params, x_train, y_train, cfg)
        va = _mean_rmse(params, x_val, y_val, cfg)
        curve.append((epoch, lr, tr, va))
        if va < best[0]:
            best = (va, epoch, {k: v.copy() for k, v in params.items()})
    return TrainResult(params=best[2], curve=curve, best_epoch=best[1])


# -- model bundle and checkpoint --------------------------------------------------------

_CKPT = struct.Struct("<4sIIIIIIBB")
CKPT_MAGIC = b"CFNN"
CKPT_VERSION = 1


@dataclass(eq=False)
class PowerRDN:
    """Trained parameters plus the input normalization needed for inference."""

    cfg: RDNConfig
    params: dict
    stats: NormalizationStats

    def __post_init__(self):
        self._packed = pack_rdn(self.params, self.cfg)

    def predict(self, inputs_db):
        """Powers for raw inputs (pilot index, fading in dB); batched or single."""
        p_hat, _ = forward(self.params, self.stats.apply(inputs_db), self.cfg)
        return p_hat

    def predict_one(self, input_db, backend: str | None = None):
        """Single ``(K, M+1)`` input through the kernel forward pass."""
        x = np.ascontiguousarray(self.stats.apply(input_db))
        return kernels.get(backend).rdn_forward(x, *self._packed)

    def to_bytes(self) -> bytes:
        c = self.cfg
        parts = [_CKPT.pack(CKPT_MAGIC, CKPT_VERSION, c.G, c.L, c.M, c.K, c.tau,
                            _ACTS[c.inner], _OUTS[c.output])]
        for name in parameter_shapes(c):
            parts.append(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(self.stats.mean, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(self.stats.std, dtype="<f8").tobytes())
        parts.append(struct.pack("<d", self.stats.pov_scale))
        return b"".join(parts)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "PowerRDN":
        magic, version, G, L, M, K, tau, inner, out = _CKPT.unpack_from(buf, 0)
        if magic != CKPT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        inv_a = {v: k for k, v in _ACTS.items()}
        inv_o = {v: k for k, v in _OUTS.items()}
        cfg = RDNConfig(M=M, K=K, tau=tau, G=G, L=L, inner=inv_a[inner], output=inv_o[out])
        off = _CKPT.size
        params = {}
        for name, shape in parameter_shapes(cfg).items():
            size = int(np.prod(shape))
            params[name] = np.frombuffer(buf, "<f8", size, off).reshape(shape).copy()
            off += 8 * size
        mean = np.frombuffer(buf, "<f8", M, off).copy()
        off += 8 * M
        std = np.frombuffer(buf, "<f8", M, off).copy()
        off += 8 * M
        (pov_scale,) = struct.unpack_from("<d", buf, off)
        if off + 8 != len(buf):
            raise ValueError("checkpoint has trailing or missing bytes")
        return cls(cfg=cfg, params=params, stats=NormalizationStats(mean, std, pov_scale))

    @classmethod
    def load(cls, path) -> "PowerRDN":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def predict_and_refine(model: PowerRDN, realization: NetworkRealization, tau_c: int,
                       backend: str | None = None):
    """Predicted powers, filters re-optimized for them, and per-user net rates."""
    if (realization.M, realization.K) != (model.cfg.M, model.cfg.K):
        raise ValueError(
            f"model trained for (M, K)=({model.cfg.M}, {model.cfg.K}), "
            f"got ({realization.M}, {realization.K})")
    p_hat = model.predict_one(build_input(realization), backend)
    t, rates = refine(realization, p_hat, backend)
    return p_hat, t, net_se(rates, realization.tau, tau_c)
