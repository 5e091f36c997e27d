"""Scalar value network over (state, action-feature) pairs.

Two linear embedding branches (state and action) feed a concatenation,
followed by two dense layers and a linear scalar head; ReLU on every hidden
layer. Gradients are computed by hand (no autodiff dependency): ``backward``
returns the exact gradient of ``sum_i upstream_i * Q(s_i, a_i)`` so callers
can plug in any per-example loss coefficient.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .domain import ConfigError


class NumericalError(RuntimeError):
    """Non-finite values reached the optimizer; the update was rejected."""


class CheckpointError(RuntimeError):
    """Unreadable, truncated or incompatible checkpoint file."""


@dataclass(frozen=True)
class ArchSpec:
    state_dim: int
    action_dim: int
    embed_dim: int = 32
    hidden1: int = 64
    hidden2: int = 32

    def __post_init__(self) -> None:
        for name in ("state_dim", "action_dim", "embed_dim", "hidden1", "hidden2"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


PARAM_FIELDS = (
    "state_w",
    "state_b",
    "action_w",
    "action_b",
    "dense1_w",
    "dense1_b",
    "dense2_w",
    "dense2_b",
    "out_w",
    "out_b",
)


@dataclass
class QNetworkParams:
    arch: ArchSpec
    state_w: np.ndarray
    state_b: np.ndarray
    action_w: np.ndarray
    action_b: np.ndarray
    dense1_w: np.ndarray
    dense1_b: np.ndarray
    dense2_w: np.ndarray
    dense2_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in PARAM_FIELDS]

    def copy(self) -> "QNetworkParams":
        return replace(self, **{name: getattr(self, name).copy() for name in PARAM_FIELDS})


def _shapes(arch: ArchSpec) -> list[tuple[int, ...]]:
    e, h1, h2 = arch.embed_dim, arch.hidden1, arch.hidden2
    return [
        (arch.state_dim, e),
        (e,),
        (arch.action_dim, e),
        (e,),
        (2 * e, h1),
        (h1,),
        (h1, h2),
        (h2,),
        (h2,),
        (),
    ]


def init_params(arch: ArchSpec, seed: int | Iterable[int] = 0) -> QNetworkParams:
    """He-style uniform init scaled by fan-in for the weights, zero biases."""
    rng = np.random.default_rng(seed)
    values = {}
    for name, shape in zip(PARAM_FIELDS, _shapes(arch)):
        if name.endswith("_b"):
            values[name] = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) >= 1 else 1
            limit = np.sqrt(6.0 / fan_in)
            values[name] = rng.uniform(-limit, limit, size=shape)
    return QNetworkParams(arch=arch, **values)


def zeros_like_params(params: QNetworkParams) -> QNetworkParams:
    return replace(params, **{name: np.zeros_like(getattr(params, name)) for name in PARAM_FIELDS})


def _as_batch(x: np.ndarray, dim: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ConfigError(f"{what} has shape {x.shape}, expected (*, {dim})")
    return x, single


def _forward_trace(params: QNetworkParams, s: np.ndarray, a: np.ndarray):
    # hidden activations are kept post-ReLU; (h > 0) doubles as the ReLU mask
    hs = s @ params.state_w
    hs += params.state_b
    np.maximum(hs, 0.0, out=hs)
    ha = a @ params.action_w
    ha += params.action_b
    np.maximum(ha, 0.0, out=ha)
    h = np.concatenate([hs, ha], axis=1)
    h1 = h @ params.dense1_w
    h1 += params.dense1_b
    np.maximum(h1, 0.0, out=h1)
    h2 = h1 @ params.dense2_w
    h2 += params.dense2_b
    np.maximum(h2, 0.0, out=h2)
    q = h2 @ params.out_w + params.out_b
    return q, (h, h1, h2)


def forward(params: QNetworkParams, s: np.ndarray, a: np.ndarray) -> np.ndarray | float:
    """Q(s, a); accepts single vectors or (batch, dim) matrices."""
    arch = params.arch
    s, single_s = _as_batch(s, arch.state_dim, "state input")
    a, single_a = _as_batch(a, arch.action_dim, "action input")
    if s.shape[0] != a.shape[0]:
        raise ConfigError(f"batch sizes differ: {s.shape[0]} states vs {a.shape[0]} actions")
    q, _ = _forward_trace(params, s, a)
    return float(q[0]) if (single_s and single_a) else q


def backward(params: QNetworkParams, s: np.ndarray, a: np.ndarray, upstream: np.ndarray) -> QNetworkParams:
    """Gradient of sum_i upstream_i * Q(s_i, a_i) with respect to every parameter."""
    arch = params.arch
    s, _ = _as_batch(s, arch.state_dim, "state input")
    a, _ = _as_batch(a, arch.action_dim, "action input")
    u = np.asarray(upstream, dtype=float).reshape(-1)
    if u.shape[0] != s.shape[0]:
        raise ConfigError(f"upstream length {u.shape[0]} does not match batch {s.shape[0]}")
    _, trace = _forward_trace(params, s, a)
    return backward_from_trace(params, s, a, u, trace)


def backward_from_trace(
    params: QNetworkParams, s: np.ndarray, a: np.ndarray, u: np.ndarray, trace
) -> QNetworkParams:
    """Same as ``backward`` but reuses activations from ``_forward_trace``."""
    arch = params.arch
    h, h1, h2 = trace
    e = arch.embed_dim

    g_out_w = h2.T @ u
    g_out_b = np.array(u.sum())
    d_h2 = u[:, None] * params.out_w[None, :]
    d_z2 = d_h2 * (h2 > 0)
    g_dense2_w = h1.T @ d_z2
    g_dense2_b = d_z2.sum(axis=0)
    d_h1 = d_z2 @ params.dense2_w.T
    d_z1 = d_h1 * (h1 > 0)
    g_dense1_w = h.T @ d_z1
    g_dense1_b = d_z1.sum(axis=0)
    d_h = d_z1 @ params.dense1_w.T
    d_zs = d_h[:, :e] * (h[:, :e] > 0)
    d_za = d_h[:, e:] * (h[:, e:] > 0)
    return QNetworkParams(
        arch=arch,
        state_w=s.T @ d_zs,
        state_b=d_zs.sum(axis=0),
        action_w=a.T @ d_za,
        action_b=d_za.sum(axis=0),
        dense1_w=g_dense1_w,
        dense1_b=g_dense1_b,
        dense2_w=g_dense2_w,
        dense2_b=g_dense2_b,
        out_w=g_out_w,
        out_b=g_out_b,
    )


@dataclass
class OptimizerState:
    """Adam (default) or plain SGD over the flattened parameter list."""

    kind: str = "adam"
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: QNetworkParams, learning_rate: float = 1e-4, kind: str = "adam") -> "OptimizerState":
        if kind not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {kind!r}")
        state = cls(kind=kind, learning_rate=learning_rate)
        if kind == "adam":
            state.m = [np.zeros_like(p) for p in params.arrays()]
            state.v = [np.zeros_like(p) for p in params.arrays()]
        return state


def apply_update(params: QNetworkParams, opt: OptimizerState, grads: QNetworkParams) -> QNetworkParams:
    """One optimizer step in place; rejects non-finite gradients."""
    garrs = grads.arrays()
    for g in garrs:
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient; update rejected")
    opt.step_count += 1
    lr = opt.learning_rate
    if opt.kind == "sgd":
        for p, g in zip(params.arrays(), garrs):
            p -= lr * g
        return params
    t = opt.step_count
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    for p, g, m, v in zip(params.arrays(), garrs, opt.m, opt.v):
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * np.square(g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return params


def soft_update(target: QNetworkParams, online: QNetworkParams, tau_soft: float) -> QNetworkParams:
    """target <- tau * online + (1 - tau) * target, elementwise, in place."""
    if not (0.0 < tau_soft <= 1.0):
        raise ConfigError(f"tau_soft must be in (0, 1], got {tau_soft}")
    for tgt, src in zip(target.arrays(), online.arrays()):
        tgt[...] = tau_soft * src + (1.0 - tau_soft) * tgt
    return target


_MAGIC = b"DSPQNET1"


def save_checkpoint(params: QNetworkParams, opt: OptimizerState, path) -> None:
    """Versioned binary layout: magic, JSON header, then raw little-endian
    float64 arrays in parameter declaration order (params, adam m, adam v)."""
    header = {
        "arch": {
            "state_dim": params.arch.state_dim,
            "action_dim": params.arch.action_dim,
            "embed_dim": params.arch.embed_dim,
            "hidden1": params.arch.hidden1,
            "hidden2": params.arch.hidden2,
        },
        "optimizer": {
            "kind": opt.kind,
            "learning_rate": opt.learning_rate,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "step_count": opt.step_count,
        },
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        arrays = list(params.arrays())
        if opt.kind == "adam":
            arrays += list(opt.m) + list(opt.v)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, expected_arch: ArchSpec | None = None) -> tuple[QNetworkParams, OptimizerState]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(_MAGIC) + 4 or data[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError("not a recognized checkpoint file (bad magic)")
    off = len(_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    if len(data) < off + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    off += hlen
    arch = ArchSpec(**header["arch"])
    if expected_arch is not None and arch != expected_arch:
        raise CheckpointError(f"architecture mismatch: file has {arch}, expected {expected_arch}")
    shapes = _shapes(arch)
    optmeta = header["optimizer"]
    n_blocks = len(shapes) * (3 if optmeta["kind"] == "adam" else 1)
    arrays = []
    for k in range(n_blocks):
        shape = shapes[k % len(shapes)]
        size = int(np.prod(shape)) if shape else 1
        nbytes = size * 8
        if len(data) < off + nbytes:
            raise CheckpointError("truncated checkpoint payload")
        arrays.append(np.frombuffer(data[off : off + nbytes], dtype="<f8").astype(float).reshape(shape))
        off += nbytes
    if off != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    params = QNetworkParams(arch=arch, **dict(zip(PARAM_FIELDS, arrays[: len(shapes)])))
    opt = OptimizerState(
        kind=optmeta["kind"],
        learning_rate=optmeta["learning_rate"],
        beta1=optmeta["beta1"],
        beta2=optmeta["beta2"],
        eps=optmeta["eps"],
        step_count=optmeta["step_count"],
    )
    if opt.kind == "adam":
        opt.m = arrays[len(shapes) : 2 * len(shapes)]
        opt.v = arrays[2 * len(shapes) :]
    return params, opt
