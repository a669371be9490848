"""Dense layer primitives with hand-written backward passes, optimizers,
a finite-difference gradient checker and the parameter checkpoint format.

Everything works on float64 arrays whose leading axis is the batch; a single
vector is just a batch of one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from geoswc.binio import FormatError, Reader, Writer, sha256_bytes

LN_EPS = 1e-5
L2_GUARD = 1e-12
CHECKPOINT_MAGIC = b"GPNN"
CHECKPOINT_VERSION = 1


class ShapeMismatch(ValueError):
    pass


class NonFinite(FloatingPointError):
    pass


class ZeroVector(ArithmeticError):
    pass


def check_finite(*arrays: np.ndarray, where: str = "") -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFinite(f"non-finite values in {where or 'tensor'}")


# ---------------------------------------------------------------- layers


def linear_forward(W: np.ndarray, b: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Y = X W^T + b for X of shape (B, D_in), W (D_out, D_in)."""
    if X.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeMismatch(f"linear: W{W.shape} b{b.shape} X{X.shape}")
    Y = X @ W.T + b
    check_finite(Y, where="linear output")
    return Y


def linear_backward(W: np.ndarray, X: np.ndarray, dY: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if dY.shape != X.shape[:-1] + (W.shape[0],):
        raise ShapeMismatch(f"linear backward: dY{dY.shape} X{X.shape} W{W.shape}")
    dW = dY.T @ X
    db = dY.sum(axis=0)
    dX = dY @ W
    check_finite(dW, db, dX, where="linear gradients")
    return dW, db, dX


@dataclass
class LayerNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gain: np.ndarray


def layer_norm_forward(
    X: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS
) -> tuple[np.ndarray, LayerNormCache]:
    if X.shape[-1] < 2:
        raise ShapeMismatch("layer norm needs at least 2 features")
    if gain.shape != X.shape[-1:] or bias.shape != X.shape[-1:]:
        raise ShapeMismatch(f"layer norm: X{X.shape} gain{gain.shape} bias{bias.shape}")
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    Y = xhat * gain + bias
    check_finite(Y, where="layer norm output")
    return Y, LayerNormCache(xhat, inv_std, gain)


def layer_norm_backward(dY: np.ndarray, cache: LayerNormCache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv_std = cache.xhat, cache.inv_std
    dgain = (dY * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dbias = dY.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dY * cache.gain
    dX = inv_std * (
        dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    check_finite(dX, where="layer norm gradient")
    return dX, dgain, dbias


def relu(X: np.ndarray) -> np.ndarray:
    return np.maximum(X, 0.0)


def relu_backward(dY: np.ndarray, X: np.ndarray) -> np.ndarray:
    return dY * (X > 0.0)


def l2_normalize(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise unit vectors and the row norms (kept for the backward pass)."""
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    if np.any(norms < L2_GUARD):
        raise ZeroVector(f"cannot normalise a vector with norm below {L2_GUARD}")
    return X / norms, norms


def l2_normalize_backward(dY: np.ndarray, Y: np.ndarray, norms: np.ndarray) -> np.ndarray:
    return (dY - Y * np.sum(dY * Y, axis=-1, keepdims=True)) / norms


def log_sum_exp(X: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted log(sum(exp(X))); entries of -inf are treated as absent."""
    m = np.max(X, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):  # all -inf rows give log(0) = -inf
        out = np.log(np.sum(np.exp(X - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def log_sum_exp_backward(dOut: np.ndarray, X: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.expand_dims(dOut, axis) * softmax(X, axis=axis)


def softmax(X: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(X - np.max(X, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(X: np.ndarray, axis: int = -1) -> np.ndarray:
    return X - np.expand_dims(log_sum_exp(X, axis=axis), axis)


def softmax_backward(dY: np.ndarray, S: np.ndarray, axis: int = -1) -> np.ndarray:
    return S * (dY - np.sum(dY * S, axis=axis, keepdims=True))


def uniform_init(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


# ---------------------------------------------------------------- optimizers


@dataclass
class Schedule:
    """Learning-rate schedule evaluated at the number of steps already taken.

    ``step``: lr0 * gamma ** (t // step_size).
    ``cosine``: lr0 * (1 + cos(pi * t / total_steps)) / 2, held at 0 past the end.
    """

    kind: str = "constant"
    step_size: int = 1
    gamma: float = 0.5
    total_steps: int = 1

    def lr_at(self, base_lr: float, t: int) -> float:
        if self.kind == "constant":
            return base_lr
        if self.kind == "step":
            return base_lr * self.gamma ** (t // max(self.step_size, 1))
        if self.kind == "cosine":
            frac = min(t, self.total_steps) / max(self.total_steps, 1)
            return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
        raise ValueError(f"unknown schedule {self.kind!r}")


@dataclass
class OptimizerState:
    kind: str = "adamw"  # "sgd" (momentum, coupled weight decay) or "adamw" (decoupled)
    lr: float = 1e-3
    weight_decay: float = 0.0
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    schedule: Schedule = field(default_factory=Schedule)
    step: int = 0
    buffers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def current_lr(self) -> float:
        return self.schedule.lr_at(self.lr, self.step)


def optimizer_step(
    state: OptimizerState, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]
) -> dict[str, np.ndarray]:
    """Update ``params`` in place following the SGD-momentum or AdamW rule."""
    lr = state.current_lr()
    state.step += 1
    t = state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient {name}{g.shape} vs parameter {p.shape}")
        buf = state.buffers.setdefault(name, {})
        if state.kind == "sgd":
            d = g + state.weight_decay * p if state.weight_decay else g
            if state.momentum:
                v = buf.get("momentum")
                v = d.copy() if v is None else state.momentum * v + d
                buf["momentum"] = v
                d = v
            p -= lr * d
        elif state.kind == "adamw":
            b1, b2 = state.betas
            m = buf.get("m", np.zeros_like(p))
            v = buf.get("v", np.zeros_like(p))
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            buf["m"], buf["v"] = m, v
            if state.weight_decay:
                p *= 1.0 - lr * state.weight_decay
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        else:
            raise ValueError(f"unknown optimizer {state.kind!r}")
        check_finite(p, where=f"parameter {name}")
    return params


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    worst: tuple[str, tuple[int, ...]] | None
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def grad_check(
    f: Callable[[dict[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    tolerance: float = 1e-6,
    h: float = 1e-5,
    floor: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare the analytic gradient of ``f`` with central differences.

    ``f(params) -> (loss, grads)``.  The per-entry error is
    ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps round-off on entries that
    are exactly zero from reading as a large relative error.
    """
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    _, analytic = f({k: v.copy() for k, v in base.items()})
    worst_err, worst_at, checked = 0.0, None, 0
    for name, value in base.items():
        if name not in analytic:
            continue
        flat_idx = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            rng = rng or np.random.default_rng(0)
            flat_idx = np.sort(rng.choice(value.size, size=max_entries, replace=False))
        grad = np.asarray(analytic[name], dtype=np.float64)
        for fi in flat_idx:
            idx = np.unravel_index(fi, value.shape)
            trial = {k: v.copy() for k, v in base.items()}
            trial[name][idx] = value[idx] + h
            lp, _ = f(trial)
            trial = {k: v.copy() for k, v in base.items()}
            trial[name][idx] = value[idx] - h
            lm, _ = f(trial)
            numeric = (lp - lm) / (2 * h)
            a = float(grad[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            checked += 1
            if err > worst_err:
                worst_err, worst_at = err, (name, tuple(int(i) for i in idx))
    return GradCheckReport(worst_err, tolerance, worst_at, checked)


# ---------------------------------------------------------------- checkpoints


def checkpoint_bytes(params: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    """GPNN layout: magic, u16 version, JSON metadata, then named float64 tensors."""
    w = Writer()
    w.raw(CHECKPOINT_MAGIC)
    w.pack("H", CHECKPOINT_VERSION)
    w.string(json.dumps(dict(meta or {}), sort_keys=True, separators=(",", ":")))
    w.pack("I", len(params))
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float64)
        w.string(name)
        w.pack("B", arr.ndim)
        w.pack(f"{arr.ndim}Q", *arr.shape)
        w.array(arr, "f8")
    return w.getvalue()


def parse_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    r = Reader(data, "checkpoint")
    r.expect_magic(CHECKPOINT_MAGIC, (CHECKPOINT_VERSION,))
    try:
        meta = json.loads(r.string())
    except json.JSONDecodeError as exc:
        raise FormatError("checkpoint: corrupt metadata block") from exc
    params = {}
    for _ in range(r.unpack("I")):
        name = r.string()
        ndim = r.unpack("B")
        shape = tuple(r.unpack(f"{ndim}Q")) if ndim > 1 else ((r.unpack("Q"),) if ndim == 1 else ())
        count = int(np.prod(shape)) if shape else 1
        params[name] = r.array("f8", count).reshape(shape)
    r.expect_end()
    return params, meta


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray], meta: Mapping | None = None) -> str:
    data = checkpoint_bytes(params, meta)
    Path(path).write_bytes(data)
    return sha256_bytes(data)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return parse_checkpoint(Path(path).read_bytes())
