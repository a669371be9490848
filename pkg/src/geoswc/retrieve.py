"""Residual retrieval module and its contrastive training.

The module maps a feature vector z to a unit embedding::

    e = l2_normalize(LN2(z + W2 relu(W1 LN1(z) + b1) + b2))

Images of the same cell are positives, images of other cells negatives.
Negatives come from a FIFO memory bank of embeddings from earlier batches.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from geoswc.numerics import (
    LayerNormCache,
    OptimizerState,
    Schedule,
    l2_normalize,
    l2_normalize_backward,
    layer_norm_backward,
    layer_norm_forward,
    linear_backward,
    linear_forward,
    log_sum_exp,
    optimizer_step,
    relu,
    relu_backward,
    uniform_init,
)

LN_PLACEMENTS = ("input", "normalized")


class EmptyNegatives(ValueError):
    pass


@dataclass
class RRMParams:
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    W1: np.ndarray  # (D_h, D)
    b1: np.ndarray
    W2: np.ndarray  # (D, D_h)
    b2: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    residual: bool = True
    # "input": the skip path carries the raw z; "normalized": it carries LN1(z)
    ln_placement: str = "input"

    @classmethod
    def init(
        cls, dim: int, hidden: int, rng: np.random.Generator, residual: bool = True, ln_placement: str = "input"
    ) -> "RRMParams":
        if ln_placement not in LN_PLACEMENTS:
            raise ValueError(f"ln_placement must be one of {LN_PLACEMENTS}")
        return cls(
            np.ones(dim),
            np.zeros(dim),
            uniform_init(rng, hidden, dim),
            np.zeros(hidden),
            uniform_init(rng, dim, hidden),
            np.zeros(dim),
            np.ones(dim),
            np.zeros(dim),
            residual,
            ln_placement,
        )

    @property
    def dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            k: getattr(self, k) for k in ("ln1_gain", "ln1_bias", "W1", "b1", "W2", "b2", "ln2_gain", "ln2_bias")
        }

    def copy(self) -> "RRMParams":
        return RRMParams(**{k: v.copy() for k, v in self.arrays().items()}, residual=self.residual,
                         ln_placement=self.ln_placement)


@dataclass
class RRMCache:
    h0: np.ndarray
    ln1: LayerNormCache
    pre: np.ndarray
    act: np.ndarray
    ln2: LayerNormCache
    out: np.ndarray
    norms: np.ndarray


def rrm_forward(params: RRMParams, z: np.ndarray) -> tuple[np.ndarray, RRMCache]:
    Z = np.asarray(z, dtype=np.float64)
    Z = Z[None, :] if Z.ndim == 1 else Z
    h0, c1 = layer_norm_forward(Z, params.ln1_gain, params.ln1_bias)
    pre = linear_forward(params.W1, params.b1, h0)
    act = relu(pre)
    s = linear_forward(params.W2, params.b2, act)
    if params.residual:
        s = s + (Z if params.ln_placement == "input" else h0)
    y, c2 = layer_norm_forward(s, params.ln2_gain, params.ln2_bias)
    out, norms = l2_normalize(y)
    return out, RRMCache(h0, c1, pre, act, c2, out, norms)


def rrm_backward(params: RRMParams, cache: RRMCache, d_out: np.ndarray) -> dict[str, np.ndarray]:
    dy = l2_normalize_backward(d_out, cache.out, cache.norms)
    ds, dg2, dbias2 = layer_norm_backward(dy, cache.ln2)
    dW2, db2, dact = linear_backward(params.W2, cache.act, ds)
    dW1, db1, dh0 = linear_backward(params.W1, cache.h0, relu_backward(dact, cache.pre))
    if params.residual and params.ln_placement == "normalized":
        dh0 = dh0 + ds
    _, dg1, dbias1 = layer_norm_backward(dh0, cache.ln1)
    return {
        "ln1_gain": dg1,
        "ln1_bias": dbias1,
        "W1": dW1,
        "b1": db1,
        "W2": dW2,
        "b2": db2,
        "ln2_gain": dg2,
        "ln2_bias": dbias2,
    }


def embed(params: RRMParams, Z: np.ndarray, chunk: int = 4096) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    return np.concatenate([rrm_forward(params, Z[i : i + chunk])[0] for i in range(0, len(Z), chunk)])


def raw_embed(Z: np.ndarray) -> np.ndarray:
    """Baseline retrieval embedding: the l2-normalised input features."""
    return l2_normalize(np.asarray(Z, dtype=np.float64))[0]


# ---------------------------------------------------------------- losses


def infonce_loss(q: np.ndarray, p: np.ndarray, negatives: np.ndarray, tau: float):
    """-log(e^{q.p/tau} / (e^{q.p/tau} + sum_i e^{q.n_i/tau})) for one query.

    Returns ``(loss, dq, dp)``; negatives are treated as constants.
    """
    negatives = np.asarray(negatives, dtype=np.float64).reshape(-1, len(q))
    if negatives.shape[0] == 0:
        raise EmptyNegatives("infoNCE needs at least one negative")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    cands = np.vstack([p, negatives])
    logits = cands @ q / tau
    lse = float(log_sum_exp(logits))
    loss = lse - float(logits[0])
    soft = np.exp(logits - lse)
    dq = (soft @ cands - p) / tau
    dp = (soft[0] - 1.0) * q / tau
    return loss, dq, dp


def infonce_batch(
    Q: np.ndarray, P: np.ndarray, q_cells: np.ndarray, bank: np.ndarray, bank_cells: np.ndarray, tau: float
):
    """Mean infoNCE over queries that have at least one other-cell bank entry.

    Returns ``(mean loss, dQ, dP, used mask)``; rows with no negatives get zero gradient.
    """
    B = Q.shape[0]
    pos = np.sum(Q * P, axis=1) / tau
    neg = Q @ bank.T / tau if len(bank) else np.zeros((B, 0))
    neg = np.where(bank_cells[None, :] == q_cells[:, None], -np.inf, neg)
    used = np.any(np.isfinite(neg), axis=1) if neg.shape[1] else np.zeros(B, dtype=bool)
    dQ = np.zeros_like(Q)
    dP = np.zeros_like(P)
    n = int(used.sum())
    if n == 0:
        return 0.0, dQ, dP, used
    logits = np.concatenate([pos[:, None], neg], axis=1)[used]
    lse = log_sum_exp(logits)
    loss = float(np.mean(lse - logits[:, 0]))
    soft = np.exp(logits - lse[:, None])
    Qu, Pu = Q[used], P[used]
    dQ[used] = (soft[:, :1] * Pu + soft[:, 1:] @ bank - Pu) / (tau * n)
    dP[used] = (soft[:, :1] - 1.0) * Qu / (tau * n)
    return loss, dQ, dP, used


def select_semi_hard(q: np.ndarray, p: np.ndarray, candidates: np.ndarray, margin: float) -> int:
    """Index of the hardest semi-hard negative, falling back to the hardest overall.

    Semi-hard: ``q.p - margin < q.n < q.p``.  Ties resolve to the lowest index.
    """
    candidates = np.asarray(candidates, dtype=np.float64).reshape(-1, len(q))
    if candidates.shape[0] == 0:
        raise EmptyNegatives("triplet loss needs at least one negative")
    sp = float(q @ p)
    sn = candidates @ q
    semi = (sn < sp) & (sn > sp - margin)
    if np.any(semi):
        return int(np.argmax(np.where(semi, sn, -np.inf)))
    return int(np.argmax(sn))


def triplet_loss(q: np.ndarray, p: np.ndarray, n: np.ndarray, margin: float = 0.01):
    """max(0, q.n - q.p + margin) for one explicit negative or a candidate set.

    With several candidates the negative is chosen by :func:`select_semi_hard`.
    Returns ``(loss, dq, dp)``.
    """
    if margin < 0:
        raise ValueError("margin must be non-negative")
    n = np.asarray(n, dtype=np.float64)
    if n.ndim == 2:
        n = n[select_semi_hard(q, p, n, margin)]
    loss = float(q @ n - q @ p + margin)
    if loss <= 0.0:
        return 0.0, np.zeros_like(q), np.zeros_like(p)
    return loss, n - p, -q.copy()


def triplet_batch(
    Q: np.ndarray, P: np.ndarray, q_cells: np.ndarray, bank: np.ndarray, bank_cells: np.ndarray, margin: float
):
    B = Q.shape[0]
    dQ = np.zeros_like(Q)
    dP = np.zeros_like(P)
    used = np.zeros(B, dtype=bool)
    losses = []
    for i in range(B):
        cand = bank[bank_cells != q_cells[i]]
        if len(cand) == 0:
            continue
        used[i] = True
        loss, dq, dp = triplet_loss(Q[i], P[i], cand, margin)
        losses.append(loss)
        dQ[i], dP[i] = dq, dp
    n = int(used.sum())
    if n == 0:
        return 0.0, dQ, dP, used
    return float(np.mean(losses)), dQ / n, dP / n, used


# ---------------------------------------------------------------- memory bank


class MemoryBank:
    """Fixed-capacity FIFO of (embedding, cell) snapshots."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("bank capacity must be positive")
        self.capacity = capacity
        self._emb = np.zeros((capacity, dim))
        self._cells = np.full(capacity, -1, dtype=np.int64)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, embeddings: np.ndarray, cells: np.ndarray) -> None:
        embeddings = np.array(embeddings, dtype=np.float64, copy=True)
        for e, c in zip(embeddings, np.asarray(cells)):
            self._emb[self._next] = e
            self._cells[self._next] = c
            self._next = (self._next + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def entries(self) -> tuple[np.ndarray, np.ndarray]:
        """Stored embeddings and cells, oldest first."""
        if self._size < self.capacity:
            order = np.arange(self._size)
        else:
            order = (np.arange(self.capacity) + self._next) % self.capacity
        return self._emb[order], self._cells[order]


# ---------------------------------------------------------------- training


def sample_epoch_pairs(cells: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One uniformly drawn ordered pair of distinct rows per cell with >= 2 rows.

    Pairs are generated in ascending cell order and then shuffled; returns an
    (n_pairs, 2) array of row indices (query, positive).
    """
    cells = np.asarray(cells)
    order = np.argsort(cells, kind="stable")
    uniq, starts, counts = np.unique(cells[order], return_index=True, return_counts=True)
    pairs = []
    for start, count in zip(starts, counts):
        if count < 2:
            continue
        i = int(rng.integers(count))
        j = int(rng.integers(count - 1))
        if j >= i:
            j += 1
        pairs.append((order[start + i], order[start + j]))
    pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    return pairs[rng.permutation(len(pairs))]


@dataclass
class RetrievalConfig:
    hidden: int = 256
    tau: float = 0.05
    bank_size: int = 1024
    batch_size: int = 32
    epochs: int = 200
    lr: float = 1e-3
    weight_decay: float = 1e-4
    loss: str = "infonce"  # or "triplet"
    margin: float = 0.01
    residual: bool = True
    ln_placement: str = "input"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if self.loss not in ("infonce", "triplet"):
            raise ValueError(f"unknown loss {self.loss!r}")


# settings for full-size backbone features and millions of training images
FULL_SCALE = RetrievalConfig(hidden=4096, bank_size=4096, batch_size=64, lr=1e-5)


@dataclass
class RRMTrainResult:
    params: RRMParams
    losses: list[float] = field(default_factory=list)


def train_rrm(features: np.ndarray, cells: np.ndarray, config: RetrievalConfig | None = None) -> RRMTrainResult:
    """Contrastive training on one (query, positive) pair per cell per epoch."""
    config = config or RetrievalConfig()
    rng = np.random.default_rng(config.seed)
    Z = np.asarray(features, dtype=np.float64)
    cells = np.asarray(cells, dtype=np.int64)
    params = RRMParams.init(Z.shape[1], config.hidden, rng, config.residual, config.ln_placement)
    n_pairs = int(np.sum(np.bincount(cells) >= 2)) if len(cells) else 0
    steps_per_epoch = max(1, math.ceil(n_pairs / config.batch_size))
    opt = OptimizerState(
        kind="adamw",
        lr=config.lr,
        weight_decay=config.weight_decay,
        schedule=Schedule("cosine", total_steps=config.epochs * steps_per_epoch),
    )
    arrays = params.arrays()
    bank = MemoryBank(config.bank_size, Z.shape[1])
    losses = []
    for _ in range(config.epochs):
        pairs = sample_epoch_pairs(cells, rng)
        total, used_total = 0.0, 0
        for start in range(0, len(pairs), config.batch_size):
            batch = pairs[start : start + config.batch_size]
            B = len(batch)
            q_cells = cells[batch[:, 0]]
            E, cache = rrm_forward(params, Z[np.concatenate([batch[:, 0], batch[:, 1]])])
            Q, P = E[:B], E[B:]
            bank_emb, bank_cells = bank.entries()
            if config.loss == "infonce":
                loss, dQ, dP, used = infonce_batch(Q, P, q_cells, bank_emb, bank_cells, config.tau)
            else:
                loss, dQ, dP, used = triplet_batch(Q, P, q_cells, bank_emb, bank_cells, config.margin)
            if used.any():
                grads = rrm_backward(params, cache, np.concatenate([dQ, dP]))
                optimizer_step(opt, arrays, grads)
                total += loss * used.sum()
                used_total += int(used.sum())
            bank.push(E, np.concatenate([q_cells, q_cells]))
        losses.append(total / used_total if used_total else float("nan"))
    return RRMTrainResult(params, losses)


def rrm_checkpoint(params: RRMParams, **tags) -> tuple[dict[str, np.ndarray], dict]:
    meta = {
        "kind": "rrm",
        "dim": params.dim,
        "hidden": params.hidden,
        "residual": params.residual,
        "ln_placement": params.ln_placement,
    }
    meta.update(tags)
    return params.arrays(), meta


def rrm_from_checkpoint(arrays: dict[str, np.ndarray], meta: dict) -> RRMParams:
    if meta.get("kind") != "rrm":
        raise ValueError("checkpoint does not hold a retrieval module")
    return RRMParams(**arrays, residual=bool(meta["residual"]), ln_placement=meta["ln_placement"])


def config_dict(config: RetrievalConfig) -> dict:
    return asdict(config)
