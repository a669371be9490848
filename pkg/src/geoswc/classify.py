"""Classification heads over fixed feature vectors.

* :class:`FlatHead` - softmax over the cells of one partition, cross-entropy.
* :class:`HCHead` - three flat heads on nested coarse/mid/fine partitions;
  inference multiplies each fine cell's probability with its ancestors'.
* :class:`MvMFHead` - mixture of von Mises-Fisher densities whose weights are
  a softmax of the features, trained by negative log-likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from geoswc.geo import GeoPoint, latlon_from_vectors, unit_vector, unit_vectors
from geoswc.numerics import (
    OptimizerState,
    Schedule,
    check_finite,
    log_softmax,
    log_sum_exp,
    optimizer_step,
    softmax,
    uniform_init,
)
from geoswc.partition import CellId, Partition, ancestor_table

LOG_4PI = math.log(4.0 * math.pi)
DEFAULT_KAPPA0 = 10.0
DEFAULT_KAPPA_MAX = 700.0


class NonPositiveKappa(ValueError):
    pass


class UnassignablePoint(ValueError):
    def __init__(self, ids: Sequence[int]):
        self.ids = list(ids)
        shown = ", ".join(str(i) for i in self.ids[:10])
        more = f" (+{len(self.ids) - 10} more)" if len(self.ids) > 10 else ""
        super().__init__(f"{len(self.ids)} training points fall outside every cell: {shown}{more}")


def _as_batch(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return z[None, :] if z.ndim == 1 else z


def _targets(t, n_classes: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if np.any(t < 0) or np.any(t >= n_classes):
        raise IndexError(f"target index outside [0, {n_classes})")
    return t


@dataclass
class FlatHead:
    W: np.ndarray  # (N, D)
    b: np.ndarray  # (N,)
    partition_hash: str = ""

    @classmethod
    def init(cls, n_classes: int, dim: int, rng: np.random.Generator, partition_hash: str = "") -> "FlatHead":
        return cls(uniform_init(rng, n_classes, dim), np.zeros(n_classes), partition_hash)

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    def logits(self, Z: np.ndarray) -> np.ndarray:
        out = _as_batch(Z) @ self.W.T + self.b
        check_finite(out, where="logits")
        return out

    def probs(self, Z: np.ndarray) -> np.ndarray:
        return softmax(self.logits(Z))

    def predict(self, Z: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(Z), axis=1)

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}


def ce_loss(head: FlatHead, z: np.ndarray, target) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch and its gradient w.r.t. W and b."""
    Z = _as_batch(z)
    t = _targets(target, head.n_classes)
    logits = head.logits(Z)
    logp = log_softmax(logits)
    B = Z.shape[0]
    loss = -float(np.mean(logp[np.arange(B), t]))
    d = np.exp(logp)
    d[np.arange(B), t] -= 1.0
    d /= B
    return loss, {"W": d.T @ Z, "b": d.sum(axis=0)}


@dataclass
class HCHead:
    coarse: FlatHead
    mid: FlatHead
    fine: FlatHead
    anc_mid: np.ndarray  # fine index -> mid index
    anc_coarse: np.ndarray  # fine index -> coarse index

    @classmethod
    def init(cls, partitions: Sequence[Partition], dim: int, rng: np.random.Generator) -> "HCHead":
        pc, pm, pf = partitions
        return cls(
            FlatHead.init(len(pc), dim, rng, pc.hash),
            FlatHead.init(len(pm), dim, rng, pm.hash),
            FlatHead.init(len(pf), dim, rng, pf.hash),
            ancestor_table(pm, pf),
            ancestor_table(pc, pf),
        )

    @property
    def partition_hash(self) -> str:
        return self.fine.partition_hash

    @property
    def n_classes(self) -> int:
        return self.fine.n_classes

    def log_scores(self, Z: np.ndarray) -> np.ndarray:
        """log p_fine(c) + log p_mid(anc(c)) + log p_coarse(anc(c)) per fine cell."""
        Z = _as_batch(Z)
        return (
            log_softmax(self.fine.logits(Z))
            + log_softmax(self.mid.logits(Z))[:, self.anc_mid]
            + log_softmax(self.coarse.logits(Z))[:, self.anc_coarse]
        )

    def predict(self, Z: np.ndarray) -> np.ndarray:
        return np.argmax(self.log_scores(Z), axis=1)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for level in ("coarse", "mid", "fine"):
            for k, v in getattr(self, level).params().items():
                out[f"{level}.{k}"] = v
        return out


def hc_loss(head: HCHead, z: np.ndarray, fine_target) -> tuple[float, dict[str, np.ndarray]]:
    """Average of the three cross-entropies with ancestor targets for mid and coarse."""
    t = _targets(fine_target, head.fine.n_classes)
    total, grads = 0.0, {}
    for level, targets in (("coarse", head.anc_coarse[t]), ("mid", head.anc_mid[t]), ("fine", t)):
        loss, g = ce_loss(getattr(head, level), z, targets)
        total += loss / 3.0
        for k, v in g.items():
            grads[f"{level}.{k}"] = v / 3.0
    return total, grads


def hc_predict(head: HCHead, z: np.ndarray):
    """Fine class index (array for a batch, int for a single vector)."""
    pred = head.predict(z)
    return int(pred[0]) if np.asarray(z).ndim == 1 else pred


# ---------------------------------------------------------------- von Mises-Fisher


def log_sinh(kappa):
    kappa = np.asarray(kappa, dtype=np.float64)
    return kappa + np.log(-np.expm1(-2.0 * kappa)) - math.log(2.0)


def log_vmf_normalizer(kappa):
    """log(kappa / (4 pi sinh kappa))."""
    kappa = np.asarray(kappa, dtype=np.float64)
    if np.any(kappa <= 0):
        raise NonPositiveKappa("kappa must be positive")
    return np.log(kappa) - LOG_4PI - log_sinh(kappa)


def vmf_log_density(x, mu, kappa):
    """log vMF(x | mu, kappa) on S^2.

    ``x`` is a GeoPoint or unit vectors of shape (..., 3); ``mu`` a unit vector
    (3,) or component means (N, 3) with ``kappa`` of shape (N,), in which case
    the result has shape (..., N).
    """
    if isinstance(x, GeoPoint):
        x = unit_vector(x)
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    cos = x @ mu.T if mu.ndim == 2 else x @ mu
    return log_vmf_normalizer(kappa) + np.asarray(kappa) * cos


def coth(kappa: np.ndarray) -> np.ndarray:
    return 1.0 / np.tanh(kappa)


@dataclass
class MvMFHead:
    W: np.ndarray  # (N, D) mixture-weight logits
    b: np.ndarray
    mu: np.ndarray  # (N, 3) unit component means
    rho: np.ndarray  # (N,) log-concentrations
    partition_hash: str = ""
    kappa_max: float = DEFAULT_KAPPA_MAX
    train_mu: bool = False

    @classmethod
    def from_flat(
        cls,
        flat: FlatHead,
        partition: Partition,
        kappa0: float = DEFAULT_KAPPA0,
        kappa_max: float = DEFAULT_KAPPA_MAX,
        train_mu: bool = False,
    ) -> "MvMFHead":
        n = flat.n_classes
        return cls(
            flat.W.copy(),
            flat.b.copy(),
            partition.center_vectors(),
            np.full(n, math.log(kappa0)),
            partition.hash,
            kappa_max,
            train_mu,
        )

    @property
    def kappa(self) -> np.ndarray:
        return np.exp(self.rho)

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    def logits(self, Z: np.ndarray) -> np.ndarray:
        out = _as_batch(Z) @ self.W.T + self.b
        check_finite(out, where="mixture logits")
        return out

    def weights(self, Z: np.ndarray) -> np.ndarray:
        return softmax(self.logits(Z))

    def predict(self, Z: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(Z), axis=1)

    def log_density(self, Z: np.ndarray, X: np.ndarray) -> np.ndarray:
        """log MvMF(x | I) for paired rows of features and unit vectors."""
        return log_sum_exp(log_softmax(self.logits(Z)) + vmf_log_density(X, self.mu, self.kappa))

    def project(self) -> None:
        """Re-normalise the means and clamp the concentrations after an update."""
        self.mu /= np.linalg.norm(self.mu, axis=1, keepdims=True)
        np.minimum(self.rho, math.log(self.kappa_max), out=self.rho)

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b, "mu": self.mu, "rho": self.rho}


def mvmf_nll(head: MvMFHead, z: np.ndarray, x) -> tuple[float, dict[str, np.ndarray]]:
    """Mean of -log sum_i w_i(I) vMF(x_I | mu_i, kappa_i) and its gradients.

    ``x`` is a GeoPoint, a unit vector or a (B, 3) batch of unit vectors.
    Gradients are returned for W, b, rho and mu (mu is only stepped when the
    head is configured to train it).
    """
    Z = _as_batch(z)
    if isinstance(x, GeoPoint):
        x = unit_vector(x)
    X = _as_batch(x)
    B = Z.shape[0]
    kappa = head.kappa
    logits = head.logits(Z)
    logw = log_softmax(logits)
    cos = X @ head.mu.T
    logf = log_vmf_normalizer(kappa) + kappa * cos
    joint = logw + logf
    lse = log_sum_exp(joint)
    loss = -float(np.mean(lse))
    check_finite(np.asarray(loss), where="MvMF NLL")
    resp = np.exp(joint - lse[:, None])  # posterior over components
    d_logits = (np.exp(logw) - resp) / B
    # d logf / d kappa = 1/kappa - coth(kappa) + cos; d kappa / d rho = kappa
    d_rho = -np.sum(resp * (1.0 - kappa * coth(kappa) + kappa * cos), axis=0) / B
    d_mu = -(resp * kappa).T @ X / B
    return loss, {"W": d_logits.T @ Z, "b": d_logits.sum(axis=0), "rho": d_rho, "mu": d_mu}


def mvmf_predict(head: MvMFHead, z: np.ndarray, partition: Partition | None = None):
    """Highest-weight component and its mean location.

    Returns ``(CellId, GeoPoint)`` when a partition is given, else
    ``(component index, GeoPoint)``.
    """
    i = int(head.predict(_as_batch(z))[0])
    lat, lon = latlon_from_vectors(head.mu[i])
    point = GeoPoint(float(lat), float(lon))
    return (partition.leaves[i].id if partition is not None else i), point


# ---------------------------------------------------------------- training


@dataclass
class HeadConfig:
    epochs: int = 10
    batch_size: int = 64
    optimizer: str = "adamw"
    lr: float = 1e-2
    weight_decay: float = 1e-4
    momentum: float = 0.9
    schedule: str = "cosine"
    step_epochs: int = 5
    gamma: float = 0.5
    kappa0: float = DEFAULT_KAPPA0
    kappa_max: float = DEFAULT_KAPPA_MAX
    train_mu: bool = False
    seed: int = 0

    def optimizer_state(self, steps_per_epoch: int) -> OptimizerState:
        schedule = Schedule(
            kind=self.schedule,
            step_size=self.step_epochs * steps_per_epoch,
            gamma=self.gamma,
            total_steps=self.epochs * steps_per_epoch,
        )
        return OptimizerState(
            kind=self.optimizer,
            lr=self.lr,
            weight_decay=self.weight_decay,
            momentum=self.momentum,
            schedule=schedule,
        )


@dataclass
class TrainResult:
    head: FlatHead | HCHead | MvMFHead
    losses: list[float] = field(default_factory=list)


def _resolve_targets(partition: Partition, lat, lon, ids) -> np.ndarray:
    t = partition.assign_indices(lat, lon)
    bad = np.flatnonzero(t < 0)
    if bad.size:
        raise UnassignablePoint([int(ids[i]) for i in bad] if ids is not None else bad.tolist())
    return t


def train_head(
    kind: str,
    features: np.ndarray,
    lat: np.ndarray,
    lon: np.ndarray,
    partitions,
    config: HeadConfig | None = None,
    init: FlatHead | None = None,
    ids: np.ndarray | None = None,
) -> TrainResult:
    """Mini-batch training of a ``flat``, ``hc`` or ``mvmf`` head.

    ``partitions`` is one Partition (flat, mvmf) or the (coarse, mid, fine)
    triple (hc).  For mvmf, ``init`` is the pre-trained flat head whose weights
    seed the mixture layer.  The loss curve holds per-epoch mean losses.
    """
    config = config or HeadConfig()
    rng = np.random.default_rng(config.seed)
    Z = np.asarray(features, dtype=np.float64)
    n, dim = Z.shape
    if kind == "hc":
        fine = partitions[2]
        targets = _resolve_targets(fine, lat, lon, ids)
        head = HCHead.init(partitions, dim, rng)
        loss_fn = lambda h, zb, idx: hc_loss(h, zb, targets[idx])  # noqa: E731
    else:
        partition = partitions
        targets = _resolve_targets(partition, lat, lon, ids)
        flat = init if init is not None else FlatHead.init(len(partition), dim, rng, partition.hash)
        if flat.n_classes != len(partition) or flat.W.shape[1] != dim:
            raise ValueError("initial head does not match the partition / feature dimension")
        if kind == "flat":
            head = FlatHead(flat.W.copy(), flat.b.copy(), partition.hash)
            loss_fn = lambda h, zb, idx: ce_loss(h, zb, targets[idx])  # noqa: E731
        elif kind == "mvmf":
            head = MvMFHead.from_flat(flat, partition, config.kappa0, config.kappa_max, config.train_mu)
            X = unit_vectors(lat, lon)
            loss_fn = lambda h, zb, idx: mvmf_nll(h, zb, X[idx])  # noqa: E731
        else:
            raise ValueError(f"unknown head kind {kind!r}")

    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    opt = config.optimizer_state(steps_per_epoch)
    params = head.params()
    losses = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = loss_fn(head, Z[idx], idx)
            if kind == "mvmf" and not head.train_mu:
                grads = {k: v for k, v in grads.items() if k != "mu"}
            optimizer_step(opt, params, grads)
            if kind == "mvmf":
                head.project()
            total += loss * idx.size
        losses.append(total / n)
    return TrainResult(head, losses)


# ---------------------------------------------------------------- persistence


def head_checkpoint(head) -> tuple[dict[str, np.ndarray], dict]:
    if isinstance(head, FlatHead):
        return head.params(), {"kind": "flat", "partition_hash": head.partition_hash}
    if isinstance(head, MvMFHead):
        meta = {
            "kind": "mvmf",
            "partition_hash": head.partition_hash,
            "kappa_max": head.kappa_max,
            "train_mu": head.train_mu,
        }
        return head.params(), meta
    if isinstance(head, HCHead):
        params = dict(head.params())
        params["anc_mid"] = head.anc_mid.astype(np.float64)
        params["anc_coarse"] = head.anc_coarse.astype(np.float64)
        meta = {
            "kind": "hc",
            "partition_hash": head.fine.partition_hash,
            "partition_hashes": [head.coarse.partition_hash, head.mid.partition_hash, head.fine.partition_hash],
        }
        return params, meta
    raise TypeError(f"not a head: {type(head).__name__}")


def head_from_checkpoint(params: dict[str, np.ndarray], meta: dict):
    kind = meta.get("kind")
    if kind == "flat":
        return FlatHead(params["W"], params["b"], meta["partition_hash"])
    if kind == "mvmf":
        return MvMFHead(
            params["W"],
            params["b"],
            params["mu"],
            params["rho"],
            meta["partition_hash"],
            float(meta["kappa_max"]),
            bool(meta["train_mu"]),
        )
    if kind == "hc":
        hc, hm, hf = meta["partition_hashes"]
        return HCHead(
            FlatHead(params["coarse.W"], params["coarse.b"], hc),
            FlatHead(params["mid.W"], params["mid.b"], hm),
            FlatHead(params["fine.W"], params["fine.b"], hf),
            params["anc_mid"].astype(np.int64),
            params["anc_coarse"].astype(np.int64),
        )
    raise ValueError(f"unknown head kind {kind!r}")


def predict_cells(head, Z: np.ndarray) -> np.ndarray:
    """Class index of the most probable cell under any head kind."""
    return head.predict(_as_batch(Z))


def cell_ids(partition: Partition, indices: np.ndarray) -> list[CellId]:
    return [partition.leaves[int(i)].id for i in indices]
