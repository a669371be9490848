"""Search within Cell: classify, retrieve inside the predicted cell, aggregate.

The K retrieved neighbours are clustered with DBSCAN under great-circle
distance; the estimate is the spherical mean of the largest cluster.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from geoswc.geo import (
    DegenerateMean,
    GeoPoint,
    latlon_from_vectors,
    mean_direction,
    pairwise_gcd_km,
    unit_vectors,
)
from geoswc.index import BackgroundIndex, top_k_batch, top_k_offsets
from geoswc.partition import CellId, Partition
from geoswc.retrieve import RRMParams, embed, raw_embed

AGGREGATORS = ("spatial", "average")


class HashMismatch(ValueError):
    """Artifacts were built against different partitions or classifiers."""


@dataclass(frozen=True)
class SwcConfig:
    k: int = 10
    eps_km: float = 1.0
    min_samples: int = 1
    aggregator: str = "spatial"

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("K must be >= 1")
        if self.eps_km <= 0:
            raise ValueError("eps_km must be positive")
        if self.min_samples < 1:
            raise ValueError("min_samples must be >= 1")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}")


@dataclass(frozen=True)
class Prediction:
    query_id: int
    estimate: GeoPoint
    cell: CellId
    neighbor_ids: tuple[int, ...]
    similarities: tuple[float, ...]
    labels: tuple[int, ...]
    fallback: bool


def _as_vectors(points) -> np.ndarray:
    if isinstance(points, np.ndarray) and points.ndim == 2 and points.shape[1] == 3:
        return points
    if isinstance(points, np.ndarray) and points.ndim == 2 and points.shape[1] == 2:
        return unit_vectors(points[:, 0], points[:, 1])
    pts = list(points)
    return unit_vectors(np.array([p.lat for p in pts]), np.array([p.lon for p in pts])).reshape(-1, 3)


def dbscan_geo(points, eps_km: float, min_samples: int = 1) -> np.ndarray:
    """DBSCAN labels under great-circle distance; noise is -1.

    A point is core when at least ``min_samples`` points (itself included) lie
    within ``eps_km``.  Clusters are numbered in the order their first core
    point appears in the input; a border point joins the first cluster that
    reaches it.
    """
    if eps_km <= 0:
        raise ValueError("eps_km must be positive")
    u = _as_vectors(points)
    n = len(u)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    near = pairwise_gcd_km(u) <= eps_km
    core = near.sum(axis=1) >= min_samples
    visited = np.zeros(n, dtype=bool)
    cluster = 0
    for i in range(n):
        if visited[i] or not core[i]:
            continue
        visited[i] = True
        labels[i] = cluster
        queue = deque(np.flatnonzero(near[i]))
        while queue:
            j = queue.popleft()
            if labels[j] == -1:
                labels[j] = cluster
            if visited[j]:
                continue
            visited[j] = True
            if core[j]:
                queue.extend(np.flatnonzero(near[j]))
        cluster += 1
    return labels


def _mean_or_best(u: np.ndarray, best: np.ndarray) -> GeoPoint:
    try:
        v = mean_direction(u)
    except DegenerateMean:
        v = best
    lat, lon = latlon_from_vectors(v)
    return GeoPoint(float(lat), float(lon))


def select_cluster(similarities: Sequence[float], labels: np.ndarray) -> int:
    """Label of the largest cluster; ties go to the cluster holding the most similar point."""
    labels = np.asarray(labels)
    sims = np.asarray(similarities, dtype=np.float64)
    valid = labels >= 0
    if not valid.any():
        raise ValueError("no clustered points")
    sizes = np.bincount(labels[valid])
    tied = np.flatnonzero(sizes == sizes.max())
    if len(tied) == 1:
        return int(tied[0])
    members = np.flatnonzero(np.isin(labels, tied))
    # stable: among equal similarities the better-ranked (earlier) neighbour wins
    best = members[np.argsort(-sims[members], kind="stable")[0]]
    return int(labels[best])


def aggregate_cluster(points, similarities: Sequence[float], labels: np.ndarray) -> GeoPoint:
    u = _as_vectors(points)
    chosen = select_cluster(similarities, labels)
    best = u[int(np.argmax(np.asarray(similarities, dtype=np.float64)))]
    return _mean_or_best(u[np.asarray(labels) == chosen], best)


def aggregate_average(points, similarities: Sequence[float] | None = None) -> GeoPoint:
    u = _as_vectors(points)
    if len(u) == 0:
        raise ValueError("cannot average zero points")
    best = u[0] if similarities is None else u[int(np.argmax(np.asarray(similarities, dtype=np.float64)))]
    return _mean_or_best(u, best)


def _check_hashes(head, index: BackgroundIndex, partition: Partition) -> None:
    if head.partition_hash != partition.hash:
        raise HashMismatch("classifier was trained against a different partition")
    if index.partition_hash != partition.hash:
        raise HashMismatch("background index was built against a different partition")


def _embed(rrm: RRMParams | None, Z: np.ndarray) -> np.ndarray:
    return raw_embed(Z) if rrm is None else embed(rrm, Z)


def predict_swc_batch(
    Z: np.ndarray,
    query_ids: Sequence[int],
    head,
    rrm: RRMParams | None,
    index: BackgroundIndex,
    partition: Partition,
    config: SwcConfig = SwcConfig(),
) -> list[Prediction]:
    """Search-within-cell predictions for a batch of feature vectors.

    ``rrm=None`` retrieves with the raw l2-normalised features.
    """
    _check_hashes(head, index, partition)
    Z = np.asarray(Z, dtype=np.float64)
    Z = Z[None, :] if Z.ndim == 1 else Z
    cells = head.predict(Z)
    E = _embed(rrm, Z)
    idx_u = unit_vectors(index.lat, index.lon).reshape(-1, 3)
    out = []
    for qid, cell_idx, e in zip(query_ids, cells, E):
        leaf = partition.leaves[int(cell_idx)]
        offsets, sims = top_k_offsets(index, e, config.k, leaf.id)
        if offsets.size == 0:
            out.append(Prediction(int(qid), leaf.center, leaf.id, (), (), (), True))
            continue
        u = idx_u[offsets]
        if config.aggregator == "spatial":
            labels = dbscan_geo(u, config.eps_km, config.min_samples)
            estimate = aggregate_cluster(u, sims, labels)
        else:
            labels = np.zeros(len(u), dtype=np.int64)
            estimate = aggregate_average(u, sims)
        out.append(
            Prediction(
                int(qid),
                estimate,
                leaf.id,
                tuple(int(i) for i in index.ids[offsets]),
                tuple(float(s) for s in sims),
                tuple(int(label) for label in labels),
                False,
            )
        )
    return out


def predict_swc(z: np.ndarray, head, rrm, index, partition, config: SwcConfig = SwcConfig(), query_id: int = 0):
    return predict_swc_batch(np.atleast_2d(z), [query_id], head, rrm, index, partition, config)[0]


def predict_cell_center(Z: np.ndarray, head, partition: Partition) -> np.ndarray:
    """Classification-only estimate as (n, 2) lat/lon.

    MvMF heads answer with the mean of the highest-weight component, other
    heads with the predicted cell's center.
    """
    cells = head.predict(np.atleast_2d(Z))
    mu = getattr(head, "mu", None)
    v = mu[cells] if mu is not None else partition.center_vectors()[cells]
    lat, lon = latlon_from_vectors(v)
    return np.stack([lat, lon], axis=1)


def predict_retrieval_only(Z: np.ndarray, rrm: RRMParams | None, index: BackgroundIndex) -> np.ndarray:
    """Location of the globally nearest background image, (n, 2) lat/lon."""
    offsets, _ = top_k_batch(index, _embed(rrm, np.atleast_2d(Z)), 1)
    return np.stack([index.lat[offsets[:, 0]], index.lon[offsets[:, 0]]], axis=1)


def estimates_array(predictions: Iterable[Prediction]) -> np.ndarray:
    return np.array([[p.estimate.lat, p.estimate.lon] for p in predictions], dtype=np.float64).reshape(-1, 2)


# ---------------------------------------------------------------- output format

PREDICTION_FIELDS = ("id", "lat", "lon", "cell", "fallback", "neighbors")


def prediction_record(p: Prediction) -> dict:
    return {
        "id": p.query_id,
        "lat": p.estimate.lat,
        "lon": p.estimate.lon,
        "cell": str(p.cell),
        "fallback": p.fallback,
        "neighbors": [[i, s, label] for i, s, label in zip(p.neighbor_ids, p.similarities, p.labels)],
    }


def write_predictions(path: str | Path, predictions: Iterable[Prediction], header: dict | None = None) -> None:
    """JSON lines: an optional header object, then one record per query.

    Record keys, in order: id, lat, lon, cell, fallback, neighbors, where
    neighbors is a list of [image id, similarity, cluster label].
    """
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        if header is not None:
            f.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for p in predictions:
            f.write(json.dumps(prediction_record(p)) + "\n")


def read_predictions(path: str | Path) -> tuple[dict | None, list[dict]]:
    header, records = None, []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            if "header" in obj:
                header = obj["header"]
            else:
                records.append(obj)
    return header, records
