"""In-memory experiment runner: one synthetic seed through every variant.

Each variant shares the partition, the classifier heads and the query set,
so differences between rows come from the retrieval or aggregation choice
alone.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from geoswc.classify import HeadConfig, MvMFHead, train_head
from geoswc.dataio import Dataset, SyntheticSpec, generate_synthetic, seeded_rng
from geoswc.evaluate import RangeSet, accuracy_at
from geoswc.index import BackgroundIndex, build_background
from geoswc.partition import Partition, build_partition
from geoswc.retrieve import RetrievalConfig, RRMParams, embed, raw_embed, train_rrm
from geoswc.swc import SwcConfig, estimates_array, predict_cell_center, predict_swc_batch

K_SWEEP = (1, 5, 10, 15, 20)
SEEDS = (1, 2, 3, 4, 5)

# 64 tight clusters (angular std about 4.5 km), 49,536 train / 5,504 test
DESK_SPEC = SyntheticSpec(
    clusters=64,
    kappa_loc=2.0e6,
    dim=64,
    signal_scale=1.0,
    noise=0.05,
    samples_per_cluster=860,
    code_scale=1.0,
    code_features=48,
    code_km=(1.0, 3.0, 10.0),
    concepts=8,
    concept_scale=3.0,
)


@dataclass(frozen=True)
class ExperimentConfig:
    data: SyntheticSpec = DESK_SPEC
    fine_cells: int = 64
    min_split_size: int = 50
    flat: HeadConfig = field(default_factory=lambda: HeadConfig(epochs=8, lr=1e-2))
    mvmf: HeadConfig = field(default_factory=lambda: HeadConfig(epochs=4, lr=3e-3, kappa0=1e4, kappa_max=1e7))
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    swc: SwcConfig = SwcConfig()
    k_sweep: tuple[int, ...] = K_SWEEP
    outlier_fraction: float = 0.3
    outlier_min_km: float = 3.0
    ranges: RangeSet = RangeSet()


@dataclass
class ExperimentResult:
    seed: int
    train_cell_accuracy: float
    placeable_fraction: float
    accuracy: dict[str, dict[float, float]]
    k_sweep: dict[int, dict[float, float]]
    timings: dict[str, float]


class Pipeline:
    """Trained artifacts for one dataset, plus helpers to score variants."""

    def __init__(self, config: ExperimentConfig, train: Dataset, test: Dataset, seed: int | None = None):
        self.config = config
        self.seed = config.data.seed if seed is None else seed
        self.train, self.test = train, test
        self.timings: dict[str, float] = {}
        with self._timed("partition"):
            self.partition = build_partition(
                (train.ids, train.lat, train.lon), config.fine_cells, config.min_split_size
            )
            self.train_cells = self.partition.assign_indices(train.lat, train.lon)
        with self._timed("heads"):
            flat_cfg = replace(config.flat, seed=self.seed)
            self.flat = train_head("flat", train.features, train.lat, train.lon, self.partition, flat_cfg).head
            mvmf_cfg = replace(config.mvmf, seed=self.seed)
            self.mvmf: MvMFHead = train_head(
                "mvmf", train.features, train.lat, train.lon, self.partition, mvmf_cfg, init=self.flat
            ).head
            self.train_pred = self.mvmf.predict(train.features.astype(np.float64))
        self._rrms: dict[str, RRMParams | None] = {"raw": None}
        self._indexes: dict[str, BackgroundIndex] = {}

    @contextmanager
    def _timed(self, name: str):
        t0 = time.perf_counter()
        yield
        self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0

    @property
    def flat_train_accuracy(self) -> float:
        return float(np.mean(self.flat.predict(self.train.features.astype(np.float64)) == self.train_cells))

    def rrm(self, name: str, **overrides) -> RRMParams | None:
        if name not in self._rrms:
            cfg = replace(self.config.retrieval, seed=self.seed, **overrides)
            with self._timed("rrm"):
                self._rrms[name] = train_rrm(self.train.features, self.train_cells, cfg).params
        return self._rrms[name]

    def index(self, name: str) -> BackgroundIndex:
        if name not in self._indexes:
            rrm = self._rrms[name]
            Z = self.train.features.astype(np.float64)
            E = raw_embed(Z) if rrm is None else embed(rrm, Z)
            self._indexes[name] = build_background(
                self.train.ids, self.train.lat, self.train.lon, E, self.train_cells, self.train_pred, self.partition
            )
        return self._indexes[name]

    def swc_accuracy(self, name: str, index: BackgroundIndex | None = None, **swc) -> dict[float, float]:
        cfg = replace(self.config.swc, **swc)
        with self._timed("swc"):
            preds = predict_swc_batch(
                self.test.features, self.test.ids, self.mvmf, self._rrms[name], index or self.index(name),
                self.partition, cfg,
            )
        truth = np.stack([self.test.lat, self.test.lon], axis=1)
        return accuracy_at(estimates_array(preds), truth, self.config.ranges)

    def center_accuracy(self) -> dict[float, float]:
        est = predict_cell_center(self.test.features, self.mvmf, self.partition)
        return accuracy_at(est, np.stack([self.test.lat, self.test.lon], axis=1), self.config.ranges)


def plant_outliers(index: BackgroundIndex, fraction: float, min_km: float, rng: np.random.Generator) -> BackgroundIndex:
    """Copy of ``index`` where a fraction of entries carry a wrong, distant in-cell location.

    Each relocated entry takes the location of another entry of its cell lying
    at least ``min_km`` away, so it stays a legitimate in-cell neighbour whose
    geotag disagrees with its content.
    """
    from geoswc.geo import gcd_km_arrays

    lat, lon = index.lat.copy(), index.lon.copy()
    for cell, offsets in index.postings.items():
        if len(offsets) < 2:
            continue
        chosen = offsets[rng.random(len(offsets)) < fraction]
        for o in chosen:
            far = offsets[gcd_km_arrays(index.lat[o], index.lon[o], index.lat[offsets], index.lon[offsets]) >= min_km]
            if far.size:
                donor = far[rng.integers(far.size)]
                lat[o], lon[o] = index.lat[donor], index.lon[donor]
    return BackgroundIndex(
        index.ids, lat, lon, index.embeddings, index.cells, index.partition_hash, index.classifier_hash,
        index.rrm_hash, index.valid_cells,
    )


def run_seed(config: ExperimentConfig, seed: int) -> ExperimentResult:
    data = config.data.with_seed(seed)
    config = replace(config, data=data)
    train, test = generate_synthetic(data)
    p = Pipeline(config, train, test)
    acc: dict[str, dict[float, float]] = {"mvmf_center": p.center_accuracy()}

    p.rrm("raw")
    p.rrm("infonce")
    p.rrm("no_residual", residual=False)
    p.rrm("triplet", loss="triplet")
    for name in ("raw", "infonce", "no_residual", "triplet"):
        acc[f"swc_{name}"] = p.swc_accuracy(name)

    planted = plant_outliers(p.index("infonce"), config.outlier_fraction, config.outlier_min_km, seeded_rng(seed))
    acc["outlier_spatial"] = p.swc_accuracy("infonce", planted, aggregator="spatial")
    acc["outlier_average"] = p.swc_accuracy("infonce", planted, aggregator="average")

    sweep = {k: p.swc_accuracy("infonce", k=k) for k in config.k_sweep}
    placeable = len(p.index("infonce")) / len(train)
    return ExperimentResult(seed, p.flat_train_accuracy, placeable, acc, sweep, dict(p.timings))


def median_at(results: Sequence[ExperimentResult], method: str, km: float) -> float:
    return float(np.median([r.accuracy[method][km] for r in results]))


def monotonicity_report(sweep: dict[int, dict[float, float]], km: float = 1.0) -> dict:
    ks = sorted(sweep)
    values = [sweep[k][km] for k in ks]
    steps = [b - a for a, b in zip(values, values[1:])]
    return {
        "range_km": km,
        "k": ks,
        "accuracy": values,
        "non_decreasing": all(s >= 0 for s in steps),
        "non_increasing": all(s <= 0 for s in steps),
        "best_k": ks[int(np.argmax(values))],
    }
