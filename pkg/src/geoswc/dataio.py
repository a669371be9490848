"""Dataset files, the synthetic vMF-mixture generator and seeded randomness.

Metadata is UTF-8 CSV with a ``id,lat,lon`` header.  Features live in a
little-endian binary file:

    magic "GPFV" | u16 version | u64 count | u32 dim
    count x u64 image id
    count x dim float32, row-major

The two files are joined on image id.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from geoswc.binio import FormatError, Reader, Writer
from geoswc.geo import InvalidCoordinate, latlon_from_vectors, unit_vectors

FEATURE_MAGIC = b"GPFV"
FEATURE_VERSION = 1
PRNG_NAME = "numpy PCG64 (numpy.random.default_rng)"

RangeError = InvalidCoordinate


class JoinError(ValueError):
    pass


class InvalidSpec(ValueError):
    pass


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 generator seeded through numpy's SeedSequence."""
    return np.random.Generator(np.random.PCG64(int(seed)))


@dataclass(frozen=True, eq=False)
class Dataset:
    ids: np.ndarray  # u64
    lat: np.ndarray
    lon: np.ndarray
    features: np.ndarray  # (n, D) float32
    split: str = "train"
    clusters: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        ids = np.asarray(self.ids, dtype=np.uint64)
        lat = np.asarray(self.lat, dtype=np.float64)
        lon = np.asarray(self.lon, dtype=np.float64)
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.ndim == 1 and feats.size == 0:
            feats = feats.reshape(0, 0)
        if not (len(ids) == len(lat) == len(lon) == len(feats)) or feats.ndim != 2:
            raise ValueError("dataset columns have different lengths")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("image ids are not unique")
        bad = ~((np.abs(lat) <= 90) & (lon >= -180) & (lon < 180))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise RangeError(f"image {int(ids[i])}: invalid location ({lat[i]}, {lon[i]})")
        for name, value in (("ids", ids), ("lat", lat), ("lon", lon), ("features", feats)):
            object.__setattr__(self, name, value)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def unit_vectors(self) -> np.ndarray:
        return unit_vectors(self.lat, self.lon).reshape(-1, 3)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        clusters = None if self.clusters is None else self.clusters[rows]
        return Dataset(self.ids[rows], self.lat[rows], self.lon[rows], self.features[rows], self.split, clusters)


# ------------------------------------------------------------------ file formats


def features_bytes(ids: np.ndarray, features: np.ndarray) -> bytes:
    features = np.asarray(features, dtype=np.float32)
    w = Writer()
    w.raw(FEATURE_MAGIC)
    w.pack("H", FEATURE_VERSION)
    w.pack("QI", len(ids), features.shape[1] if features.ndim == 2 else 0)
    w.array(np.asarray(ids, dtype=np.uint64), "u8")
    w.array(features, "f4")
    return w.getvalue()


def parse_features(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    r = Reader(data, "feature file")
    r.expect_magic(FEATURE_MAGIC, (FEATURE_VERSION,))
    n, dim = r.unpack("QI")
    ids = r.array("u8", n)
    feats = r.array("f4", n * dim).reshape(n, dim)
    r.expect_end()
    return ids, feats


def write_metadata(path: str | Path, ids, lat, lon) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "lat", "lon"])
        for i, a, b in zip(ids, lat, lon):
            w.writerow([int(i), repr(float(a)), repr(float(b))])


def read_metadata(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]] != ["id", "lat", "lon"]:
        raise FormatError(f"{path}: metadata must start with the header id,lat,lon")
    ids, lat, lon = [], [], []
    for line_no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            i, a, b = row
            ids.append(int(i))
            lat.append(float(a))
            lon.append(float(b))
        except ValueError as exc:
            raise FormatError(f"{path}:{line_no}: malformed row {row!r}") from exc
    return np.array(ids, dtype=np.uint64), np.array(lat), np.array(lon)


def save_dataset(ds: Dataset, metadata_path: str | Path, features_path: str | Path) -> None:
    write_metadata(metadata_path, ds.ids, ds.lat, ds.lon)
    Path(features_path).write_bytes(features_bytes(ds.ids, ds.features))


def load_dataset(metadata_path: str | Path, features_path: str | Path, split: str = "train") -> Dataset:
    ids_m, lat, lon = read_metadata(metadata_path)
    ids_f, feats = parse_features(Path(features_path).read_bytes())
    if len(ids_m) != len(ids_f):
        raise JoinError(f"metadata has {len(ids_m)} rows but the feature file holds {len(ids_f)} vectors")
    if len(np.unique(ids_m)) != len(ids_m):
        raise JoinError("duplicate ids in metadata")
    order_m, order_f = np.argsort(ids_m, kind="stable"), np.argsort(ids_f, kind="stable")
    if not np.array_equal(ids_m[order_m], ids_f[order_f]):
        missing = np.setdiff1d(ids_m, ids_f)
        raise JoinError(f"ids without features: {missing[:5].tolist()}")
    # keep metadata order
    rank = np.empty(len(ids_m), dtype=np.int64)
    rank[order_m] = order_f
    return Dataset(ids_m, lat, lon, feats[rank], split)


def describe_file(path: str | Path) -> dict:
    """Header fields of any artifact format, for debugging."""
    data = Path(path).read_bytes()
    magic = data[:4]
    if magic == FEATURE_MAGIC:
        ids, feats = parse_features(data)
        return {"format": "features", "magic": "GPFV", "version": FEATURE_VERSION, "count": len(ids),
                "dim": feats.shape[1], "bytes": len(data)}
    if magic == b"GPRT":
        from geoswc.partition import Partition

        p = Partition.from_bytes(data)
        depths = [leaf.id.depth for leaf in p.leaves]
        return {"format": "partition", "magic": "GPRT", "leaves": len(p), "target": p.target_leaf_count,
                "min_depth": min(depths), "max_depth": max(depths), "tag": p.tag, "images": int(sum(p.counts())),
                "hash": p.hash}
    if magic == b"GPIX":
        from geoswc.index import BackgroundIndex

        ix = BackgroundIndex.from_bytes(data)
        return {"format": "index", "magic": "GPIX", "entries": len(ix), "dim": ix.dim, "cells": len(ix.valid_cells),
                "partition_hash": ix.partition_hash, "classifier_hash": ix.classifier_hash, "rrm_hash": ix.rrm_hash}
    if magic == b"GPNN":
        from geoswc.numerics import parse_checkpoint

        params, meta = parse_checkpoint(data)
        return {"format": "checkpoint", "magic": "GPNN", "params": {k: list(v.shape) for k, v in params.items()},
                "meta": meta}
    if data[:3] == b"id," or data[:2] == b"id":
        ids, _, _ = read_metadata(path)
        return {"format": "metadata", "rows": len(ids)}
    raise FormatError(f"{path}: unrecognised magic {magic!r}")


# ------------------------------------------------------------------ synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """A mixture of vMF location clusters with features tied to location.

    A feature is ``A u + eta`` with ``eta ~ N(0, noise^2 I)``.  Two optional
    extras (both off by default) make retrieval non-trivial: a multi-scale
    random Fourier code of ``u`` that carries fine location detail, and
    "concept" directions unrelated to location that dominate raw cosine
    similarity.
    """

    clusters: int = 64
    kappa_loc: float = 1.0e5
    dim: int = 64
    signal_scale: float = 1.0
    noise: float = 0.05
    samples_per_cluster: int = 860
    seed: int = 1
    test_fraction: float = 0.1
    code_scale: float = 0.0
    code_features: int = 32
    code_km: tuple[float, ...] = (2.0, 20.0)
    concepts: int = 0
    concept_scale: float = 0.0

    def __post_init__(self) -> None:
        if self.clusters < 2:
            raise InvalidSpec("need at least two clusters")
        if not self.kappa_loc > 0:
            raise InvalidSpec("kappa_loc must be positive")
        if self.noise < 0 or self.signal_scale < 0 or self.code_scale < 0 or self.concept_scale < 0:
            raise InvalidSpec("scales must be non-negative")
        if self.dim < 1 or self.samples_per_cluster < 1:
            raise InvalidSpec("dim and samples_per_cluster must be positive")
        if not 0 <= self.test_fraction < 1:
            raise InvalidSpec("test_fraction must lie in [0, 1)")
        if self.code_scale > 0 and (self.code_features < 1 or not self.code_km or min(self.code_km) <= 0):
            raise InvalidSpec("location code needs positive feature count and length scales")
        if self.concept_scale > 0 and self.concepts < 1:
            raise InvalidSpec("concept_scale needs at least one concept")

    def with_seed(self, seed: int) -> "SyntheticSpec":
        return replace(self, seed=seed)


def tangent_basis(mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors completing ``mu`` to an orthonormal frame."""
    helper = np.array([1.0, 0.0, 0.0]) if abs(mu[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(mu, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(mu, e1)


def sample_vmf(rng: np.random.Generator, mu, kappa: float, n: int) -> np.ndarray:
    """Draw ``n`` unit vectors from vMF(mu, kappa) on the 2-sphere.

    The cosine to ``mu`` is sampled by inverting its CDF, the azimuth uniformly.
    """
    mu = np.asarray(mu, dtype=np.float64)
    mu = mu / np.linalg.norm(mu)
    xi = rng.random(n)
    # log(xi + (1 - xi) e^{-2k}) computed without overflow for large kappa
    w = 1.0 + np.logaddexp(np.log(np.maximum(xi, 1e-300)), np.log1p(-xi) - 2.0 * kappa) / kappa
    w = np.clip(w, -1.0, 1.0)
    phi = rng.uniform(0.0, 2.0 * np.pi, n)
    s = np.sqrt(np.maximum(0.0, 1.0 - w * w))
    e1, e2 = tangent_basis(mu)
    return w[:, None] * mu + s[:, None] * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2)


def vmf_mean_resultant(kappa: float) -> float:
    """E[mu . x] for the 2-sphere vMF: coth(k) - 1/k."""
    return 1.0 / np.tanh(kappa) - 1.0 / kappa


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    rng = seeded_rng(spec.seed)
    centers = rng.standard_normal((spec.clusters, 3))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    A = rng.standard_normal((spec.dim, 3)) * spec.signal_scale
    # drawn unconditionally so that switching an extra on leaves the rest of the stream intact
    code_rng, concept_rng, sample_rng = (seeded_rng(s) for s in rng.integers(0, 2**63, size=3))

    u = np.concatenate([sample_vmf(sample_rng, c, spec.kappa_loc, spec.samples_per_cluster) for c in centers])
    cluster = np.repeat(np.arange(spec.clusters), spec.samples_per_cluster)
    feats = u @ A.T

    if spec.code_scale > 0:
        # random Fourier features; angular frequency 1/length (radians) per scale
        from geoswc.geo import EARTH_RADIUS_KM

        per_scale = max(1, spec.code_features // len(spec.code_km))
        freqs = np.concatenate([
            code_rng.standard_normal((per_scale, 3)) * (EARTH_RADIUS_KM / km) for km in spec.code_km
        ])
        phase = code_rng.uniform(0, 2 * np.pi, len(freqs))
        mix = code_rng.standard_normal((spec.dim, len(freqs))) / np.sqrt(len(freqs))
        feats = feats + spec.code_scale * np.cos(u @ freqs.T + phase) @ mix.T
    if spec.concept_scale > 0:
        V = concept_rng.standard_normal((spec.concepts, spec.dim))
        V /= np.linalg.norm(V, axis=1, keepdims=True)
        pick = sample_rng.integers(0, spec.concepts, len(u))
        feats = feats + spec.concept_scale * V[pick]
    if spec.noise > 0:
        feats = feats + sample_rng.standard_normal(feats.shape) * spec.noise

    lat, lon = latlon_from_vectors(u)
    lon = np.where(lon >= 180.0, -180.0, lon)
    ids = np.arange(1, len(u) + 1, dtype=np.uint64)

    # stratified split: the last test_fraction of every cluster after a shuffle
    n_test = int(round(spec.test_fraction * spec.samples_per_cluster))
    is_test = np.zeros(len(u), dtype=bool)
    for c in range(spec.clusters):
        rows = np.flatnonzero(cluster == c)
        is_test[sample_rng.permutation(rows)[:n_test]] = True
    tr, te = np.flatnonzero(~is_test), np.flatnonzero(is_test)
    make = lambda rows, split: Dataset(ids[rows], lat[rows], lon[rows], feats[rows], split, cluster[rows])  # noqa: E731
    return make(tr, "train"), make(te, "test")
