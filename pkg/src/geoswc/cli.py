"""Command-line pipeline: synth, partition, train, index, predict, evaluate, ablate.

Artifacts live in one flat directory and are named ``{role}-{sha16}.{ext}``
after the sha256 of their bytes.  ``refs.json`` in that directory maps each
role to its latest artifact, and every artifact gets a sibling
``.manifest.json`` with the config snapshot, seed, input hashes and wall time.

Exit codes: 0 success, 1 unexpected error, 2 usage, 3 invalid config,
4 missing prerequisite, 5 hash mismatch, 6 malformed input file.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from geoswc import __version__
from geoswc.binio import FormatError, file_sha256, sha256_bytes
from geoswc.classify import HeadConfig, head_checkpoint, head_from_checkpoint, train_head
from geoswc.dataio import (
    Dataset,
    JoinError,
    RangeError,
    SyntheticSpec,
    describe_file,
    generate_synthetic,
    load_dataset,
    save_dataset,
)
from geoswc.evaluate import (
    QueryMismatch,
    RangeSet,
    Run,
    accuracy_at,
    compare_runs,
    format_table,
    range_label,
    results_json,
)
from geoswc.index import _NO_HASH, BackgroundIndex, build_background
from geoswc.numerics import checkpoint_bytes, load_checkpoint
from geoswc.partition import InvalidConfig, Partition, build_partition, nested_snapshots
from geoswc.pipeline import DESK_SPEC, K_SWEEP, ExperimentConfig, Pipeline, monotonicity_report, plant_outliers
from geoswc.retrieve import RetrievalConfig, embed, raw_embed, rrm_checkpoint, rrm_from_checkpoint, train_rrm
from geoswc.swc import HashMismatch, SwcConfig, predict_swc_batch, prediction_record, read_predictions

log = logging.getLogger("geoswc")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING, EXIT_HASH, EXIT_FORMAT = range(7)


class ConfigError(ValueError):
    pass


class MissingPrerequisite(FileNotFoundError):
    pass


# ------------------------------------------------------------------ configuration


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(" ", "").split(",") if x)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(" ", "").split(",") if x)


def _bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_EXPERIMENT = ExperimentConfig()

# section -> key -> parser; defaults come from the owning dataclasses
SCHEMA: dict[str, dict[str, Callable[[str], object]]] = {
    "data": {
        "artifacts": str,
        "train_metadata": str,
        "train_features": str,
        "test_metadata": str,
        "test_features": str,
    },
    "synth": {
        "clusters": int,
        "kappa_loc": float,
        "dim": int,
        "signal_scale": float,
        "noise": float,
        "samples_per_cluster": int,
        "test_fraction": float,
        "code_scale": float,
        "code_features": int,
        "code_km": _floats,
        "concepts": int,
        "concept_scale": float,
    },
    "partition": {"cells": _ints, "min_split_size": int},
    "classify": {
        "head": str,
        "epochs": int,
        "batch_size": int,
        "optimizer": str,
        "lr": float,
        "weight_decay": float,
        "momentum": float,
        "schedule": str,
        "step_epochs": int,
        "gamma": float,
        "mvmf_epochs": int,
        "mvmf_lr": float,
        "kappa0": float,
        "kappa_max": float,
        "train_mu": _bool,
    },
    "retrieve": {
        "loss": str,
        "hidden": int,
        "tau": float,
        "bank_size": int,
        "batch_size": int,
        "epochs": int,
        "lr": float,
        "weight_decay": float,
        "margin": float,
        "residual": _bool,
        "ln_placement": str,
    },
    "swc": {"k": int, "eps_km": float, "min_samples": int, "aggregator": str},
    "evaluate": {"ranges": _floats},
    "ablate": {"k_sweep": _ints, "outlier_fraction": float, "outlier_min_km": float},
    "pipeline": {"seed": int},
}

HEAD_KINDS = ("flat", "hc", "mvmf")
RRM_LOSSES = ("infonce", "triplet", "none")


@dataclass
class PipelineConfig:
    artifacts: Path = Path("artifacts")
    train_metadata: Path | None = None
    train_features: Path | None = None
    test_metadata: Path | None = None
    test_features: Path | None = None
    synth: SyntheticSpec = DESK_SPEC
    cells: tuple[int, ...] = (_EXPERIMENT.fine_cells,)
    min_split_size: int = _EXPERIMENT.min_split_size
    head: str = "mvmf"
    flat: HeadConfig = field(default_factory=lambda: replace(_EXPERIMENT.flat))
    mvmf: HeadConfig = field(default_factory=lambda: replace(_EXPERIMENT.mvmf))
    rrm_loss: str = "infonce"
    retrieval: RetrievalConfig = field(default_factory=lambda: replace(_EXPERIMENT.retrieval))
    swc: SwcConfig = _EXPERIMENT.swc
    ranges: RangeSet = RangeSet()
    k_sweep: tuple[int, ...] = K_SWEEP
    outlier_fraction: float = _EXPERIMENT.outlier_fraction
    outlier_min_km: float = _EXPERIMENT.outlier_min_km
    seed: int = 1
    raw: dict[str, dict[str, str]] = field(default_factory=dict)

    def data_path(self, split: str, part: str) -> Path:
        explicit = getattr(self, f"{split}_{part}")
        if explicit is not None:
            return explicit
        return self.artifacts / f"{split}.{'csv' if part == 'metadata' else 'gpfv'}"

    def snapshot(self) -> dict:
        """Plain-data view of every effective setting, for manifests and headers."""
        return {
            "data": {
                "artifacts": str(self.artifacts),
                **{f"{s}_{p}": str(self.data_path(s, p)) for s in ("train", "test") for p in ("metadata", "features")},
            },
            "synth": {**asdict(self.synth), "code_km": list(self.synth.code_km)},
            "partition": {"cells": list(self.cells), "min_split_size": self.min_split_size},
            "classify": {"head": self.head, "flat": asdict(self.flat), "mvmf": asdict(self.mvmf)},
            "retrieve": {"loss": self.rrm_loss, **asdict(self.retrieval)},
            "swc": asdict(self.swc),
            "evaluate": {"ranges": list(self.ranges.thresholds)},
            "ablate": {"k_sweep": list(self.k_sweep), "outlier_fraction": self.outlier_fraction,
                       "outlier_min_km": self.outlier_min_km},
            "pipeline": {"seed": self.seed},
        }

    def experiment(self) -> ExperimentConfig:
        return ExperimentConfig(
            data=self.synth,
            fine_cells=self.cells[-1],
            min_split_size=self.min_split_size,
            flat=self.flat,
            mvmf=self.mvmf,
            retrieval=self.retrieval,
            swc=self.swc,
            k_sweep=self.k_sweep,
            outlier_fraction=self.outlier_fraction,
            outlier_min_km=self.outlier_min_km,
            ranges=self.ranges,
        )


def parse_overrides(items: list[str]) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in items:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        out.setdefault(section, {})[name] = value.strip()
    return out


def load_config(path: str | Path | None, overrides: list[str] = (), artifacts: str | None = None) -> PipelineConfig:
    """Read an INI file (optional), apply ``section.key=value`` overrides, validate."""
    parser = configparser.ConfigParser(interpolation=None)
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        base = path.parent
    raw: dict[str, dict[str, str]] = {s: dict(parser[s]) for s in parser.sections()}
    for section, values in parse_overrides(list(overrides)).items():
        raw.setdefault(section, {}).update(values)
    if artifacts is not None:
        # a command-line path is relative to the working directory, not the config file
        raw.setdefault("data", {})["artifacts"] = str(Path(artifacts).resolve())

    values: dict[str, dict[str, object]] = {}
    for section, items in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, text in items.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                values.setdefault(section, {})[key] = SCHEMA[section][key](text)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key} = {text!r}: {exc}") from exc
    try:
        return _build_config(values, base, raw)
    except (ValueError, TypeError, InvalidConfig) as exc:
        raise ConfigError(str(exc)) from exc


def _build_config(v: dict[str, dict[str, object]], base: Path, raw) -> PipelineConfig:
    cfg = PipelineConfig(raw=raw)
    resolve = lambda p: (base / p).resolve()  # noqa: E731
    data = v.get("data", {})
    if "artifacts" in data:
        cfg.artifacts = resolve(data["artifacts"])
    else:
        cfg.artifacts = (base / "artifacts").resolve()
    for key in ("train_metadata", "train_features", "test_metadata", "test_features"):
        if key in data:
            setattr(cfg, key, resolve(data[key]))

    cfg.seed = int(v.get("pipeline", {}).get("seed", cfg.seed))
    cfg.synth = replace(cfg.synth, seed=cfg.seed, **v.get("synth", {}))

    part = v.get("partition", {})
    cfg.cells = tuple(part.get("cells", cfg.cells))
    cfg.min_split_size = int(part.get("min_split_size", cfg.min_split_size))
    if len(cfg.cells) not in (1, 3):
        raise ConfigError("[partition] cells takes one count or a coarse,mid,fine triple")
    if any(c < 8 for c in cfg.cells) or any(b < a for a, b in zip(cfg.cells, cfg.cells[1:])):
        raise ConfigError("[partition] cell counts must be >= 8 and non-decreasing")
    if cfg.min_split_size < 1:
        raise ConfigError("[partition] min_split_size must be >= 1")

    cls = dict(v.get("classify", {}))
    cfg.head = str(cls.pop("head", cfg.head))
    if cfg.head not in HEAD_KINDS:
        raise ConfigError(f"[classify] head must be one of {HEAD_KINDS}")
    if cfg.head == "hc" and len(cfg.cells) != 3:
        raise ConfigError("the hc head needs [partition] cells = coarse,mid,fine")
    mvmf_keys = {"mvmf_epochs": "epochs", "mvmf_lr": "lr", "kappa0": "kappa0", "kappa_max": "kappa_max",
                 "train_mu": "train_mu"}
    mvmf = {mvmf_keys[k]: cls.pop(k) for k in list(cls) if k in mvmf_keys}
    cfg.flat = replace(cfg.flat, **cls, seed=cfg.seed)
    shared = {k: val for k, val in cls.items() if k not in ("epochs", "lr")}
    cfg.mvmf = replace(cfg.mvmf, **shared, **mvmf, seed=cfg.seed)
    for hc in (cfg.flat, cfg.mvmf):
        if hc.optimizer not in ("adamw", "sgd"):
            raise ConfigError("[classify] optimizer must be adamw or sgd")
        if hc.schedule not in ("constant", "step", "cosine"):
            raise ConfigError("[classify] schedule must be constant, step or cosine")
        if hc.epochs < 1 or hc.batch_size < 1 or hc.lr <= 0:
            raise ConfigError("[classify] epochs, batch_size and lr must be positive")
        if hc.kappa0 <= 0 or hc.kappa_max < hc.kappa0:
            raise ConfigError("[classify] need 0 < kappa0 <= kappa_max")

    ret = dict(v.get("retrieve", {}))
    cfg.rrm_loss = str(ret.pop("loss", cfg.rrm_loss))
    if cfg.rrm_loss not in RRM_LOSSES:
        raise ConfigError(f"[retrieve] loss must be one of {RRM_LOSSES}")
    cfg.retrieval = replace(
        cfg.retrieval, **ret, loss=cfg.rrm_loss if cfg.rrm_loss != "none" else "infonce", seed=cfg.seed
    )
    if cfg.retrieval.ln_placement not in ("input", "normalized"):
        raise ConfigError("[retrieve] ln_placement must be input or normalized")
    if min(cfg.retrieval.hidden, cfg.retrieval.bank_size, cfg.retrieval.batch_size, cfg.retrieval.epochs) < 1:
        raise ConfigError("[retrieve] hidden, bank_size, batch_size and epochs must be positive")

    cfg.swc = replace(cfg.swc, **v.get("swc", {}))
    if "ranges" in v.get("evaluate", {}):
        cfg.ranges = RangeSet(v["evaluate"]["ranges"])
    abl = v.get("ablate", {})
    cfg.k_sweep = tuple(abl.get("k_sweep", cfg.k_sweep))
    if not cfg.k_sweep or min(cfg.k_sweep) < 1:
        raise ConfigError("[ablate] k_sweep values must be >= 1")
    cfg.outlier_fraction = float(abl.get("outlier_fraction", cfg.outlier_fraction))
    cfg.outlier_min_km = float(abl.get("outlier_min_km", cfg.outlier_min_km))
    if not 0 <= cfg.outlier_fraction <= 1:
        raise ConfigError("[ablate] outlier_fraction must lie in [0, 1]")
    return cfg


# ------------------------------------------------------------------ artifact store


class Store:
    """Flat content-addressed artifact directory with a role -> file map."""

    def __init__(self, root: Path):
        self.root = Path(root)

    @property
    def refs_path(self) -> Path:
        return self.root / "refs.json"

    def refs(self) -> dict[str, str | None]:
        if not self.refs_path.exists():
            return {}
        return json.loads(self.refs_path.read_text(encoding="utf-8"))

    def set_ref(self, role: str, name: str | None) -> None:
        refs = self.refs()
        refs[role] = name
        self.root.mkdir(parents=True, exist_ok=True)
        self.refs_path.write_text(json.dumps(refs, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def put(self, role: str, ext: str, data: bytes, manifest: dict) -> tuple[Path, str]:
        sha = sha256_bytes(data)
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / f"{role}-{sha[:16]}.{ext}"
        path.write_bytes(data)
        manifest = {"artifact": path.name, "role": role, "sha256": sha, "version": __version__, **manifest}
        (self.root / f"{path.name}.manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        self.set_ref(role, path.name)
        log.info("wrote %s", path)
        return path, sha

    def get(self, role: str, override: str | None = None) -> tuple[Path, str]:
        """Path and sha256 of the artifact for ``role`` (or of ``override``)."""
        if override is not None:
            path = Path(override)
        else:
            name = self.refs().get(role)
            if not name:
                raise MissingPrerequisite(f"no {role} artifact in {self.root}; run the producing subcommand first")
            path = self.root / name
        if not path.is_file():
            raise MissingPrerequisite(f"{role} artifact not found: {path}")
        sha = file_sha256(path)
        stem = path.name.split(".")[0]
        if stem.startswith(f"{role}-") and not sha.startswith(stem[len(role) + 1 :]):
            raise HashMismatch(f"{path.name}: content no longer matches its hash-derived name")
        return path, sha

    def has(self, role: str) -> bool:
        return role in self.refs()


def _dataset_sha(cfg: PipelineConfig, split: str) -> str:
    paths = [cfg.data_path(split, "metadata"), cfg.data_path(split, "features")]
    for p in paths:
        if not p.is_file():
            raise MissingPrerequisite(f"{split} data not found: {p} (run `geoswc synth` or set [data] paths)")
    return sha256_bytes(b"".join(bytes.fromhex(file_sha256(p)) for p in paths))


def _load_split(cfg: PipelineConfig, split: str) -> Dataset:
    _dataset_sha(cfg, split)
    return load_dataset(cfg.data_path(split, "metadata"), cfg.data_path(split, "features"), split)


def _manifest(cfg: PipelineConfig, command: str, inputs: dict[str, str], t0: float, **extra) -> dict:
    return {
        "command": command,
        "config": cfg.snapshot(),
        "seed": cfg.seed,
        "inputs": inputs,
        "wall_time_s": round(time.perf_counter() - t0, 3),
        **extra,
    }


# ------------------------------------------------------------------ subcommands


def cmd_synth(cfg: PipelineConfig, args) -> int:
    t0 = time.perf_counter()
    train, test = generate_synthetic(cfg.synth)
    for ds in (train, test):
        meta, feats = cfg.data_path(ds.split, "metadata"), cfg.data_path(ds.split, "features")
        meta.parent.mkdir(parents=True, exist_ok=True)
        feats.parent.mkdir(parents=True, exist_ok=True)
        save_dataset(ds, meta, feats)
        log.info("wrote %d %s images to %s, %s", len(ds), ds.split, meta, feats)
    manifest = _manifest(cfg, "synth", {}, t0, outputs={s: _dataset_sha(cfg, s) for s in ("train", "test")})
    cfg.artifacts.mkdir(parents=True, exist_ok=True)
    (cfg.artifacts / "synth.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"synth: {len(train)} train / {len(test)} test images, D={train.dim}")
    return EXIT_OK


def cmd_partition(cfg: PipelineConfig, args) -> int:
    t0 = time.perf_counter()
    store = Store(cfg.artifacts)
    train = _load_split(cfg, "train")
    inputs = {"train": _dataset_sha(cfg, "train")}
    images = (train.ids, train.lat, train.lon)
    if len(cfg.cells) == 3:
        parts = nested_snapshots(images, cfg.cells, cfg.min_split_size)
        roles = ("partition_coarse", "partition_mid", "partition")
    else:
        parts = (build_partition(images, cfg.cells[0], cfg.min_split_size),)
        roles = ("partition",)
        store.set_ref("partition_coarse", None)
        store.set_ref("partition_mid", None)
    for role, p in zip(roles, parts):
        store.put(role, "gprt", p.to_bytes(), _manifest(cfg, "partition", inputs, t0, leaves=len(p)))
    print(f"partition: {len(parts[-1])} leaves (target {cfg.cells[-1]}), hash {parts[-1].hash[:16]}")
    return EXIT_OK


def _load_partition(store: Store, role: str = "partition", override: str | None = None) -> tuple[Partition, str]:
    path, sha = store.get(role, override)
    return Partition.load(path), sha


def cmd_train_classifier(cfg: PipelineConfig, args) -> int:
    t0 = time.perf_counter()
    store = Store(cfg.artifacts)
    train = _load_split(cfg, "train")
    partition, p_sha = _load_partition(store, override=args.partition)
    inputs = {"train": _dataset_sha(cfg, "train"), "partition": p_sha}
    Z = train.features
    if cfg.head == "hc":
        coarse, c_sha = _load_partition(store, "partition_coarse")
        mid, m_sha = _load_partition(store, "partition_mid")
        inputs.update(partition_coarse=c_sha, partition_mid=m_sha)
        result = train_head("hc", Z, train.lat, train.lon, (coarse, mid, partition), cfg.flat, ids=train.ids)
    else:
        result = train_head("flat", Z, train.lat, train.lon, partition, cfg.flat, ids=train.ids)
        if cfg.head == "mvmf":
            result = train_head("mvmf", Z, train.lat, train.lon, partition, cfg.mvmf, init=result.head, ids=train.ids)
    params, meta = head_checkpoint(result.head)
    truth = partition.assign_indices(train.lat, train.lon)
    acc = float(np.mean(result.head.predict(Z.astype(np.float64)) == truth))
    store.put("classifier", "gpnn", checkpoint_bytes(params, meta),
              _manifest(cfg, "train-classifier", inputs, t0, head=cfg.head, train_cell_accuracy=acc,
                        losses=result.losses))
    print(f"train-classifier: {cfg.head} head, train cell accuracy {100 * acc:.2f}%")
    return EXIT_OK


def cmd_train_rrm(cfg: PipelineConfig, args) -> int:
    t0 = time.perf_counter()
    store = Store(cfg.artifacts)
    if cfg.rrm_loss == "none":
        store.set_ref("rrm", None)
        print("train-rrm: loss = none, retrieval will use raw features")
        return EXIT_OK
    train = _load_split(cfg, "train")
    partition, p_sha = _load_partition(store, override=args.partition)
    cells = partition.assign_indices(train.lat, train.lon)
    result = train_rrm(train.features, cells, cfg.retrieval)
    arrays, meta = rrm_checkpoint(result.params, loss=cfg.rrm_loss, partition_hash=p_sha)
    store.put("rrm", "gpnn", checkpoint_bytes(arrays, meta),
              _manifest(cfg, "train-rrm", {"train": _dataset_sha(cfg, "train"), "partition": p_sha}, t0,
                        losses=result.losses))
    print(f"train-rrm: {cfg.rrm_loss}, residual={cfg.retrieval.residual}, final loss {result.losses[-1]:.4f}")
    return EXIT_OK


def _load_classifier(store: Store, override: str | None):
    path, sha = store.get("classifier", override)
    params, meta = load_checkpoint(path)
    try:
        return head_from_checkpoint(params, meta), sha
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: not a classifier checkpoint ({exc})") from exc


def _load_rrm(store: Store, override: str | None):
    if override is None and not store.refs().get("rrm"):
        if "rrm" not in store.refs():
            raise MissingPrerequisite("no rrm artifact; run `geoswc train-rrm` first")
        return None, _NO_HASH
    path, sha = store.get("rrm", override)
    arrays, meta = load_checkpoint(path)
    try:
        return rrm_from_checkpoint(arrays, meta), sha
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"{path}: not a retrieval checkpoint ({exc})") from exc


def _require_same(what: str, expected: str, actual: str) -> None:
    if expected != actual:
        raise HashMismatch(f"{what}: expected {expected[:16]}, found {actual[:16]}")


def cmd_build_index(cfg: PipelineConfig, args) -> int:
    t0 = time.perf_counter()
    store = Store(cfg.artifacts)
    train = _load_split(cfg, "train")
    partition, p_sha = _load_partition(store, override=args.partition)
    head, c_sha = _load_classifier(store, args.classifier)
    rrm, r_sha = _load_rrm(store, args.rrm)
    _require_same("classifier partition", p_sha, head.partition_hash)
    Z = train.features.astype(np.float64)
    E = raw_embed(Z) if rrm is None else embed(rrm, Z)
    truth = partition.assign_indices(train.lat, train.lon)
    index = build_background(train.ids, train.lat, train.lon, E, truth, head.predict(Z), partition, c_sha, r_sha)
    inputs = {"train": _dataset_sha(cfg, "train"), "partition": p_sha, "classifier": c_sha, "rrm": r_sha}
    store.put("index", "gpix", index.to_bytes(),
              _manifest(cfg, "build-index", inputs, t0, entries=len(index), placeable_fraction=len(index) / len(train)))
    print(f"build-index: {len(index)} of {len(train)} training images placeable")
    return EXIT_OK


def cmd_predict(cfg: PipelineConfig, args) -> int:
    t0 = time.perf_counter()
    store = Store(cfg.artifacts)
    test = _load_split(cfg, "test")
    partition, p_sha = _load_partition(store, override=args.partition)
    head, c_sha = _load_classifier(store, args.classifier)
    rrm, r_sha = _load_rrm(store, args.rrm)
    i_path, i_sha = store.get("index", args.index)
    index = BackgroundIndex.load(i_path)
    _require_same("classifier partition", p_sha, head.partition_hash)
    _require_same("index partition", p_sha, index.partition_hash)
    _require_same("index classifier", c_sha, index.classifier_hash)
    _require_same("index retrieval module", r_sha, index.rrm_hash)
    preds = predict_swc_batch(test.features, test.ids, head, rrm, index, partition, cfg.swc)
    inputs = {"test": _dataset_sha(cfg, "test"), "partition": p_sha, "classifier": c_sha, "rrm": r_sha, "index": i_sha}
    header = {"inputs": inputs, "swc": asdict(cfg.swc), "fields": ["id", "lat", "lon", "cell", "fallback", "neighbors"]}
    lines = [json.dumps({"header": header}, sort_keys=True)] + [json.dumps(prediction_record(p)) for p in preds]
    data = ("\n".join(lines) + "\n").encode("utf-8")
    path, _ = store.put("predictions", "jsonl", data, _manifest(cfg, "predict", inputs, t0, queries=len(preds)))
    fallbacks = sum(p.fallback for p in preds)
    print(f"predict: {len(preds)} queries ({fallbacks} empty-cell fallbacks) -> {path.name}")
    return EXIT_OK


def _load_run(path: Path, test: Dataset, name: str) -> Run:
    try:
        _, records = read_predictions(path)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: not a prediction file ({exc})") from exc
    try:
        ids = np.array([r["id"] for r in records], dtype=np.uint64)
        est = np.array([[r["lat"], r["lon"]] for r in records], dtype=np.float64).reshape(-1, 2)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: prediction record lacks {exc}") from exc
    row = {int(i): k for k, i in enumerate(test.ids)}
    missing = [int(i) for i in ids if int(i) not in row]
    if missing:
        raise QueryMismatch(f"{path}: {len(missing)} predicted ids are not in the test set, e.g. {missing[:3]}")
    rows = np.array([row[int(i)] for i in ids], dtype=np.int64)
    truth = np.stack([test.lat[rows], test.lon[rows]], axis=1)
    return Run(name, ids, est, truth)


def cmd_evaluate(cfg: PipelineConfig, args) -> int:
    t0 = time.perf_counter()
    store = Store(cfg.artifacts)
    test = _load_split(cfg, "test")
    path, sha = store.get("predictions", args.predictions)
    run = _load_run(path, test, args.name)
    results = {run.name: run.accuracy(cfg.ranges)}
    extra: dict = {"queries": len(run.ids)}
    text = format_table(results, cfg.ranges)
    if args.baseline:
        base = _load_run(Path(args.baseline), test, "baseline")
        results["baseline"] = base.accuracy(cfg.ranges)
        cmp = compare_runs(run, base, cfg.ranges)
        extra["comparison"] = {"signs": cmp.signs, "rows": cmp.rows}
        text = format_table(results, cfg.ranges) + f"\n\ndelta signs ({run.name} - baseline): {cmp.signs}"
    doc = results_json(results, **extra)
    inputs = {"predictions": sha, "test": _dataset_sha(cfg, "test")}
    store.put("evaluation", "json", (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode(),
              _manifest(cfg, "evaluate", inputs, t0))
    store.put("evaluation_table", "txt", (text + "\n").encode(), _manifest(cfg, "evaluate", inputs, t0))
    print(text)
    return EXIT_OK


ABLATION_GRIDS = ("k", "loss", "residual", "aggregator")


def cmd_ablate(cfg: PipelineConfig, args) -> int:
    t0 = time.perf_counter()
    store = Store(cfg.artifacts)
    train, test = _load_split(cfg, "train"), _load_split(cfg, "test")
    grids = ABLATION_GRIDS if args.grid == "all" else (args.grid,)
    pipe = Pipeline(cfg.experiment(), train, test, seed=cfg.seed)
    ranges = cfg.ranges
    sections: list[str] = []
    doc: dict = {"seed": cfg.seed}

    def table(title: str, rows: dict) -> None:
        sections.append(format_table(rows, ranges, title=title))
        doc.setdefault(title, results_json(rows)["results"])

    pipe.rrm("infonce")
    if "k" in grids:
        sweep = {}
        for k in cfg.k_sweep:
            sweep[k] = pipe.swc_accuracy("infonce", k=k)
            table(f"K = {k}", {f"SwC K={k}": sweep[k]})
        report = monotonicity_report(sweep, 1.0 if 1.0 in ranges.thresholds else ranges.thresholds[0])
        doc["k_monotonicity"] = report
        sections.append(
            f"K sweep at {range_label(report['range_km'])}: non-decreasing={report['non_decreasing']}, "
            f"non-increasing={report['non_increasing']}, best K={report['best_k']}"
        )
    if "loss" in grids:
        pipe.rrm("raw")
        pipe.rrm("triplet", loss="triplet")
        table("retrieval loss", {"baseline": pipe.swc_accuracy("raw"), "triplet": pipe.swc_accuracy("triplet"),
                                 "infoNCE": pipe.swc_accuracy("infonce")})
    if "residual" in grids:
        pipe.rrm("no_residual", residual=False)
        table("residual connection", {"w/o residual": pipe.swc_accuracy("no_residual"),
                                      "w/ residual": pipe.swc_accuracy("infonce")})
    if "aggregator" in grids:
        rows = {
            "Average": pipe.swc_accuracy("infonce", aggregator="average"),
            "Spatial clustering": pipe.swc_accuracy("infonce", aggregator="spatial"),
        }
        planted = plant_outliers(pipe.index("infonce"), cfg.outlier_fraction, cfg.outlier_min_km,
                                 np.random.default_rng(cfg.seed))
        rows["Average (planted outliers)"] = pipe.swc_accuracy("infonce", planted, aggregator="average")
        rows["Spatial clustering (planted outliers)"] = pipe.swc_accuracy("infonce", planted, aggregator="spatial")
        table("aggregation", rows)
    text = "\n\n".join(sections)
    inputs = {"train": _dataset_sha(cfg, "train"), "test": _dataset_sha(cfg, "test")}
    store.put("ablation", "json", (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode(),
              _manifest(cfg, "ablate", inputs, t0, grids=list(grids)))
    store.put("ablation_table", "txt", (text + "\n").encode(), _manifest(cfg, "ablate", inputs, t0))
    print(text)
    return EXIT_OK


def cmd_dump(cfg: PipelineConfig | None, args) -> int:
    path = Path(args.file)
    if not path.is_file():
        raise MissingPrerequisite(f"file not found: {path}")
    print(json.dumps(describe_file(path), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_run(cfg: PipelineConfig, args) -> int:
    """Full chain; synthesises data first unless both splits already exist."""
    have_data = all(cfg.data_path(s, p).is_file() for s in ("train", "test") for p in ("metadata", "features"))
    steps = [] if have_data and not args.resynth else [cmd_synth]
    steps += [cmd_partition, cmd_train_classifier, cmd_train_rrm, cmd_build_index, cmd_predict, cmd_evaluate]
    for step in steps:
        code = step(cfg, args)
        if code != EXIT_OK:
            return code
    return EXIT_OK


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="INI config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("--artifacts", help="artifact directory (overrides [data] artifacts)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(
        prog="geoswc",
        description="Cell classification plus search-within-cell geolocation on feature vectors.",
        epilog="exit codes: 0 ok, 1 error, 2 usage, 3 config, 4 missing prerequisite, 5 hash mismatch, 6 bad file",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    add("synth", cmd_synth, "generate the synthetic train/test datasets")
    add("partition", cmd_partition, "build the adaptive partition from training locations")
    p = add("train-classifier", cmd_train_classifier, "train the cell classification head")
    p.add_argument("--partition")
    p = add("train-rrm", cmd_train_rrm, "train the residual retrieval module")
    p.add_argument("--partition")
    p = add("build-index", cmd_build_index, "index the placeable training images")
    for opt in ("--partition", "--classifier", "--rrm"):
        p.add_argument(opt)
    p = add("predict", cmd_predict, "search-within-cell predictions for the test split")
    for opt in ("--partition", "--classifier", "--rrm", "--index"):
        p.add_argument(opt)
    p = add("evaluate", cmd_evaluate, "accuracy at the distance ranges")
    p.add_argument("--predictions", help="prediction file (default: latest)")
    p.add_argument("--baseline", help="second prediction file to compare against")
    p.add_argument("--name", default="SwC", help="row label")
    p = add("ablate", cmd_ablate, "K sweep, loss, residual and aggregation comparisons")
    p.add_argument("--grid", choices=ABLATION_GRIDS + ("all",), default="all")
    p = sub.add_parser("dump", help="print the header of any artifact or data file")
    p.add_argument("file")
    p.set_defaults(func=cmd_dump)
    p = add("run", cmd_run, "synth (if needed) through evaluate in one go")
    p.add_argument("--resynth", action="store_true", help="regenerate data even if present")
    for opt in ("--partition", "--classifier", "--rrm", "--index", "--predictions", "--baseline"):
        p.set_defaults(**{opt.lstrip("-"): None})
    p.set_defaults(name="SwC")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = None if args.func is cmd_dump else load_config(args.config, args.set, args.artifacts)
        return args.func(cfg, args)
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    except MissingPrerequisite as exc:
        code, msg = EXIT_MISSING, f"missing prerequisite: {exc}"
    except HashMismatch as exc:
        code, msg = EXIT_HASH, f"hash mismatch: {exc}"
    except (FormatError, JoinError, RangeError, QueryMismatch) as exc:
        code, msg = EXIT_FORMAT, f"bad input: {exc}"
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic line
        code, msg = EXIT_ERROR, f"error: {type(exc).__name__}: {exc}"
    print(f"geoswc: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
