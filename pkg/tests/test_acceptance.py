"""Acceptance suite: one group of tests per criterion, tagged with ``criterion``.

The terminal summary prints a PASS/FAIL line per criterion plus the measured
numbers behind the desk-scale comparisons.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from geoswc.binio import FormatError
from geoswc.classify import (
    FlatHead,
    HCHead,
    MvMFHead,
    ce_loss,
    hc_loss,
    hc_predict,
    head_checkpoint,
    head_from_checkpoint,
    mvmf_nll,
    vmf_log_density,
)
from geoswc.cli import EXIT_FORMAT, EXIT_OK, main
from geoswc.dataio import features_bytes, parse_features
from geoswc.geo import EARTH_RADIUS_KM, GeoPoint, gcd_km, gcd_km_arrays, pairwise_gcd_km, unit_vectors
from geoswc.index import BackgroundIndex, build_background
from geoswc.numerics import checkpoint_bytes, grad_check, parse_checkpoint
from geoswc.partition import Partition, ancestor_in, build_partition, nested_snapshots
from geoswc.pipeline import K_SWEEP, SEEDS, ExperimentConfig, median_at, monotonicity_report, run_seed
from geoswc.retrieve import RRMParams, infonce_batch, infonce_loss, rrm_backward, rrm_forward, triplet_batch
from geoswc.swc import dbscan_geo
from oracles import greedy_quadtree, haversine_km, label_sets, latlon, sphere_uniform, union_find_components

criterion = pytest.mark.criterion
TOY = str(Path(__file__).resolve().parents[1] / "configs" / "toy.ini")
GRAD_TOL = 1e-4
GRAD_SEEDS = range(20)


def unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# ------------------------------------------------------------------ 1


@criterion("1", "geodesy matches an independent haversine")
def test_geodesy_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    a, b = latlon(sphere_uniform(rng, 10_000)), latlon(sphere_uniform(rng, 10_000))
    ours = gcd_km_arrays(a[0], a[1], b[0], b[1])
    ref = haversine_km(a[0], a[1], b[0], b[1])
    assert np.max(np.abs(ours - ref) / ref) <= 1e-9
    scalar = [gcd_km(GeoPoint(a[0][i], a[1][i]), GeoPoint(b[0][i], b[1][i])) for i in range(0, 10_000, 97)]
    np.testing.assert_allclose(scalar, ref[::97], rtol=1e-9)
    for lat, lon in zip(a[0][:200], a[1][:200]):
        p = GeoPoint(lat, lon)
        assert gcd_km(p, p) == 0.0
        anti = GeoPoint(-lat, lon + 180.0 if lon < 0 else lon - 180.0)
        assert abs(gcd_km(p, anti) - math.pi * EARTH_RADIUS_KM) <= 1e-6
    assert time.perf_counter() - t0 < 1.0


# ------------------------------------------------------------------ 2


@criterion("2", "vMF density integrates to one")
def test_vmf_normalization():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    x = sphere_uniform(rng, 1_000_000)
    mu = unit(np.array([0.2, -0.4, 0.9]))
    for kappa in (0.1, 1.0, 10.0, 50.0):
        integral = 4 * math.pi * float(np.mean(np.exp(vmf_log_density(x, mu, kappa))))
        assert 0.98 <= integral <= 1.02, (kappa, integral)
    dens = np.exp(vmf_log_density(x[:1000], mu, 1e-6))
    assert np.max(np.abs(dens * 4 * math.pi - 1.0)) <= 1e-6
    assert time.perf_counter() - t0 < 10.0


# ------------------------------------------------------------------ 3


def corrupted(f):
    """Same loss, but one gradient entry is off by a clearly visible amount."""

    def g(params):
        loss, grads = f(params)
        grads = {k: np.array(v, dtype=np.float64, copy=True) for k, v in grads.items()}
        name = sorted(grads)[0]
        grads[name].flat[0] += 1e-3 + 0.01 * abs(grads[name].flat[0])
        return loss, grads

    return g


def ce_case(seed):
    rng = np.random.default_rng(seed)
    head = FlatHead.init(6, 5, rng)
    head.b[:] = rng.normal(size=6)
    Z, t = rng.standard_normal((8, 5)), rng.integers(0, 6, 8)
    return (lambda p: ce_loss(FlatHead(p["W"], p["b"]), Z, t)), head.params()


_HC_PARTS = None


def hc_case(seed):
    global _HC_PARTS
    if _HC_PARTS is None:
        lat, lon = latlon(sphere_uniform(np.random.default_rng(99), 2000))
        _HC_PARTS = nested_snapshots((np.arange(1, 2001, dtype=np.uint64), lat, lon), (8, 14, 20), 5)
    rng = np.random.default_rng(seed)
    head = HCHead.init(_HC_PARTS, 4, rng)
    Z, t = rng.standard_normal((6, 4)), rng.integers(0, len(_HC_PARTS[2]), 6)

    def f(p):
        h = HCHead(FlatHead(p["coarse.W"], p["coarse.b"]), FlatHead(p["mid.W"], p["mid.b"]),
                   FlatHead(p["fine.W"], p["fine.b"]), head.anc_mid, head.anc_coarse)
        return hc_loss(h, Z, t)

    return f, head.params()


def mvmf_case(seed):
    rng = np.random.default_rng(seed)
    n, d = 5, 4
    head = MvMFHead(rng.standard_normal((n, d)), rng.standard_normal(n), sphere_uniform(rng, n),
                    rng.uniform(0.0, 3.0, n))
    Z, X = rng.standard_normal((7, d)), sphere_uniform(rng, 7)
    return (lambda p: mvmf_nll(MvMFHead(p["W"], p["b"], p["mu"], p["rho"]), Z, X)), head.params()


def rrm_case(kind):
    def build(seed):
        rng = np.random.default_rng(seed)
        residual = seed % 2 == 0
        placement = "input" if seed % 4 < 2 else "normalized"
        prm = RRMParams.init(6, 8, rng, residual, placement)
        prm.ln1_gain += rng.normal(0, 0.1, 6)
        prm.ln2_bias += rng.normal(0, 0.1, 6)
        prm.b1 += rng.normal(0, 0.1, 8)
        Zq, Zp = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
        bank = unit(rng.standard_normal((7, 6)))
        bank_cells = rng.integers(0, 5, 7)
        q_cells = rng.integers(0, 5, 4)
        B = len(Zq)

        def f(par):
            p = RRMParams(**par, residual=residual, ln_placement=placement)
            E, cache = rrm_forward(p, np.vstack([Zq, Zp]))
            if kind == "infonce":
                loss, dQ, dP, _ = infonce_batch(E[:B], E[B:], q_cells, bank, bank_cells, 0.5)
            else:
                loss, dQ, dP, _ = triplet_batch(E[:B], E[B:], q_cells, bank, bank_cells, 0.5)
            return loss, rrm_backward(p, cache, np.vstack([dQ, dP]))

        return f, prm.arrays()

    return build


LOSSES = {
    "ce": ce_case,
    "hc": hc_case,
    "mvmf": mvmf_case,
    "infonce_rrm": rrm_case("infonce"),
    "triplet_rrm": rrm_case("triplet"),
}
_GRAD_TIME = {"total": 0.0}


@criterion("3", "gradients certified by central differences")
@pytest.mark.parametrize("loss", list(LOSSES))
def test_gradient_certification(loss):
    t0 = time.perf_counter()
    for seed in GRAD_SEEDS:
        f, params = LOSSES[loss](seed)
        report = grad_check(f, params, tolerance=GRAD_TOL)
        assert report.passed, (loss, seed, report)
        bad = grad_check(corrupted(f), params, tolerance=GRAD_TOL)
        assert not bad.passed, (loss, seed, "corrupted gradient was accepted")
    _GRAD_TIME["total"] += time.perf_counter() - t0
    assert _GRAD_TIME["total"] < 30.0


# ------------------------------------------------------------------ 4


@criterion("4", "DBSCAN equals connected components of the eps-graph")
def test_dbscan_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(44)
    for trial in range(100):
        n = int(rng.integers(1, 201))
        centers = rng.uniform([-60, -170], [60, 170], (int(rng.integers(1, 6)), 2))
        pick = rng.integers(0, len(centers), n)
        pts = centers[pick] + rng.normal(0, 0.03, (n, 2))
        eps = float(rng.uniform(0.3, 3.0))
        labels = dbscan_geo(pts, eps, min_samples=1)
        d = pairwise_gcd_km(unit_vectors(pts[:, 0], pts[:, 1]))
        assert label_sets(labels) == union_find_components(d, eps), trial
        if trial < 20:
            perm = rng.permutation(n)
            permuted = label_sets(dbscan_geo(pts[perm], eps, min_samples=1))
            assert {frozenset(int(perm[i]) for i in s) for s in permuted} == label_sets(labels)
    assert time.perf_counter() - t0 < 10.0


# ------------------------------------------------------------------ 5


@criterion("5", "partition invariants on 10^4 points")
def test_partition_invariants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    lat, lon = latlon(sphere_uniform(rng, 10_000))
    ids = np.arange(1, 10_001, dtype=np.uint64)
    counts = (32, 128, 512)
    coarse, mid, fine = nested_snapshots((ids, lat, lon), counts, 10)
    for p, target in zip((coarse, mid, fine), counts):
        idx = p.assign_indices(lat, lon)
        assert (idx >= 0).all()
        assert sum(c.count for c in p.leaves) == 10_000
        assert np.array_equal(np.bincount(idx, minlength=len(p)), p.counts())
        threshold_stop = all(c.count <= p.min_split_size for c in p.leaves if c.id.depth < 28)
        assert len(p) == target or (len(p) < target and threshold_stop), (target, len(p))
    victims, leaves = greedy_quadtree(lat, lon, counts[2], 10)
    assert [(r.victim.face, r.victim.path, r.count) for r in fine.split_log] == [(k[0], k[1], c) for k, c in victims]
    assert sorted((c.id.face, c.id.path) for c in fine.leaves) == sorted(leaves)
    for parent in (coarse, mid):
        sums = {c.id: 0 for c in parent.leaves}
        for leaf in fine.leaves:
            anc = ancestor_in(parent, leaf.id)
            sums[anc] += leaf.count
        assert all(sums[c.id] == c.count for c in parent.leaves)
    stop = build_partition((ids, lat, lon), 5000, 50)
    assert len(stop) < 5000 and all(c.count <= 50 for c in stop.leaves)
    assert time.perf_counter() - t0 < 5.0


# ------------------------------------------------------------------ 6


@criterion("6", "closed-form loss values")
def test_closed_forms():
    rng = np.random.default_rng(6)
    for n in (2, 10, 64, 513):
        loss, _ = ce_loss(FlatHead(np.zeros((n, 5)), np.zeros(n)), rng.standard_normal((3, 5)), [0, n - 1, 1])
        assert abs(loss - math.log(n)) <= 1e-9
    for n in (3, 8, 65):
        q = unit(rng.standard_normal(4))
        # positive and n-2 negatives share one similarity with the query
        cands = np.stack([q] * (n - 1))
        loss, _, _ = infonce_loss(q, cands[0], cands[1:], 0.05)
        assert abs(loss - math.log(n - 1)) <= 1e-9
    flat = FlatHead(rng.standard_normal((9, 6)), rng.standard_normal(9))
    copy = lambda: FlatHead(flat.W.copy(), flat.b.copy())  # noqa: E731
    hc = HCHead(copy(), copy(), copy(), np.arange(9), np.arange(9))
    Z = rng.standard_normal((1000, 6))
    t = rng.integers(0, 9, 1000)
    assert abs(hc_loss(hc, Z, t)[0] - ce_loss(flat, Z, t)[0]) <= 1e-9
    np.testing.assert_array_equal(hc_predict(hc, Z), np.argmax(flat.logits(Z), axis=1))


# ------------------------------------------------------------------ 7


@pytest.fixture(scope="module")
def desk_runs():
    t0 = time.perf_counter()
    results = [run_seed(ExperimentConfig(), seed) for seed in SEEDS]
    return results, time.perf_counter() - t0


METHODS = ("mvmf_center", "swc_raw", "swc_infonce", "swc_no_residual", "swc_triplet", "outlier_average",
           "outlier_spatial")


@criterion("7", "desk-scale run finishes in time")
def test_desk_runtime(desk_runs, acceptance_note):
    results, seconds = desk_runs
    acceptance_note(f"desk-scale run: {len(results)} seeds in {seconds:.1f} s")
    acceptance_note("Acc@1km (%) per seed: " + ", ".join(METHODS))
    for r in results:
        cells = " ".join(f"{100 * r.accuracy[m][1.0]:5.1f}" for m in METHODS)
        acceptance_note(f"  seed {r.seed}: flat train {100 * r.train_cell_accuracy:.2f}  {cells}")
    acceptance_note("  median: " + " ".join(f"{m}={100 * median_at(results, m, 1.0):.1f}" for m in METHODS))
    assert seconds < 600


@criterion("7a", "flat head separates the training cells")
def test_flat_train_accuracy(desk_runs):
    results, _ = desk_runs
    assert all(r.train_cell_accuracy >= 0.90 for r in results), [r.train_cell_accuracy for r in results]


@criterion("7b", "infoNCE retrieval beats raw features")
def test_infonce_over_raw(desk_runs):
    results, _ = desk_runs
    assert median_at(results, "swc_infonce", 1.0) >= median_at(results, "swc_raw", 1.0)


@criterion("7c", "residual connection helps")
def test_residual(desk_runs):
    results, _ = desk_runs
    assert median_at(results, "swc_infonce", 1.0) >= median_at(results, "swc_no_residual", 1.0)


@criterion("7d", "search within cell beats the cell estimate")
def test_swc_over_center(desk_runs):
    results, _ = desk_runs
    assert median_at(results, "swc_infonce", 1.0) >= median_at(results, "mvmf_center", 1.0)


@criterion("7e", "spatial clustering resists planted outliers")
def test_spatial_over_average(desk_runs):
    results, _ = desk_runs
    assert median_at(results, "outlier_spatial", 1.0) >= median_at(results, "outlier_average", 1.0)


@criterion("7f", "K sweep runs and reports monotonicity")
def test_k_sweep(desk_runs, acceptance_note):
    results, _ = desk_runs
    for r in results:
        assert tuple(r.k_sweep) == K_SWEEP
        report = monotonicity_report(r.k_sweep, 1.0)
        assert report["k"] == list(K_SWEEP) and report["best_k"] in K_SWEEP
        assert isinstance(report["non_decreasing"], bool) and isinstance(report["non_increasing"], bool)
        values = " ".join(f"{100 * v:.1f}" for v in report["accuracy"])
        acceptance_note(f"K sweep seed {r.seed} (Acc@1km, K={list(K_SWEEP)}): {values}; best K={report['best_k']}, "
                        f"non-decreasing={report['non_decreasing']}, non-increasing={report['non_increasing']}")


# ------------------------------------------------------------------ 8


@criterion("8", "identical config and seed give byte-identical predictions")
def test_determinism(tmp_path):
    outputs = []
    for name in ("a", "b"):
        root = tmp_path / name
        assert main(["run", "-c", TOY, "--artifacts", str(root)]) == EXIT_OK
        refs = json.loads((root / "refs.json").read_text())
        outputs.append((root / refs["predictions"]).read_bytes())
    assert outputs[0] == outputs[1] and len(outputs[0]) > 0


# ------------------------------------------------------------------ 9


def _artifacts():
    rng = np.random.default_rng(9)
    lat, lon = latlon(sphere_uniform(rng, 600))
    ids = np.arange(1, 601, dtype=np.uint64)
    part = build_partition((ids, lat, lon), 20, 10)
    feats = rng.standard_normal((600, 5)).astype(np.float32)
    head = FlatHead.init(len(part), 5, rng, part.hash)
    params, meta = head_checkpoint(head)
    cells = part.assign_indices(lat, lon)
    emb = unit(rng.standard_normal((600, 5)))
    index = build_background(ids, lat, lon, emb, cells, head.predict(feats.astype(np.float64)), part)
    return {
        "partition": part.to_bytes(),
        "checkpoint": checkpoint_bytes(params, meta),
        "index": index.to_bytes(),
        "features": features_bytes(ids, feats),
    }, (part, head, index, ids, feats)


@criterion("9", "file formats round-trip and reject corrupted headers")
def test_format_round_trips(tmp_path):
    blobs, (part, head, index, ids, feats) = _artifacts()
    assert Partition.from_bytes(blobs["partition"]) == part
    assert Partition.from_bytes(blobs["partition"]).to_bytes() == blobs["partition"]
    params, meta = parse_checkpoint(blobs["checkpoint"])
    again = head_from_checkpoint(params, meta)
    assert again.W.tobytes() == head.W.tobytes() and again.b.tobytes() == head.b.tobytes()
    assert checkpoint_bytes(*head_checkpoint(again)) == blobs["checkpoint"]
    assert BackgroundIndex.from_bytes(blobs["index"]).to_bytes() == blobs["index"]
    got_ids, got = parse_features(blobs["features"])
    assert got_ids.tobytes() == ids.tobytes() and got.tobytes() == feats.tobytes()

    parsers = {
        "partition": Partition.from_bytes,
        "checkpoint": parse_checkpoint,
        "index": BackgroundIndex.from_bytes,
        "features": parse_features,
    }
    for kind, data in blobs.items():
        bad_magic = b"XXXX" + data[4:]
        bad_version = data[:4] + b"\xff\x7f" + data[6:]
        truncated = data[: len(data) // 2]
        for name, blob in (("magic", bad_magic), ("version", bad_version), ("truncated", truncated)):
            with pytest.raises(FormatError):
                parsers[kind](blob)
            path = tmp_path / f"{kind}-{name}.bin"
            path.write_bytes(blob)
            assert main(["dump", str(path)]) == EXIT_FORMAT, (kind, name)
        good = tmp_path / f"{kind}.bin"
        good.write_bytes(data)
        assert main(["dump", str(good)]) == EXIT_OK
