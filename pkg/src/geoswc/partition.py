"""Adaptive hierarchical partitioning of the sphere.

The sphere is cut into 8 base rectangles (two latitude bands by four longitude
quadrants, 90 x 90 degrees each).  A leaf splits into 4 children by bisecting its
latitude and longitude ranges.  Ranges are half-open ``[lo, hi)``; the +90
latitude edge is closed on the topmost cells.  Child digits are
``2 * (upper lat half) + (upper lon half)``.

Construction is greedy: repeatedly split the leaf holding the most images until
the target leaf count is reached or nothing is left to split.  Children that
receive no image are pruned, so every leaf is a non-empty class.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from geoswc.binio import FormatError, Reader, Writer, sha256_bytes
from geoswc.geo import DegenerateMean, GeoPoint, latlon_from_vectors, mean_direction, unit_vectors

MAGIC = b"GPRT"
FORMAT_VERSION = 1
N_FACES = 8
# 90 / 2**28 degrees is a few centimetres; also keeps integer cell codes in int64
MAX_DEPTH = 28
DEFAULT_MIN_SPLIT_SIZE = 50
_NO_LIMIT = 2**64 - 1


class InvalidConfig(ValueError):
    pass


class NotNested(LookupError):
    """No leaf of the coarser partition contains the given cell."""


class UnknownCell(KeyError):
    pass


@dataclass(frozen=True, order=True)
class CellId:
    face: int
    path: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not 0 <= self.face < N_FACES:
            raise ValueError(f"face {self.face} outside 0..7")
        if any(d not in (0, 1, 2, 3) for d in self.path):
            raise ValueError(f"invalid child digits {self.path}")
        object.__setattr__(self, "path", tuple(int(d) for d in self.path))

    @property
    def depth(self) -> int:
        return len(self.path)

    def parent(self) -> "CellId":
        if not self.path:
            raise ValueError("base cells have no parent")
        return CellId(self.face, self.path[:-1])

    def child(self, digit: int) -> "CellId":
        return CellId(self.face, self.path + (digit,))

    def is_ancestor_or_self(self, other: "CellId") -> bool:
        return self.face == other.face and other.path[: self.depth] == self.path

    def code(self) -> int:
        c = self.face
        for d in self.path:
            c = c * 4 + d
        return c

    def bounds(self) -> tuple[float, float, float, float]:
        """(lat_lo, lat_hi, lon_lo, lon_hi) in degrees."""
        lat_lo, lat_hi, lon_lo, lon_hi = face_bounds(self.face)
        for d in self.path:
            lat_mid = (lat_lo + lat_hi) / 2
            lon_mid = (lon_lo + lon_hi) / 2
            if d & 2:
                lat_lo = lat_mid
            else:
                lat_hi = lat_mid
            if d & 1:
                lon_lo = lon_mid
            else:
                lon_hi = lon_mid
        return lat_lo, lat_hi, lon_lo, lon_hi

    def __str__(self) -> str:
        return f"{self.face}:" + "".join(str(d) for d in self.path)

    @classmethod
    def parse(cls, text: str) -> "CellId":
        face, _, path = text.partition(":")
        return cls(int(face), tuple(int(c) for c in path))


def face_bounds(face: int) -> tuple[float, float, float, float]:
    band, quadrant = divmod(face, 4)
    lat_lo = -90.0 + 90.0 * band
    lon_lo = -180.0 + 90.0 * quadrant
    return lat_lo, lat_lo + 90.0, lon_lo, lon_lo + 90.0


def faces_of(lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
    # comparisons rather than floor division: (lon + 180) / 90 rounds -1e-300 into the wrong quadrant
    quadrant = (lon >= -90.0).astype(np.int64) + (lon >= 0.0) + (lon >= 90.0)
    return 4 * (lat >= 0.0).astype(np.int64) + quadrant


@dataclass(frozen=True, eq=False)
class Cell:
    id: CellId
    lat_range: tuple[float, float]
    lon_range: tuple[float, float]
    image_ids: tuple[int, ...]
    center: GeoPoint

    @property
    def count(self) -> int:
        return len(self.image_ids)

    def contains(self, p: GeoPoint) -> bool:
        lat_lo, lat_hi = self.lat_range
        lon_lo, lon_hi = self.lon_range
        lat_ok = lat_lo <= p.lat < lat_hi or (lat_hi == 90.0 and p.lat == 90.0)
        return lat_ok and lon_lo <= p.lon < lon_hi

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Cell):
            return NotImplemented
        return (
            self.id == other.id
            and self.lat_range == other.lat_range
            and self.lon_range == other.lon_range
            and self.image_ids == other.image_ids
            and self.center == other.center
        )


@dataclass(frozen=True)
class SplitRecord:
    victim: CellId
    count: int
    children: tuple[tuple[CellId, int], ...]


@dataclass(eq=False)
class Partition:
    """Leaves sorted by CellId; a leaf's position is its class index."""

    leaves: list[Cell]
    target_leaf_count: int
    min_split_size: int | None = DEFAULT_MIN_SPLIT_SIZE
    tag: str = ""
    split_log: list[SplitRecord] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        self.leaves = sorted(self.leaves, key=lambda c: c.id)
        self._index = {c.id: i for i, c in enumerate(self.leaves)}
        if len(self._index) != len(self.leaves):
            raise InvalidConfig("duplicate cell ids")
        leaf_codes: dict[int, list[tuple[int, int]]] = {}
        internal: dict[int, set[int]] = {}
        for i, c in enumerate(self.leaves):
            leaf_codes.setdefault(c.id.depth, []).append((c.id.code(), i))
            code = c.id.face
            for d in range(c.id.depth):
                internal.setdefault(d, set()).add(code)
                code = code * 4 + c.id.path[d]
        self._leaf_codes = {
            d: (np.array([k for k, _ in v], dtype=np.int64), np.array([i for _, i in v], dtype=np.int64))
            for d, v in leaf_codes.items()
        }
        for d, (codes, idx) in self._leaf_codes.items():
            order = np.argsort(codes)
            self._leaf_codes[d] = (codes[order], idx[order])
        self._internal = {d: np.array(sorted(v), dtype=np.int64) for d, v in internal.items()}
        self._max_depth = max((c.id.depth for c in self.leaves), default=0)
        self._hash: str | None = None

    def __len__(self) -> int:
        return len(self.leaves)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Partition):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    @property
    def ids(self) -> list[CellId]:
        return [c.id for c in self.leaves]

    def index_of(self, cell_id: CellId) -> int:
        try:
            return self._index[cell_id]
        except KeyError:
            raise UnknownCell(str(cell_id)) from None

    def __contains__(self, cell_id: CellId) -> bool:
        return cell_id in self._index

    def counts(self) -> np.ndarray:
        return np.array([c.count for c in self.leaves], dtype=np.int64)

    def center_vectors(self) -> np.ndarray:
        return unit_vectors(
            np.array([c.center.lat for c in self.leaves]), np.array([c.center.lon for c in self.leaves])
        )

    def assign_indices(self, lat, lon) -> np.ndarray:
        """Leaf index per point, -1 where the point falls in a pruned region."""
        lat = np.atleast_1d(np.asarray(lat, dtype=np.float64))
        lon = np.atleast_1d(np.asarray(lon, dtype=np.float64))
        lon = np.where(lon == 180.0, -180.0, lon)
        out = np.full(lat.shape[0], -1, dtype=np.int64)
        active = np.arange(lat.shape[0])
        code = faces_of(lat, lon)
        lat_lo = np.where(lat >= 0.0, 0.0, -90.0)
        lon_lo = -180.0 + 90.0 * (code % 4)
        lat_hi = lat_lo + 90.0
        lon_hi = lon_lo + 90.0
        for depth in range(self._max_depth + 1):
            if depth in self._leaf_codes:
                codes, idx = self._leaf_codes[depth]
                pos = np.minimum(np.searchsorted(codes, code), len(codes) - 1)
                hit = codes[pos] == code
                out[active[hit]] = idx[pos[hit]]
            if depth not in self._internal:
                break
            keep = np.isin(code, self._internal[depth])
            active, code = active[keep], code[keep]
            lat_lo, lat_hi, lon_lo, lon_hi = lat_lo[keep], lat_hi[keep], lon_lo[keep], lon_hi[keep]
            if active.size == 0:
                break
            lat_mid = (lat_lo + lat_hi) / 2
            lon_mid = (lon_lo + lon_hi) / 2
            upper = lat[active] >= lat_mid
            east = lon[active] >= lon_mid
            lat_lo = np.where(upper, lat_mid, lat_lo)
            lat_hi = np.where(upper, lat_hi, lat_mid)
            lon_lo = np.where(east, lon_mid, lon_lo)
            lon_hi = np.where(east, lon_hi, lon_mid)
            code = code * 4 + 2 * upper + east
        return out

    @property
    def hash(self) -> str:
        if self._hash is None:
            self._hash = sha256_bytes(self.to_bytes())
        return self._hash

    def to_bytes(self) -> bytes:
        w = Writer()
        w.raw(MAGIC)
        w.pack("H", FORMAT_VERSION)
        depths = [c.id.depth for c in self.leaves] or [0]
        w.pack(
            "IQIBB",
            self.target_leaf_count,
            _NO_LIMIT if self.min_split_size is None else self.min_split_size,
            len(self.leaves),
            min(depths),
            max(depths),
        )
        w.string(self.tag)
        for c in self.leaves:
            w.pack("BB", c.id.face, c.id.depth)
            w.raw(bytes(c.id.path))
            w.pack("6d", *c.lat_range, *c.lon_range, c.center.lat, c.center.lon)
            w.pack("Q", c.count)
            w.array(np.array(c.image_ids, dtype=np.uint64), "u8")
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Partition":
        r = Reader(data, "partition")
        r.expect_magic(MAGIC, (FORMAT_VERSION,))
        target, min_split, n_leaves, min_depth, max_depth = r.unpack("IQIBB")
        tag = r.string()
        leaves = []
        for _ in range(n_leaves):
            face, depth = r.unpack("BB")
            try:
                cid = CellId(face, tuple(r.take(depth)))
            except ValueError as exc:
                raise FormatError(f"partition: bad cell id ({exc})") from exc
            lat_lo, lat_hi, lon_lo, lon_hi, clat, clon = r.unpack("6d")
            count = r.unpack("Q")
            ids = r.array("u8", count)
            leaves.append(
                Cell(cid, (lat_lo, lat_hi), (lon_lo, lon_hi), tuple(int(i) for i in ids), GeoPoint(clat, clon))
            )
        r.expect_end()
        depths = [c.id.depth for c in leaves] or [0]
        if (min(depths), max(depths)) != (min_depth, max_depth):
            raise FormatError("partition: depth statistics disagree with leaf records")
        return cls(leaves, target, None if min_split == _NO_LIMIT else min_split, tag)

    def save(self, path: str | Path) -> str:
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return sha256_bytes(data)

    @classmethod
    def load(cls, path: str | Path) -> "Partition":
        return cls.from_bytes(Path(path).read_bytes())


def _coerce_images(images) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if hasattr(images, "ids") and hasattr(images, "lat"):
        return np.asarray(images.ids, dtype=np.uint64), np.asarray(images.lat), np.asarray(images.lon)
    if isinstance(images, tuple) and len(images) == 3 and isinstance(images[0], np.ndarray):
        ids, lat, lon = images
        return np.asarray(ids, dtype=np.uint64), np.asarray(lat, np.float64), np.asarray(lon, np.float64)
    pairs = list(images)
    ids = np.array([int(i) for i, _ in pairs], dtype=np.uint64)
    lat = np.array([p.lat for _, p in pairs], dtype=np.float64)
    lon = np.array([p.lon for _, p in pairs], dtype=np.float64)
    return ids, lat, lon


def _make_cell(cid: CellId, members: np.ndarray, ids, u) -> Cell:
    lat_lo, lat_hi, lon_lo, lon_hi = cid.bounds()
    try:
        lat_c, lon_c = latlon_from_vectors(mean_direction(u[members]))
        center = GeoPoint(float(lat_c), float(lon_c))
    except DegenerateMean:
        center = GeoPoint((lat_lo + lat_hi) / 2, (lon_lo + lon_hi) / 2)
    return Cell(cid, (lat_lo, lat_hi), (lon_lo, lon_hi), tuple(int(i) for i in ids[members]), center)


def _grow(images, targets: Sequence[int], min_split_size: int | None) -> tuple[list[tuple[dict, int]], list[SplitRecord], tuple]:
    ids, lat, lon = _coerce_images(images)
    if ids.size == 0:
        raise InvalidConfig("cannot partition an empty image set")
    if len(np.unique(ids)) != ids.size:
        raise InvalidConfig("image ids must be unique")
    if min_split_size is not None:
        if math.isinf(min_split_size):
            min_split_size = None
        elif min_split_size < 1:
            raise InvalidConfig("min_split_size must be >= 1")
        else:
            min_split_size = int(min_split_size)
    lon = np.where(lon == 180.0, -180.0, lon)

    def splittable(cid: CellId, count: int) -> bool:
        return min_split_size is not None and count > min_split_size and cid.depth < MAX_DEPTH

    leaves: dict[CellId, np.ndarray] = {}
    faces = faces_of(lat, lon)
    for f in range(N_FACES):
        members = np.flatnonzero(faces == f)
        if members.size:
            leaves[CellId(f)] = members
    heap = [(-m.size, cid) for cid, m in leaves.items() if splittable(cid, m.size)]
    heapq.heapify(heap)

    final_target = targets[-1]
    snapshots: list[dict] = []
    log: list[SplitRecord] = []
    while True:
        while len(snapshots) < len(targets) and len(leaves) >= targets[len(snapshots)]:
            snapshots.append((dict(leaves), len(log)))
        if len(leaves) >= final_target or not heap:
            break
        neg_count, victim = heapq.heappop(heap)
        members = leaves.pop(victim)
        lat_lo, lat_hi, lon_lo, lon_hi = victim.bounds()
        upper = lat[members] >= (lat_lo + lat_hi) / 2
        east = lon[members] >= (lon_lo + lon_hi) / 2
        digit = 2 * upper + east
        children = []
        for d in range(4):
            sub = members[digit == d]
            if sub.size:
                cid = victim.child(d)
                leaves[cid] = sub
                children.append((cid, int(sub.size)))
                if splittable(cid, sub.size):
                    heapq.heappush(heap, (-sub.size, cid))
        log.append(SplitRecord(victim, -neg_count, tuple(children)))
    while len(snapshots) < len(targets):
        snapshots.append((dict(leaves), len(log)))
    return snapshots, log, (ids, unit_vectors(lat, lon), min_split_size)


def _to_partition(leaves: dict, target: int, min_split_size, ids, u, tag: str, log) -> Partition:
    cells = [_make_cell(cid, members, ids, u) for cid, members in sorted(leaves.items())]
    return Partition(cells, target, min_split_size, tag, list(log))


def build_partition(images, target_leaves: int, min_split_size: int | None = DEFAULT_MIN_SPLIT_SIZE) -> Partition:
    """Greedy adaptive partition of ``images``.

    ``images`` is a list of ``(id, GeoPoint)`` pairs, an ``(ids, lat, lon)`` tuple of
    arrays, or any object with ``ids``/``lat``/``lon`` attributes.  Pass
    ``min_split_size=None`` to forbid splitting altogether.

    A single split adds up to three leaves, so the final count can exceed
    ``target_leaves`` by at most two.
    """
    if target_leaves < N_FACES:
        raise InvalidConfig(f"target_leaves must be >= {N_FACES}, got {target_leaves}")
    ((leaves, n_splits),), log, (ids, u, mss) = _grow(images, (target_leaves,), min_split_size)
    return _to_partition(leaves, target_leaves, mss, ids, u, "", log[:n_splits])


def nested_snapshots(
    images, counts: tuple[int, int, int] = (32, 128, 512), min_split_size: int | None = DEFAULT_MIN_SPLIT_SIZE
) -> tuple[Partition, Partition, Partition]:
    """Coarse, mid and fine partitions captured from one greedy run.

    Each snapshot is the leaf set at the moment the leaf count first reaches
    the corresponding target, so every fine leaf descends from exactly one
    mid and one coarse leaf.
    """
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or any(b < a for a, b in zip(counts, counts[1:])):
        raise InvalidConfig(f"snapshot counts must be non-decreasing, got {counts}")
    if counts[0] < N_FACES:
        raise InvalidConfig(f"snapshot counts must be >= {N_FACES}")
    snaps, log, (ids, u, mss) = _grow(images, counts, min_split_size)
    tags = ("coarse", "mid", "fine")
    return tuple(
        _to_partition(leaves, n, mss, ids, u, tag, log[:n_splits])
        for (leaves, n_splits), n, tag in zip(snaps, counts, tags)
    )  # type: ignore[return-value]


def assign_cell(p: Partition, x: GeoPoint) -> CellId | None:
    """The leaf containing ``x``, or None if ``x`` lies in a pruned region."""
    i = int(p.assign_indices([x.lat], [x.lon])[0])
    return None if i < 0 else p.leaves[i].id


def ancestor_in(p_coarse: Partition, fine_id: CellId) -> CellId:
    for depth in range(fine_id.depth, -1, -1):
        cid = CellId(fine_id.face, fine_id.path[:depth])
        if cid in p_coarse:
            return cid
    raise NotNested(f"no leaf of the coarser partition contains {fine_id}")


def ancestor_table(p_coarse: Partition, p_fine: Partition) -> np.ndarray:
    """Class index in ``p_coarse`` of every fine leaf's ancestor."""
    return np.array([p_coarse.index_of(ancestor_in(p_coarse, cid)) for cid in p_fine.ids], dtype=np.int64)
