"""Background collection of placeable images and exact cosine top-K search.

Embeddings are stored as float32 (both in memory and on disk, so a freshly
built index and a reloaded one rank identically) and widened to float64 for
every similarity computation.  Ties in similarity are broken by ascending
image id.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from geoswc.binio import FormatError, Reader, Writer, sha256_bytes
from geoswc.geo import GeoPoint
from geoswc.partition import CellId, Partition, UnknownCell

MAGIC = b"GPIX"
FORMAT_VERSION = 1
_NO_HASH = "0" * 64


@dataclass(frozen=True)
class BackgroundEntry:
    image_id: int
    embedding: np.ndarray
    location: GeoPoint
    cell: CellId


@dataclass(frozen=True)
class Hit:
    entry: BackgroundEntry
    similarity: float


class BackgroundIndex:
    def __init__(
        self,
        ids: np.ndarray,
        lat: np.ndarray,
        lon: np.ndarray,
        embeddings: np.ndarray,
        cells: list[CellId],
        partition_hash: str,
        classifier_hash: str = _NO_HASH,
        rrm_hash: str = _NO_HASH,
        valid_cells: set[CellId] | None = None,
    ):
        self.ids = np.asarray(ids, dtype=np.uint64)
        self.lat = np.asarray(lat, dtype=np.float64)
        self.lon = np.asarray(lon, dtype=np.float64)
        self.embeddings = np.asarray(embeddings, dtype=np.float32)
        self.cells = list(cells)
        self.partition_hash = partition_hash
        self.classifier_hash = classifier_hash
        self.rrm_hash = rrm_hash
        n = len(self.ids)
        if not (len(self.lat) == len(self.lon) == len(self.embeddings) == len(self.cells) == n):
            raise ValueError("index columns have different lengths")
        postings: dict[CellId, list[int]] = {}
        for i, c in enumerate(self.cells):
            postings.setdefault(c, []).append(i)
        self.postings = {c: np.array(v, dtype=np.int64) for c, v in sorted(postings.items())}
        # cells of the build-time partition, including those that ended up empty
        self.valid_cells = set(valid_cells) if valid_cells is not None else set(self.postings)
        self._vectors = self.embeddings.astype(np.float64)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1] if self.embeddings.ndim == 2 else 0

    def entry(self, i: int) -> BackgroundEntry:
        return BackgroundEntry(
            int(self.ids[i]), self.embeddings[i], GeoPoint(self.lat[i], self.lon[i]), self.cells[i]
        )

    def candidates(self, cell_filter: CellId | None) -> np.ndarray:
        if cell_filter is None:
            return np.arange(len(self.ids))
        if cell_filter not in self.valid_cells:
            raise UnknownCell(str(cell_filter))
        return self.postings.get(cell_filter, np.zeros(0, dtype=np.int64))

    def to_bytes(self) -> bytes:
        w = Writer()
        w.raw(MAGIC)
        w.pack("H", FORMAT_VERSION)
        w.pack("IQ", self.dim, len(self.ids))
        for h in (self.partition_hash, self.classifier_hash, self.rrm_hash):
            w.raw(bytes.fromhex(h))
        for i in range(len(self.ids)):
            c = self.cells[i]
            w.pack("Qdd", int(self.ids[i]), self.lat[i], self.lon[i])
            w.pack("BB", c.face, c.depth)
            w.raw(bytes(c.path))
            w.array(self.embeddings[i], "f4")
        valid = sorted(self.valid_cells)
        w.pack("I", len(valid))
        for c in valid:
            offsets = self.postings.get(c, np.zeros(0, dtype=np.int64))
            w.pack("BB", c.face, c.depth)
            w.raw(bytes(c.path))
            w.pack("I", len(offsets))
            w.array(offsets, "u4")
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "BackgroundIndex":
        r = Reader(data, "index")
        r.expect_magic(MAGIC, (FORMAT_VERSION,))
        dim, n = r.unpack("IQ")
        hashes = [r.take(32).hex() for _ in range(3)]
        ids = np.zeros(n, dtype=np.uint64)
        lat = np.zeros(n)
        lon = np.zeros(n)
        emb = np.zeros((n, dim), dtype=np.float32)
        cells = []
        for i in range(n):
            ids[i], lat[i], lon[i] = r.unpack("Qdd")
            cells.append(_read_cell(r))
            emb[i] = r.array("f4", dim)
        valid = set()
        for _ in range(r.unpack("I")):
            c = _read_cell(r)
            offsets = r.array("u4", r.unpack("I")).astype(np.int64)
            if np.any(offsets >= n) or any(cells[o] != c for o in offsets):
                raise FormatError("index: posting list disagrees with entry cells")
            valid.add(c)
        r.expect_end()
        index = cls(ids, lat, lon, emb, cells, *hashes, valid_cells=valid)
        if not set(index.postings) <= valid:
            raise FormatError("index: entries reference cells missing from the posting lists")
        return index

    def save(self, path: str | Path) -> str:
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return sha256_bytes(data)

    @classmethod
    def load(cls, path: str | Path) -> "BackgroundIndex":
        return cls.from_bytes(Path(path).read_bytes())


def _read_cell(r: Reader) -> CellId:
    face, depth = r.unpack("BB")
    try:
        return CellId(face, tuple(r.take(depth)))
    except ValueError as exc:
        raise FormatError(f"index: bad cell id ({exc})") from exc


def build_background(
    ids: np.ndarray,
    lat: np.ndarray,
    lon: np.ndarray,
    embeddings: np.ndarray,
    true_cells: np.ndarray,
    predicted_cells: np.ndarray,
    partition: Partition,
    classifier_hash: str = _NO_HASH,
    rrm_hash: str = _NO_HASH,
) -> BackgroundIndex:
    """Index the training images whose predicted cell equals their true cell.

    ``true_cells`` / ``predicted_cells`` are class indices into ``partition``;
    ``embeddings`` are the retrieval embeddings of all training images.
    """
    true_cells = np.asarray(true_cells)
    keep = np.flatnonzero(true_cells == np.asarray(predicted_cells))
    leaves = partition.ids
    return BackgroundIndex(
        np.asarray(ids)[keep],
        np.asarray(lat)[keep],
        np.asarray(lon)[keep],
        np.asarray(embeddings)[keep],
        [leaves[int(c)] for c in true_cells[keep]],
        partition.hash,
        classifier_hash,
        rrm_hash,
        valid_cells=set(leaves),
    )


def _rank(sims: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the top-k similarities, descending, ties by ascending id."""
    n = len(sims)
    if n > k:
        kth = np.partition(sims, n - k)[n - k]
        cand = np.flatnonzero(sims >= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((ids[cand], -sims[cand]))
    return cand[order[:k]]


def top_k_offsets(index: BackgroundIndex, q: np.ndarray, k: int, cell_filter: CellId | None = None):
    """(entry offsets, similarities) of the exact top-k by dot product."""
    if k < 1:
        raise ValueError("K must be >= 1")
    cand = index.candidates(cell_filter)
    if cand.size == 0:
        return cand, np.zeros(0)
    sims = index._vectors[cand] @ np.asarray(q, dtype=np.float64)
    pos = _rank(sims, index.ids[cand], k)
    return cand[pos], sims[pos]


def top_k(index: BackgroundIndex, q: np.ndarray, k: int, cell_filter: CellId | None = None) -> list[Hit]:
    offsets, sims = top_k_offsets(index, q, k, cell_filter)
    return [Hit(index.entry(int(o)), float(s)) for o, s in zip(offsets, sims)]


def top_k_batch(index: BackgroundIndex, Q: np.ndarray, k: int, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Unfiltered top-k for many queries: (n, k) offsets and similarities.

    Uses a matrix product, so similarities may differ from :func:`top_k_offsets`
    in the last bit; rankings agree except for such sub-ulp near-ties.
    """
    Q = np.asarray(Q, dtype=np.float64)
    k = min(k, len(index))
    offsets = np.zeros((len(Q), k), dtype=np.int64)
    sims = np.zeros((len(Q), k))
    for start in range(0, len(Q), chunk):
        S = Q[start : start + chunk] @ index._vectors.T
        for row, s in enumerate(S):
            pos = _rank(s, index.ids, k)
            offsets[start + row] = pos
            sims[start + row] = s[pos]
    return offsets, sims
