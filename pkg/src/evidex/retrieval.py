"""Exact nearest-neighbor search over embeddings, plus the neighbor vote.

Search is a linear scan with partial selection under squared Euclidean
distance. Ties resolve by insertion order so results are reproducible and
identical to a stable full sort.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InputError
from .triplets import MELANOMA, HierLabel

INDEX_MAGIC = b"CHAIX001"


@dataclass
class NeighborList:
    query_id: str
    ids: list[str]
    distances: list[float]

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(zip(self.ids, self.distances))


@dataclass
class EmbeddingIndex:
    """Immutable store of (id, embedding, label) records."""
    dimension: int
    ids: list[str] = field(default_factory=list)
    labels: dict[str, HierLabel] = field(default_factory=dict)
    _matrix: np.ndarray | None = None

    @classmethod
    def build(cls, records) -> "EmbeddingIndex":
        """records: iterable of (id, embedding, HierLabel)."""
        ids, labels, rows = [], {}, []
        dim = None
        for sample_id, emb, label in records:
            emb = np.asarray(emb, dtype=np.float64).ravel()
            if dim is None:
                dim = emb.shape[0]
            elif emb.shape[0] != dim:
                raise InputError(f"embedding for {sample_id!r} has dimension "
                                 f"{emb.shape[0]}, index expects {dim}")
            if sample_id in labels:
                raise InputError(f"duplicate sample id {sample_id!r}")
            ids.append(sample_id)
            labels[sample_id] = label
            rows.append(emb)
        if not ids:
            raise InputError("cannot build an empty index")
        return cls(dimension=dim, ids=ids, labels=labels,
                   _matrix=np.vstack(rows))

    def __len__(self):
        return len(self.ids)

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix


def knn_query(index: EmbeddingIndex, query: np.ndarray, k: int) -> NeighborList:
    """The k records nearest to query by squared Euclidean distance.

    Partial selection via argpartition, then an exact stable ordering of
    the candidate set; ties at the cut distance are resolved by insertion
    order, so the result matches a full stable sort.
    """
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.shape[0] != index.dimension:
        raise InputError(f"query dimension {q.shape[0]} != index dimension {index.dimension}")
    n = len(index)
    if k < 1 or k > n:
        raise InputError(f"k must be in [1, {n}], got {k}")
    diffs = index.matrix - q
    dists = np.einsum("ij,ij->i", diffs, diffs)
    if k < n:
        part = np.argpartition(dists, k - 1)[:k]
        cut = dists[part].max()
        candidates = np.flatnonzero(dists <= cut)  # re-collect ties at the cut
    else:
        candidates = np.arange(n)
    order = candidates[np.lexsort((candidates, dists[candidates]))][:k]
    return NeighborList(query_id="",
                        ids=[index.ids[i] for i in order],
                        distances=[float(dists[i]) for i in order])


def melanoma_score(neighbors: NeighborList, labels, positive: str = MELANOMA) -> float:
    """Unweighted neighbor vote: fraction carrying the positive disease."""
    if len(neighbors) == 0:
        raise InputError("empty neighbor list")
    hits = 0
    for sample_id, _ in neighbors:
        if sample_id not in labels:
            raise InputError(f"neighbor {sample_id!r} has no label")
        if labels[sample_id].disease == positive:
            hits += 1
    return hits / len(neighbors)


# ---------------------------------------------------------------------------
# Serialization: header (magic, d, N), then per-record id/label/f32 payload
# ---------------------------------------------------------------------------

def _write_str(buf, s: str) -> None:
    raw = (s or "").encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def save_index(index: EmbeddingIndex, path) -> None:
    buf = io.BytesIO()
    buf.write(INDEX_MAGIC)
    buf.write(struct.pack("<II", index.dimension, len(index)))
    for i, sample_id in enumerate(index.ids):
        label = index.labels[sample_id]
        _write_str(buf, sample_id)
        _write_str(buf, label.disease or "")
        _write_str(buf, label.group or "")
        buf.write(index.matrix[i].astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated index file while reading {what}")
    return data


def _read_str(fh, what: str) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4, what + " length"))
    return _read_exact(fh, n, what).decode("utf-8")


def load_index(path) -> EmbeddingIndex:
    with open(path, "rb") as fh:
        magic = fh.read(len(INDEX_MAGIC))
        if magic != INDEX_MAGIC:
            raise FormatError(f"bad index magic {magic!r}")
        dim, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        records = []
        for _ in range(count):
            sample_id = _read_str(fh, "sample id")
            disease = _read_str(fh, "disease") or None
            group = _read_str(fh, "group") or None
            payload = _read_exact(fh, 4 * dim, f"embedding of {sample_id}")
            emb = np.frombuffer(payload, dtype="<f4")
            records.append((sample_id, emb, HierLabel(disease, group)))
        if fh.read(1):
            raise FormatError("trailing bytes after last index record")
    return EmbeddingIndex.build(records)
