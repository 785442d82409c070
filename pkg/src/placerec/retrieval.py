"""Descriptor database, exact Euclidean KNN, and localization recall metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from placerec.errors import DataError
from placerec.fusion import Segment
from placerec.numcore.serialize import expect_magic, read_f64, read_str, read_u64, write_f64, write_str, write_u64

PDB_MAGIC = b"PDB1"
N_MAX = 25


@dataclass(frozen=True)
class EvalProtocol:
    distance_threshold: float = 25.0
    top_percent: float = 1.0

    def __post_init__(self):
        if not self.distance_threshold > 0:
            raise ValueError("distance threshold must be positive")
        if not self.top_percent > 0:
            raise ValueError("top_percent must be positive")


class DescriptorDatabase:
    """Immutable M x D descriptor matrix with planar positions and unique ids."""

    def __init__(self, descriptors, positions, ids: Sequence[str], layout: Sequence[Segment] = (),
                 dim: int | None = None):
        try:
            desc = np.array(descriptors, dtype=np.float64)
        except ValueError:
            raise DataError("descriptor rows are ragged") from None
        ids = [str(i) for i in ids]
        m = len(ids)
        if desc.size == 0 and (desc.ndim != 2 or dim is not None):
            desc = desc.reshape(m, dim if dim is not None else 0)
        if desc.ndim != 2 or len(desc) != m:
            raise DataError(f"descriptor matrix {desc.shape} does not match {m} ids")
        pos = np.array(positions, dtype=np.float64).reshape(-1, 2) if m else np.zeros((0, 2))
        if len(pos) != m:
            raise DataError(f"{len(pos)} positions for {m} ids")
        if len(set(ids)) != m:
            raise DataError("duplicate ids in database")
        if not np.isfinite(desc).all() or not np.isfinite(pos).all():
            raise DataError("non-finite descriptor or position")
        self.layout = tuple(layout)
        if self.layout and sum(s.length for s in self.layout) != desc.shape[1]:
            raise DataError("layout does not cover the descriptor dimension")
        desc.flags.writeable = False
        pos.flags.writeable = False
        self.descriptors = desc
        self.positions = pos
        self.ids = tuple(ids)
        # id rank for tie-breaking
        self._id_rank = np.empty(m, dtype=np.int64)
        self._id_rank[np.argsort(np.array(ids, dtype=object), kind="stable")] = np.arange(m)

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def distances(self, query: np.ndarray) -> np.ndarray:
        diff = self.descriptors - query
        return np.sqrt((diff * diff).sum(axis=1))


def build_database(descriptors, positions, ids, layout=()) -> DescriptorDatabase:
    return DescriptorDatabase(descriptors, positions, ids, layout)


def save_database(path, db: DescriptorDatabase) -> None:
    buf = io.BytesIO()
    buf.write(PDB_MAGIC)
    write_u64(buf, db.size)
    write_u64(buf, db.dim)
    write_f64(buf, db.descriptors)
    write_f64(buf, db.positions)
    for i in db.ids:
        write_str(buf, i)
    # layout trailer
    write_u64(buf, len(db.layout))
    for seg in db.layout:
        write_str(buf, seg.name)
        write_u64(buf, seg.offset)
        write_u64(buf, seg.length)
    Path(path).write_bytes(buf.getvalue())


def load_database(path) -> DescriptorDatabase:
    raw = Path(path).read_bytes()
    fh = io.BytesIO(raw)
    expect_magic(fh, PDB_MAGIC, path)
    m, d = read_u64(fh), read_u64(fh)
    desc = read_f64(fh, m * d).reshape(m, d)
    pos = read_f64(fh, 2 * m).reshape(m, 2)
    ids = [read_str(fh) for _ in range(m)]
    layout = []
    if fh.tell() < len(raw):
        for _ in range(read_u64(fh)):
            name = read_str(fh)
            layout.append(Segment(name, read_u64(fh), read_u64(fh)))
    if fh.tell() != len(raw):
        raise DataError(f"{path}: trailing bytes")
    return DescriptorDatabase(desc, pos, ids, layout, dim=d)


def _ranked(db: DescriptorDatabase, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dist = db.distances(query)
    order = np.lexsort((np.arange(db.size), db._id_rank, dist))
    return order, dist


def _check_query(db: DescriptorDatabase, query) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    if db.size == 0:
        raise DataError("database is empty")
    if q.ndim != 1 or len(q) != db.dim:
        raise DataError(f"query dimension {q.shape} does not match database dimension {db.dim}")
    return q


def query_knn(db: DescriptorDatabase, query, k: int) -> list[tuple[str, float]]:
    """k nearest rows as (id, distance), ascending; equal distances ordered by id."""
    q = _check_query(db, query)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > db.size:
        raise DataError(f"k={k} exceeds database size {db.size}")
    order, dist = _ranked(db, q)
    return [(db.ids[i], float(dist[i])) for i in order[:k]]


def top_percent_n(m: int, percent: float = 1.0) -> int:
    # round half up, at least one
    return max(1, int(math.floor(percent / 100.0 * m + 0.5)))


@dataclass
class Metrics:
    ar1: float
    ar1p: float
    recall: np.ndarray       # recall@1..N_MAX, percent
    n_top_percent: int
    num_queries: int

    def rounded(self) -> dict:
        return {"AR@1": round(self.ar1, 2), "AR@1%": round(self.ar1p, 2)}


def evaluate(db: DescriptorDatabase, query_desc, query_pos, protocol: EvalProtocol = EvalProtocol()) -> Metrics:
    """Recall@N: a query counts at N when any of its top N rows lies within the threshold."""
    q_desc = np.asarray(query_desc, dtype=np.float64)
    q_pos = np.asarray(query_pos, dtype=np.float64).reshape(-1, 2)
    if len(q_desc) == 0 or db.size == 0:
        raise DataError("evaluation needs a nonempty database and query set")
    if q_desc.ndim != 2 or q_desc.shape[1] != db.dim:
        raise DataError(f"query dimension {q_desc.shape} does not match database dimension {db.dim}")
    if len(q_pos) != len(q_desc):
        raise DataError("query positions and descriptors differ in count")
    n_pct = top_percent_n(db.size, protocol.top_percent)
    n_top = max(N_MAX, n_pct)
    thr_sq = protocol.distance_threshold ** 2
    hits = np.zeros(n_top + 1)
    for qd, qp in zip(q_desc, q_pos):
        order, _ = _ranked(db, _check_query(db, qd))
        d = db.positions[order[:n_top]] - qp
        close = np.nonzero((d * d).sum(axis=1) <= thr_sq)[0]
        if len(close):
            hits[close[0] + 1 :] += 1
    frac = 100.0 * hits / len(q_desc)
    return Metrics(float(frac[1]), float(frac[n_pct]), frac[1 : N_MAX + 1].copy(), n_pct, len(q_desc))


def random_baseline(db_positions, query_positions, threshold: float = 25.0) -> float:
    """Expected AR@1 (percent) of a retriever returning a uniformly random database row."""
    db = np.asarray(db_positions, dtype=np.float64).reshape(-1, 2)
    q = np.asarray(query_positions, dtype=np.float64).reshape(-1, 2)
    if len(db) == 0 or len(q) == 0:
        raise DataError("random baseline needs nonempty sets")
    frac = [float(((((db - p) ** 2).sum(axis=1)) <= threshold ** 2).mean()) for p in q]
    return 100.0 * float(np.mean(frac))


def metrics_csv(rows: Sequence[tuple[str, Metrics]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["name", "AR@1", "AR@1%"])
    for name, m in rows:
        writer.writerow([name, f"{m.ar1:.2f}", f"{m.ar1p:.2f}"])
    return buf.getvalue()


def recall_curve_csv(metrics: Metrics) -> str:
    lines = ["N,recall"]
    lines += [f"{n},{v:.2f}" for n, v in enumerate(metrics.recall, start=1)]
    return "\n".join(lines) + "\n"


def format_table(headers: Sequence[str], rows: Sequence[Sequence], highlight: Sequence[int] = ()) -> str:
    """Fixed-width text table. Columns in ``highlight`` mark the best value with ** and the second with __."""
    cells = [[str(c) if not isinstance(c, float) else f"{c:.2f}" for c in row] for row in rows]
    for col in highlight:
        values = sorted({float(r[col]) for r in rows}, reverse=True)
        marks = {}
        if values:
            marks[values[0]] = "**"
        if len(values) > 1:
            marks[values[1]] = "__"
        for r, row in zip(cells, rows):
            m = marks.get(float(row[col]))
            if m:
                r[col] = f"{m}{r[col]}{m}"
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h) for i, h in enumerate(headers)]
    out = [" | ".join(h.ljust(w) for h, w in zip(headers, widths)), "-+-".join("-" * w for w in widths)]
    out += [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    return "\n".join(out) + "\n"
