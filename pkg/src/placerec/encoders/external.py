"""EMB1 files: precomputed embeddings keyed by sample id (e.g. CLIP text vectors)."""

from __future__ import annotations

import io
from pathlib import Path
from typing import Mapping

import numpy as np

from placerec.errors import DataError
from placerec.numcore.serialize import expect_magic, read_f64, read_str, read_u64, write_f64, write_str, write_u64

EMB_MAGIC = b"EMB1"


def save_embeddings(path, embeddings: Mapping[str, np.ndarray]) -> None:
    dims = {np.asarray(v).shape for v in embeddings.values()}
    if len(dims) > 1:
        raise DataError(f"ragged embedding dimensions: {sorted(dims)}")
    dim = next(iter(dims))[0] if dims else 0
    buf = io.BytesIO()
    buf.write(EMB_MAGIC)
    write_u64(buf, len(embeddings))
    write_u64(buf, dim)
    for key, vec in embeddings.items():
        vec = np.asarray(vec, dtype=np.float64)
        if vec.ndim != 1:
            raise DataError(f"embedding {key!r} is not a vector")
        write_str(buf, key)
        write_f64(buf, vec)
    Path(path).write_bytes(buf.getvalue())


def load_external_embeddings(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    fh = io.BytesIO(raw)
    expect_magic(fh, EMB_MAGIC, path)
    count = read_u64(fh)
    dim = read_u64(fh)
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        key = read_str(fh)
        if key in out:
            raise DataError(f"{path}: duplicate embedding id {key!r}")
        out[key] = read_f64(fh, dim)
    if fh.tell() != len(raw):
        raise DataError(f"{path}: {len(raw) - fh.tell()} trailing bytes after {count} records")
    return out


def embedding_dim(embeddings: Mapping[str, np.ndarray]) -> int:
    if not embeddings:
        raise DataError("empty embedding table")
    return len(next(iter(embeddings.values())))
