"""Text branch: TF-IDF -> PCA(128) -> two-layer GELU MLP."""

from __future__ import annotations

import io
import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from placerec.errors import ConfigError, DataError
from placerec.numcore import Linear, Module, Tensor, gelu, no_grad
from placerec.numcore.serialize import (
    expect_magic,
    read_f64,
    read_str,
    read_u64,
    write_f64,
    write_str,
    write_u64,
)

_TOKEN = re.compile(r"[^\W_]+")
TFIDF_MAGIC = b"TFI1"
PCA_MAGIC = b"PCA1"


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class TfidfModel:
    vocabulary: dict[str, int]
    idf: np.ndarray
    document_count: int

    @property
    def dim(self) -> int:
        return len(self.vocabulary)


class SparseVector(NamedTuple):
    indices: np.ndarray
    values: np.ndarray
    dim: int

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out


def fit_tfidf(corpus: Sequence[str]) -> TfidfModel:
    """Smoothed idf = ln((1 + N) / (1 + df)) + 1 over an unbounded vocabulary."""
    if len(corpus) == 0:
        raise DataError("cannot fit TF-IDF on an empty corpus")
    df: dict[str, int] = {}
    for doc in corpus:
        for tok in set(tokenize(doc)):
            df[tok] = df.get(tok, 0) + 1
    vocab = {tok: i for i, tok in enumerate(sorted(df))}
    n = len(corpus)
    idf = np.array([np.log((1.0 + n) / (1.0 + df[tok])) + 1.0 for tok in sorted(df)])
    return TfidfModel(vocab, idf, n)


def transform_tfidf(model: TfidfModel, doc: str, normalize: bool = True) -> SparseVector:
    """tf = count / doc length, times idf, then L2-normalized. Unseen tokens are ignored."""
    tokens = tokenize(doc)
    counts: dict[int, int] = {}
    for tok in tokens:
        idx = model.vocabulary.get(tok)
        if idx is not None:
            counts[idx] = counts.get(idx, 0) + 1
    if not counts:
        return SparseVector(np.zeros(0, dtype=np.int64), np.zeros(0), model.dim)
    idx = np.array(sorted(counts), dtype=np.int64)
    tf = np.array([counts[i] for i in idx], dtype=np.float64) / len(tokens)
    vals = tf * model.idf[idx]
    if normalize:
        vals = vals / np.linalg.norm(vals)
    return SparseVector(idx, vals, model.dim)


def tfidf_matrix(model: TfidfModel, docs: Sequence[str]) -> np.ndarray:
    out = np.zeros((len(docs), model.dim))
    for row, doc in enumerate(docs):
        vec = transform_tfidf(model, doc)
        out[row, vec.indices] = vec.values
    return out


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (k, d), orthonormal rows
    explained_variance: np.ndarray  # (k,), descending

    @property
    def k(self) -> int:
        return self.components.shape[0]


def fit_pca(vectors, k: int = 128) -> PcaModel:
    """Top-k principal directions of the centered sample covariance (n - 1 normalization).

    Component signs are fixed so the largest-magnitude entry of each row is
    positive. If fewer than ``k`` directions carry variance, the remainder
    are zero-variance orthonormal completions and a warning is issued.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"PCA input must be a 2-D matrix, got shape {x.shape}")
    n, d = x.shape
    if n < k or d < k:
        raise ConfigError(f"PCA with k={k} needs at least {k} samples of dim >= {k}, got {n}x{d}")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    var = s * s / max(n - 1, 1)
    comps = vt[:k].copy()
    ev = var[:k].copy()
    tol = max(n, d) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    if rank < k:
        warnings.warn(f"PCA input has rank {rank} < k={k}; padding with zero-variance components",
                      RuntimeWarning, stacklevel=2)
        ev[rank:] = 0.0
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(k), pivot])
    signs[signs == 0] = 1.0
    comps *= signs[:, None]
    return PcaModel(mean, comps, ev)


def project_pca(model: PcaModel, v) -> np.ndarray:
    """components . (v - mean); works on a vector or a row-stacked matrix."""
    v = np.asarray(v, dtype=np.float64)
    return (v - model.mean) @ model.components.T


class TextEncoder(Module):
    """Two-layer MLP over fixed text features (PCA projections or external embeddings)."""

    def __init__(self, in_dim: int, hidden_dim: int, output_dim: int, rng: np.random.Generator):
        self.fc1 = Linear(in_dim, hidden_dim, rng)
        self.fc2 = Linear(hidden_dim, output_dim, rng)

    def forward(self, feats) -> Tensor:
        return self.fc2(gelu(self.fc1(feats)))


def encode_text(doc: str, tfidf: TfidfModel | None, pca: PcaModel | None, mlp: TextEncoder) -> np.ndarray:
    if tfidf is None or pca is None:
        raise ConfigError("encode_text needs fitted TF-IDF and PCA models")
    feats = project_pca(pca, tfidf_matrix(tfidf, [doc]))
    with no_grad():
        return mlp(Tensor(feats)).data[0].copy()


# -- persistence ----------------------------------------------------------------
def save_tfidf(path, model: TfidfModel) -> None:
    buf = io.BytesIO()
    buf.write(TFIDF_MAGIC)
    write_u64(buf, model.document_count)
    write_u64(buf, model.dim)
    for tok, idx in sorted(model.vocabulary.items(), key=lambda kv: kv[1]):
        write_str(buf, tok)
        write_f64(buf, [model.idf[idx]])
    Path(path).write_bytes(buf.getvalue())


def load_tfidf(path) -> TfidfModel:
    fh = io.BytesIO(Path(path).read_bytes())
    expect_magic(fh, TFIDF_MAGIC, path)
    n_docs = read_u64(fh)
    size = read_u64(fh)
    vocab, idf = {}, np.zeros(size)
    for i in range(size):
        tok = read_str(fh)
        if tok in vocab:
            raise DataError(f"{path}: duplicate token {tok!r}")
        vocab[tok] = i
        idf[i] = read_f64(fh, 1)[0]
    return TfidfModel(vocab, idf, n_docs)


def save_pca(path, model: PcaModel) -> None:
    buf = io.BytesIO()
    buf.write(PCA_MAGIC)
    k, d = model.components.shape
    write_u64(buf, k)
    write_u64(buf, d)
    write_f64(buf, model.mean)
    write_f64(buf, model.components)
    write_f64(buf, model.explained_variance)
    Path(path).write_bytes(buf.getvalue())


def load_pca(path) -> PcaModel:
    fh = io.BytesIO(Path(path).read_bytes())
    expect_magic(fh, PCA_MAGIC, path)
    k = read_u64(fh)
    d = read_u64(fh)
    mean = read_f64(fh, d)
    comps = read_f64(fh, k * d).reshape(k, d)
    ev = read_f64(fh, k)
    return PcaModel(mean, comps, ev)
