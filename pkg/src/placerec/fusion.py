"""Embedding fusion (K same-modality embeddings -> one) and modality aggregation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from placerec.errors import ConfigError, DataError
from placerec.numcore import (
    Linear,
    Module,
    Parameter,
    Tensor,
    concat,
    gelu,
    gem_pool,
    no_grad,
    norm,
    reshape,
    self_attention,
    transpose,
    sym_sum,
)

FUSION_METHODS = ("add", "concat", "gem1d", "mlp256", "mlp512", "sa_add", "sa_concat")
FUSION_LABELS = {
    "add": "Add",
    "concat": "Concat",
    "gem1d": "GeM-1D",
    "mlp512": "MLP512",
    "mlp256": "MLP256",
    "sa_add": "SA+Add",
    "sa_concat": "SA+Concat",
}


def fused_dim(method: str, k: int, e: int) -> int:
    if method in ("add", "gem1d", "sa_add"):
        return e
    if method in ("concat", "sa_concat"):
        return k * e
    if method in ("mlp256", "mlp512"):
        return int(method[3:])
    raise ConfigError(f"unknown fusion method {method!r}; expected one of {FUSION_METHODS}")


class Fusion(Module):
    """Learnable-where-applicable fusion over inputs shaped (B, K, E)."""

    def __init__(self, method: str, k: int, e: int, rng: np.random.Generator,
                 gem_p: float = 3.0, gem_eps: float = 1e-6):
        if k < 1 or e < 1:
            raise ConfigError("fusion needs K >= 1 and E >= 1")
        self.method = method
        self.k, self.e = k, e
        self.out_dim = fused_dim(method, k, e)
        self.gem_eps = gem_eps
        if method == "gem1d":
            self.gem_p = Parameter(np.array([gem_p]), min_value=1.0)
        elif method.startswith("mlp"):
            self.fc1 = Linear(k * e, k * e, rng)
            self.fc2 = Linear(k * e, self.out_dim, rng)
        elif method.startswith("sa_"):
            scale = 1.0 / np.sqrt(e)
            self.w_q = Parameter(rng.normal(0.0, scale, size=(e, e)))
            self.w_k = Parameter(rng.normal(0.0, scale, size=(e, e)))
            self.w_v = Parameter(rng.normal(0.0, scale, size=(e, e)))

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 3 or x.shape[1:] != (self.k, self.e):
            raise DataError(f"fusion expects (B, {self.k}, {self.e}) input, got {x.shape}")
        b = x.shape[0]
        m = self.method
        if m.startswith("sa_"):
            x = self_attention(x, self.w_q, self.w_k, self.w_v)
            m = m[3:]
        if m == "add":
            return sym_sum(x, axis=1)
        if m == "concat":
            return reshape(x, (b, self.k * self.e))
        if m == "gem1d":
            return gem_pool(transpose(x, (0, 2, 1)), self.gem_p, eps=self.gem_eps, axis=-1)
        flat = reshape(x, (b, self.k * self.e))
        return self.fc2(gelu(self.fc1(flat)))


def fuse_embeddings(inputs: Sequence[np.ndarray], method: str | Fusion,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Fuse K same-dimension embeddings with a named method (or a built Fusion module)."""
    if len(inputs) == 0:
        raise DataError("fusion needs at least one embedding")
    dims = {np.shape(v) for v in inputs}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise DataError(f"ragged or non-vector embeddings: {sorted(dims)}")
    stacked = np.stack([np.asarray(v, dtype=np.float64) for v in inputs])[None]
    module = method
    if isinstance(method, str):
        module = Fusion(method, stacked.shape[1], stacked.shape[2], rng or np.random.default_rng(0))
    with no_grad():
        return module(Tensor(stacked)).data[0].copy()


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int


@dataclass
class GlobalDescriptor:
    vector: np.ndarray
    layout: tuple[Segment, ...]

    @property
    def dim(self) -> int:
        return len(self.vector)

    def segment(self, name: str) -> np.ndarray:
        for seg in self.layout:
            if seg.name == name:
                return self.vector[seg.offset : seg.offset + seg.length]
        raise KeyError(name)


def make_layout(parts: Sequence[tuple[str, int]]) -> tuple[Segment, ...]:
    out, offset = [], 0
    for name, length in parts:
        out.append(Segment(name, offset, int(length)))
        offset += int(length)
    return tuple(out)


def _check_layout(parts: Sequence[tuple[str, int]], expected: Sequence[Segment] | None):
    if not parts:
        raise DataError("aggregation needs at least one modality descriptor")
    if expected is not None:
        got = [(n, l) for n, l in parts]
        want = [(s.name, s.length) for s in expected]
        if got != want:
            raise DataError(f"modality order/shape {got} does not match configured layout {want}")


def aggregate_modalities(descriptors: Sequence[tuple[str, np.ndarray]],
                         layout: Sequence[Segment] | None = None,
                         normalize_segments: bool = False) -> GlobalDescriptor:
    """Concatenate per-modality descriptors in the given (configured) order."""
    parts = [(name, len(np.ravel(vec))) for name, vec in descriptors]
    _check_layout(parts, layout)
    vecs = []
    for _, vec in descriptors:
        v = np.asarray(vec, dtype=np.float64).ravel()
        if normalize_segments:
            n = np.linalg.norm(v)
            v = v / n if n > 0 else v
        vecs.append(v)
    return GlobalDescriptor(np.concatenate(vecs), make_layout(parts))


def aggregate_batch(descriptors: Sequence[tuple[str, Tensor]], normalize_segments: bool = False) -> Tensor:
    """Differentiable aggregation over (B, d_i) tensors."""
    _check_layout([(n, t.shape[-1]) for n, t in descriptors], None)
    parts = []
    for _, t in descriptors:
        if normalize_segments:
            t = t / (norm(t, axis=-1, keepdims=True) + 1e-12)
        parts.append(t)
    return parts[0] if len(parts) == 1 else concat(parts, axis=-1)
