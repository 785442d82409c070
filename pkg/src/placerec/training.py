"""Metric learning: triplet loss, batch-hard mining, dynamic batch sizing, LR schedule, epoch driver."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from placerec.encoders import BevConfig, CnnEncoder, CnnEncoderConfig, PointCloudEncoder, TextEncoder
from placerec.errors import ConfigError, DataError
from placerec.fusion import Fusion, aggregate_batch, fused_dim, make_layout
from placerec.numcore import (
    Adam,
    Module,
    Tensor,
    as_tensor,
    no_grad,
    norm,
    precision,
    relu,
    reshape,
    take,
)

# Modality code -> branch name; aggregation order is fixed to this order.
MODALITIES = {"L": "cloud", "I": "image", "S": "mask", "T": "text"}
BRANCH_ORDER = ("cloud", "image", "mask", "text")
CAMERA_BRANCHES = ("image", "mask", "text")
LOG_COLUMNS = ("epoch", "loss", "zero_loss_ratio", "batch_size", "lr_image", "lr_cloud", "lr_text", "lr_mask")


# -- loss and mining ---------------------------------------------------------------


@dataclass(frozen=True)
class TripletLossConfig:
    margin: float = 0.2

    def __post_init__(self):
        if not self.margin > 0:
            raise ConfigError("triplet margin must be positive")


def triplet_margin_loss(anchor, positive, negative, config: TripletLossConfig | float = TripletLossConfig()) -> Tensor:
    """max(0, |a-p| - |a-n| + m) per triplet; works on (D,) or (T, D) inputs."""
    margin = config.margin if isinstance(config, TripletLossConfig) else float(config)
    a, p, n = as_tensor(anchor), as_tensor(positive), as_tensor(negative)
    if not (a.shape == p.shape == n.shape):
        raise DataError(f"triplet shapes differ: {a.shape}, {p.shape}, {n.shape}")
    d_ap = norm(a - p, axis=-1)
    d_an = norm(a - n, axis=-1)
    return relu(d_ap - d_an + margin)


@dataclass(frozen=True)
class PairMask:
    positives: np.ndarray
    negatives: np.ndarray


def build_pair_mask(positions: np.ndarray, r_pos: float = 10.0, r_neg: float = 50.0) -> PairMask:
    """Positives: distinct samples within r_pos; negatives: beyond r_neg."""
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 2:
        raise DataError(f"positions must be (B, 2), got {pos.shape}")
    if not 0 < r_pos <= r_neg:
        raise ConfigError("radii must satisfy 0 < r_pos <= r_neg")
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    positives = dist <= r_pos
    np.fill_diagonal(positives, False)
    negatives = dist > r_neg
    return PairMask(positives, negatives)


def pairwise_distances(desc: np.ndarray) -> np.ndarray:
    desc = np.asarray(desc, dtype=np.float64)
    out = np.empty((len(desc), len(desc)))
    for i in range(len(desc)):
        diff = desc - desc[i]
        out[i] = np.sqrt((diff * diff).sum(axis=1))
    return out


def batch_hard_mine(desc: np.ndarray, mask: PairMask) -> list[tuple[int, int, int]]:
    """Farthest positive and nearest negative per anchor; lowest index wins ties."""
    desc = np.asarray(desc)
    b = len(desc)
    if b < 2:
        raise DataError("batch-hard mining needs at least two samples")
    if mask.positives.shape != (b, b) or mask.negatives.shape != (b, b):
        raise DataError("pair mask does not match the batch")
    dist = pairwise_distances(desc)
    triplets = []
    for a in range(b):
        pos, neg = mask.positives[a], mask.negatives[a]
        if not pos.any() or not neg.any():
            continue
        p = int(np.argmax(np.where(pos, dist[a], -np.inf)))
        n = int(np.argmin(np.where(neg, dist[a], np.inf)))
        triplets.append((a, p, n))
    return triplets


# -- batch size and learning rate --------------------------------------------------


@dataclass
class BatchSizer:
    current: int = 16
    initial: int = 16
    growth: float = 1.4
    maximum: int = 128
    zero_loss_threshold: float = 0.7

    def __post_init__(self):
        if not 2 <= self.initial <= self.current <= self.maximum:
            raise ConfigError("batch sizes must satisfy 2 <= initial <= current <= max")
        if not self.growth >= 1.0:
            raise ConfigError("batch growth factor must be >= 1")


def grow(current: int, growth: float, maximum: int) -> int:
    # round half up
    return min(maximum, int(math.floor(current * growth + 0.5)))


def update_batch_size(sizer: BatchSizer, zero_loss_ratio: float) -> BatchSizer:
    if not 0.0 <= zero_loss_ratio <= 1.0:
        raise ValueError(f"zero-loss ratio must lie in [0, 1], got {zero_loss_ratio}")
    current = sizer.current
    if zero_loss_ratio < sizer.zero_loss_threshold:
        current = grow(current, sizer.growth, sizer.maximum)
    return BatchSizer(current, sizer.initial, sizer.growth, sizer.maximum, sizer.zero_loss_threshold)


DEFAULT_LRS = {"image": 1e-4, "cloud": 1e-3, "text": 1e-4, "mask": 1e-3}


@dataclass
class LrSchedule:
    base: dict = field(default_factory=lambda: dict(DEFAULT_LRS))
    milestones: tuple[int, ...] = (40, 60)
    factor: float = 0.1

    def rate(self, branch: str, epoch: int) -> float:
        """LR for 1-indexed ``epoch``; decays once per milestone already completed."""
        if epoch < 1:
            raise ValueError("epochs are 1-indexed")
        done = epoch - 1
        return self.base[branch] * self.factor ** sum(1 for m in self.milestones if m <= done)


# -- model ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    modalities: tuple[str, ...] = ("cloud", "image")
    cameras: tuple[int, ...] = (0, 1, 2, 3)
    fusion: str = "add"
    embed_dim: int = 256
    widths: tuple[int, ...] = (16, 32, 64, 128)
    bev: BevConfig = field(default_factory=BevConfig)
    text_in_dim: int = 128
    text_hidden: int = 128
    num_mask_classes: int = 8
    normalize_segments: bool = False

    def __post_init__(self):
        mods = tuple(self.modalities)
        if not mods:
            raise ConfigError("at least one modality is required")
        unknown = [m for m in mods if m not in BRANCH_ORDER]
        if unknown:
            raise ConfigError(f"unknown modalities {unknown}; expected a subset of {BRANCH_ORDER}")
        if len(set(mods)) != len(mods):
            raise ConfigError("duplicate modality")
        self.modalities = tuple(m for m in BRANCH_ORDER if m in mods)
        self.cameras = tuple(int(c) for c in self.cameras)
        if any(m in CAMERA_BRANCHES for m in self.modalities) and not self.cameras:
            raise ConfigError("camera-borne modalities need at least one camera")
        if len(set(self.cameras)) != len(self.cameras):
            raise ConfigError("duplicate camera index")
        fused_dim(self.fusion, max(1, len(self.cameras)), self.embed_dim)
        self.widths = tuple(int(w) for w in self.widths)

    def segment_dim(self, branch: str) -> int:
        if branch == "cloud":
            return self.embed_dim
        return fused_dim(self.fusion, len(self.cameras), self.embed_dim)

    @property
    def layout(self):
        return make_layout([(m, self.segment_dim(m)) for m in self.modalities])

    @property
    def descriptor_dim(self) -> int:
        return sum(s.length for s in self.layout)


class PlaceModel(Module):
    """Independent per-modality branches, per-branch camera fusion, concatenation."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        k, e = len(config.cameras), config.embed_dim
        self.branches = {}
        self.fusions = {}
        for m in config.modalities:
            if m == "cloud":
                self.branches[m] = PointCloudEncoder(config.bev, CnnEncoderConfig(1, config.widths, e), rng)
                continue
            if m == "image":
                self.branches[m] = CnnEncoder(CnnEncoderConfig(3, config.widths, e), rng)
            elif m == "mask":
                self.branches[m] = CnnEncoder(CnnEncoderConfig(1, config.widths, e), rng)
            else:
                self.branches[m] = TextEncoder(config.text_in_dim, config.text_hidden, e, rng)
            self.fusions[m] = Fusion(config.fusion, k, e, rng)

    def param_groups(self) -> dict[str, list]:
        groups = {}
        for m in self.config.modalities:
            params = self.branches[m].parameters()
            if m in self.fusions:
                params = params + self.fusions[m].parameters()
            groups[m] = params
        return groups

    def branch_forward(self, branch: str, x) -> Tensor:
        enc = self.branches[branch]
        if branch == "cloud":
            return enc(x)
        x = x if isinstance(x, Tensor) else Tensor(x)
        b, k = x.shape[:2]
        flat = reshape(x, (b * k,) + x.shape[2:])
        emb = enc(flat)
        return self.fusions[branch](reshape(emb, (b, k, emb.shape[-1])))

    def forward(self, inputs: dict) -> Tensor:
        parts = [(m, self.branch_forward(m, inputs[m])) for m in self.config.modalities]
        return aggregate_batch(parts, self.config.normalize_segments)


# -- preprocessed inputs -------------------------------------------------------------


@dataclass
class FeatureTable:
    """Preprocessed, model-ready inputs for a set of samples.

    ``inputs`` maps branch name to an array whose first axis indexes samples:
    cloud (N, R, R, 1); image (N, K, H, W, 3); mask (N, K, H, W, 1); text (N, K, F).
    """

    ids: list[str]
    positions: np.ndarray
    places: np.ndarray
    inputs: dict

    def __post_init__(self):
        n = len(self.ids)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(n, 2)
        self.places = np.asarray(self.places, dtype=np.int64).reshape(n)
        for name, arr in self.inputs.items():
            if len(arr) != n:
                raise DataError(f"{name} inputs have {len(arr)} rows for {n} samples")

    def __len__(self) -> int:
        return len(self.ids)

    def batch(self, index: np.ndarray, modalities: Sequence[str]) -> dict:
        missing = [m for m in modalities if m not in self.inputs]
        if missing:
            raise DataError(f"feature table lacks modalities {missing}")
        return {m: self.inputs[m][index] for m in modalities}

    def subset(self, index: np.ndarray) -> "FeatureTable":
        index = np.asarray(index, dtype=np.int64)
        return FeatureTable([self.ids[i] for i in index], self.positions[index], self.places[index],
                            {k: v[index] for k, v in self.inputs.items()})


def embed(model: PlaceModel, table: FeatureTable, batch_size: int = 64, dtype=np.float64) -> np.ndarray:
    """Global descriptors (N, D) for every sample in the table."""
    out = []
    with precision(dtype), no_grad():
        for start in range(0, len(table), batch_size):
            idx = np.arange(start, min(len(table), start + batch_size))
            out.append(model(table.batch(idx, model.config.modalities)).data.astype(np.float64))
    if not out:
        return np.zeros((0, model.config.descriptor_dim))
    return np.concatenate(out)


# -- epoch driver --------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 80
    margin: float = 0.2
    r_pos: float = 10.0
    r_neg: float = 50.0
    initial_batch: int = 16
    batch_growth: float = 1.4
    max_batch: int = 128
    zero_loss_threshold: float = 0.7
    lrs: dict = field(default_factory=lambda: dict(DEFAULT_LRS))
    milestones: tuple[int, ...] = (40, 60)
    lr_factor: float = 0.1
    sampler: str = "pairs"
    dtype: str = "float64"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.sampler not in ("pairs", "uniform"):
            raise ConfigError(f"unknown sampler {self.sampler!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        unknown = set(self.lrs) - set(DEFAULT_LRS)
        if unknown:
            raise ConfigError(f"unknown branches in learning-rate table: {sorted(unknown)}")
        self.lrs = {**DEFAULT_LRS, **{k: float(v) for k, v in self.lrs.items()}}
        if any(not v > 0 for v in self.lrs.values()):
            raise ConfigError("learning rates must be positive")
        self.milestones = tuple(int(m) for m in self.milestones)
        TripletLossConfig(self.margin)
        BatchSizer(self.initial_batch, self.initial_batch, self.batch_growth, self.max_batch,
                   self.zero_loss_threshold)
        if not 0 < self.r_pos <= self.r_neg:
            raise ConfigError("radii must satisfy 0 < r_pos <= r_neg")

    def schedule(self) -> LrSchedule:
        return LrSchedule(dict(self.lrs), self.milestones, self.lr_factor)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    zero_loss_ratio: float
    batch_size: int
    lrs: dict

    def row(self) -> list:
        return [self.epoch, repr(self.loss), repr(self.zero_loss_ratio), self.batch_size,
                repr(self.lrs["image"]), repr(self.lrs["cloud"]), repr(self.lrs["text"]), repr(self.lrs["mask"])]


@dataclass
class TrainResult:
    model: PlaceModel
    log: list[EpochRecord]

    def log_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for rec in self.log:
            writer.writerow(rec.row())
        return buf.getvalue()


def read_log_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and tuple(rows[0].keys()) != LOG_COLUMNS:
        raise DataError(f"unexpected log columns {tuple(rows[0].keys())}")
    return rows


def check_mineable(positions: np.ndarray, r_pos: float, r_neg: float) -> None:
    """Raise ConfigError unless some anchor has both a positive and a negative."""
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) < 3:
        raise ConfigError("training needs at least three samples to form a triplet")
    tree = cKDTree(positions)
    for i, j in sorted(tree.query_pairs(r_pos)):
        for a in (i, j):
            if np.sqrt(((positions - positions[a]) ** 2).sum(axis=1)).max() > r_neg:
                return
    raise ConfigError("training set can never form a triplet (no anchor with both a positive and a negative)")


class _Sampler:
    def __init__(self, table: FeatureTable, mode: str, rng: np.random.Generator, r_pos: float):
        self.mode = mode
        self.rng = rng
        self.n = len(table)
        self.r_pos = r_pos
        self.positions = table.positions
        groups: dict[int, list[int]] = {}
        for i, place in enumerate(table.places):
            groups.setdefault(int(place), []).append(i)
        self.groups = [np.array(v) for _, v in sorted(groups.items())]

    def epoch(self, batch_size: int) -> list[np.ndarray]:
        if self.mode == "pairs":
            return self._pairs(batch_size)
        return self._uniform(batch_size)

    def _pairs(self, batch_size: int) -> list[np.ndarray]:
        per_batch = max(2, (batch_size + 1) // 2)
        order = self.rng.permutation(len(self.groups))
        batches = []
        for start in range(0, len(order), per_batch):
            chunk = order[start : start + per_batch]
            if len(chunk) < 2:
                break
            idx = []
            for g in chunk:
                members = self.groups[g]
                take_n = min(2, len(members))
                idx.extend(self.rng.choice(members, size=take_n, replace=False).tolist())
            batches.append(np.array(idx[:batch_size]))
        return batches

    def _has_positive(self, idx: np.ndarray) -> bool:
        pos = self.positions[idx]
        diff = pos[:, None, :] - pos[None, :, :]
        close = (diff * diff).sum(axis=-1) <= self.r_pos ** 2
        np.fill_diagonal(close, False)
        return bool(close.any())

    def _uniform(self, batch_size: int) -> list[np.ndarray]:
        b = min(batch_size, self.n)
        batches = []
        for _ in range(max(1, self.n // b)):
            for _attempt in range(10):
                idx = self.rng.choice(self.n, size=b, replace=False)
                if self._has_positive(idx):
                    break
            batches.append(idx)
        return batches


def train(table: FeatureTable, model_config: ModelConfig, config: TrainConfig, seed: int,
          model: PlaceModel | None = None) -> TrainResult:
    """Train a PlaceModel on a preprocessed table. Deterministic given ``seed``."""
    if len(table) == 0:
        raise ConfigError("empty training set")
    check_mineable(table.positions, config.r_pos, config.r_neg)
    dtype = np.float32 if config.dtype == "float32" else np.float64
    loss_cfg = TripletLossConfig(config.margin)
    schedule = config.schedule()
    with precision(dtype):
        if model is None:
            model = PlaceModel(model_config, np.random.default_rng([seed, 0]))
        groups = model.param_groups()
        optim = Adam(groups, {name: schedule.rate(name, 1) for name in groups})
        sampler = _Sampler(table, config.sampler, np.random.default_rng([seed, 1]), config.r_pos)
        sizer = BatchSizer(config.initial_batch, config.initial_batch, config.batch_growth, config.max_batch,
                           config.zero_loss_threshold)
        log = []
        for epoch in range(1, config.epochs + 1):
            lrs = {name: schedule.rate(name, epoch) for name in DEFAULT_LRS}
            for name in groups:
                optim.set_lr(name, lrs[name])
            loss_sum, n_triplets, n_zero = 0.0, 0, 0
            for idx in sampler.epoch(sizer.current):
                desc = model(table.batch(idx, model_config.modalities))
                mask = build_pair_mask(table.positions[idx], config.r_pos, config.r_neg)
                triplets = batch_hard_mine(desc.data, mask)
                if not triplets:
                    continue
                a, p, n = (np.array(t) for t in zip(*triplets))
                losses = triplet_margin_loss(take(desc, a), take(desc, p), take(desc, n), loss_cfg)
                loss = losses.mean()
                optim.zero_grad()
                loss.backward()
                optim.step()
                loss_sum += float(losses.data.astype(np.float64).sum())
                n_triplets += len(triplets)
                n_zero += int((losses.data == 0).sum())
            ratio = n_zero / n_triplets if n_triplets else 1.0
            mean_loss = loss_sum / n_triplets if n_triplets else 0.0
            log.append(EpochRecord(epoch, mean_loss, ratio, sizer.current, lrs))
            sizer = update_batch_size(sizer, ratio)
    return TrainResult(model, log)

