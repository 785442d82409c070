"""Seeded synthetic multimodal world.

Each place is a static scene: a handful of landmarks (colored, classed, named
boxes) scattered around a reference pose, a static ground scatter, and a small
latent appearance vector that tints the background. A traversal revisits every
place with pose jitter, landmark dropout, transient objects and per-modality
sensor noise. Cameras are azimuth slices of the same 360 degree scene, so
rotating the vehicle by a multiple of 360/K permutes camera payloads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Iterator, Sequence

import numpy as np

from placerec.errors import ConfigError, DataError
from placerec.synthdata import vocab

# rng stream tags; keep stable, they define the dataset bytes
_WORLD, _SAMPLE = 0, 1
_POSE, _IMAGE, _MASK, _CLOUD, _TEXT = 0, 1, 2, 3, 4


@dataclass
class NoiseConfig:
    """Per-traversal perturbations. Every term is multiplied by ``scale``."""

    scale: float = 1.0
    position: float = 2.0          # m, std of pose offset per axis
    heading: float = 4.0           # deg, std of heading jitter
    latent: float = 0.3            # std of latent appearance drift
    landmark_dropout: float = 0.15 # probability a landmark is unobserved
    transients: float = 1.5        # mean count of transient objects
    image_pixel: float = 12.0      # 8-bit units
    illumination: float = 0.12     # std of per-channel gain
    mask_flip: float = 0.05        # probability a pixel gets a random class
    cloud_jitter: float = 0.15     # m
    cloud_dropout: float = 0.2     # fraction of points removed
    cloud_clutter: float = 60.0    # mean count of random clutter points
    text_dropout: float = 0.5      # probability a landmark mention is dropped
    text_distractors: float = 1.0  # mean count of random extra mentions

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"noise.{f.name} must be nonnegative")
        for name in ("landmark_dropout", "mask_flip", "cloud_dropout", "text_dropout"):
            if getattr(self, name) * self.scale > 1.0:
                raise ConfigError(f"noise.{name} x scale must not exceed 1")

    def level(self, name: str) -> float:
        return getattr(self, name) * self.scale


@dataclass
class WorldConfig:
    num_places: int = 400
    area_side: float = 2000.0
    min_separation: float = 60.0
    traversals: int = 3
    cameras: int = 4
    landmarks: int = 10
    landmark_range: tuple[float, float] = (5.0, 18.0)
    image_size: tuple[int, int] = (24, 32)
    ground_points: int = 300
    cloud_radius: float = 20.0
    train_fraction: float = 0.75
    heading_mode: str = "fixed"
    vocabulary: tuple[str, ...] = vocab.NOUNS
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.noise, dict):
            self.noise = NoiseConfig(**self.noise)
        self.vocabulary = tuple(self.vocabulary)
        self.landmark_range = tuple(float(v) for v in self.landmark_range)
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.num_places < 2:
            raise ConfigError("num_places must be >= 2")
        if self.traversals < 2:
            raise ConfigError("traversals must be >= 2 (one database, at least one query)")
        if not 1 <= self.cameras <= 5:
            raise ConfigError("cameras must lie in 1..5")
        if self.landmarks < 1:
            raise ConfigError("landmarks must be >= 1")
        lo, hi = self.landmark_range
        if not 0 < lo < hi < self.cloud_radius:
            raise ConfigError("landmark_range must satisfy 0 < lo < hi < cloud_radius")
        if min(self.image_size) < 8:
            raise ConfigError("image_size must be at least 8x8")
        if not 0.0 <= self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in [0, 1)")
        if self.heading_mode not in ("fixed", "rotate"):
            raise ConfigError("heading_mode must be 'fixed' or 'rotate'")
        if len(self.vocabulary) < 2 or len(set(self.vocabulary)) != len(self.vocabulary):
            raise ConfigError("vocabulary must hold at least two distinct words")
        if any(not w.isalnum() or w.lower() != w for w in self.vocabulary):
            raise ConfigError("vocabulary words must be lowercase alphanumeric tokens")
        if self.min_separation <= 0 or self.area_side <= self.min_separation:
            raise ConfigError("area_side must exceed min_separation > 0")

    @property
    def fov(self) -> float:
        return 360.0 / self.cameras


@dataclass(frozen=True)
class Landmark:
    offset: tuple[float, float]   # world-frame offset from the place reference point, m
    width: float
    height: float
    color: int
    noun: int


@dataclass
class Place:
    index: int
    position: np.ndarray
    heading: float
    latent: np.ndarray
    landmarks: tuple[Landmark, ...]
    ground: np.ndarray            # (G, 3) static ground scatter, world-frame offsets
    split: str


class PlaceSample:
    """One observation of a place. Payloads are produced on first access and cached."""

    def __init__(self, id: str, place: int, traversal: int, position, split: str = "",
                 heading: float | None = None, latent: np.ndarray | None = None,
                 loader: Callable[[], dict] | None = None, payload: dict | None = None):
        self.id = id
        self.place = int(place)
        self.traversal = int(traversal)
        self.position = np.asarray(position, dtype=np.float64).reshape(2)
        self.split = split
        self.heading = heading
        self.latent = latent
        self._loader = loader
        self._payload = payload

    def _load(self) -> dict:
        if self._payload is None:
            if self._loader is None:
                raise DataError(f"sample {self.id} has no payload source")
            self._payload = self._loader()
        return self._payload

    @property
    def images(self) -> list[np.ndarray]:
        return self._load()["images"]

    @property
    def masks(self) -> list[np.ndarray]:
        return self._load()["masks"]

    @property
    def cloud(self) -> np.ndarray:
        return self._load()["cloud"]

    @property
    def texts(self) -> list[str]:
        return self._load()["texts"]

    def __repr__(self) -> str:
        return f"PlaceSample({self.id!r}, place={self.place}, traversal={self.traversal})"


class Dataset:
    def __init__(self, samples: Sequence[PlaceSample], cameras: int, num_mask_classes: int = vocab.NUM_CLASSES,
                 config: WorldConfig | None = None):
        ids = [s.id for s in samples]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate sample ids")
        self.samples = list(samples)
        self.cameras = int(cameras)
        self.num_mask_classes = int(num_mask_classes)
        self.config = config

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[PlaceSample]:
        return iter(self.samples)

    def __getitem__(self, i) -> PlaceSample:
        return self.samples[i]

    def traversals(self) -> list[int]:
        return sorted({s.traversal for s in self.samples})

    def select(self, pred: Callable[[PlaceSample], bool]) -> "Dataset":
        return Dataset([s for s in self.samples if pred(s)], self.cameras, self.num_mask_classes, self.config)

    def split(self, name: str) -> "Dataset":
        return self.select(lambda s: s.split == name)


# -- generation ---------------------------------------------------------------------


def _sample_positions(cfg: WorldConfig, rng: np.random.Generator) -> np.ndarray:
    """Dart throwing with a minimum separation."""
    pts: list[np.ndarray] = []
    attempts = 0
    limit = 200 * cfg.num_places
    min_sq = cfg.min_separation ** 2
    while len(pts) < cfg.num_places:
        attempts += 1
        if attempts > limit:
            raise ConfigError(
                f"could not place {cfg.num_places} places {cfg.min_separation} m apart in a "
                f"{cfg.area_side} m square; enlarge area_side")
        cand = rng.uniform(0.0, cfg.area_side, size=2)
        if all(((cand - p) ** 2).sum() >= min_sq for p in pts):
            pts.append(cand)
    return np.array(pts)


def _make_places(cfg: WorldConfig) -> list[Place]:
    rng = np.random.default_rng([cfg.seed, _WORLD])
    positions = _sample_positions(cfg, rng)
    n_train = int(math.floor(cfg.train_fraction * cfg.num_places + 0.5))
    train_set = set(rng.permutation(cfg.num_places)[:n_train].tolist())
    lo, hi = cfg.landmark_range
    places = []
    for i in range(cfg.num_places):
        heading = float(rng.uniform(0.0, 360.0))
        latent = rng.normal(size=6)
        lms = []
        for _ in range(cfg.landmarks):
            theta = rng.uniform(0.0, 2 * math.pi)
            r = rng.uniform(lo, hi)
            lms.append(Landmark((float(r * math.cos(theta)), float(r * math.sin(theta))),
                                float(rng.uniform(1.5, 6.0)), float(rng.uniform(2.0, 10.0)),
                                int(rng.integers(len(vocab.COLOR_NAMES))), int(rng.integers(len(cfg.vocabulary)))))
        radius = cfg.cloud_radius * np.sqrt(rng.uniform(size=cfg.ground_points))
        ang = rng.uniform(0.0, 2 * math.pi, size=cfg.ground_points)
        ground = np.stack([radius * np.cos(ang), radius * np.sin(ang), rng.normal(0.0, 0.05, cfg.ground_points)], 1)
        places.append(Place(i, positions[i], heading, latent, tuple(lms), ground,
                            "train" if i in train_set else "test"))
    return places


@dataclass
class _Object:
    x: float      # vehicle frame, forward
    y: float      # vehicle frame, left
    width: float
    height: float
    rgb: tuple
    cls: int
    words: tuple[str, ...]
    shape_key: tuple | None = None   # static structure: point scatter drawn from this stream
    heading: float = 0.0             # vehicle heading, rad


def _observe(cfg: WorldConfig, place: Place, traversal: int):
    """Pose, latent and visible objects of one sample, all in the vehicle frame."""
    noise = cfg.noise
    rng = np.random.default_rng([cfg.seed, _SAMPLE, place.index, traversal, _POSE])
    offset = rng.normal(0.0, noise.level("position"), size=2)
    heading = place.heading + rng.normal(0.0, noise.level("heading"))
    if cfg.heading_mode == "rotate":
        heading += cfg.fov * int(rng.integers(cfg.cameras))
    latent = place.latent + rng.normal(0.0, noise.level("latent"), size=place.latent.shape)
    keep = rng.uniform(size=len(place.landmarks)) >= noise.level("landmark_dropout")
    n_transient = int(rng.poisson(noise.level("transients")))
    c, s = math.cos(math.radians(heading)), math.sin(math.radians(heading))

    def to_vehicle(dx, dy):
        dx, dy = dx - offset[0], dy - offset[1]
        return c * dx + s * dy, -s * dx + c * dy

    objects = []
    for j, (lm, k) in enumerate(zip(place.landmarks, keep)):
        if not k:
            continue
        x, y = to_vehicle(*lm.offset)
        objects.append(_Object(x, y, lm.width, lm.height, vocab.PALETTE[vocab.COLOR_NAMES[lm.color]],
                               vocab.noun_class(lm.noun), (vocab.COLOR_NAMES[lm.color], cfg.vocabulary[lm.noun]),
                               (cfg.seed, _WORLD, place.index, j), math.radians(heading)))
    for _ in range(n_transient):
        theta = rng.uniform(0.0, 2 * math.pi)
        r = rng.uniform(4.0, 15.0)
        color = vocab.COLOR_NAMES[int(rng.integers(len(vocab.COLOR_NAMES)))]
        objects.append(_Object(r * math.cos(theta), r * math.sin(theta), float(rng.uniform(1.0, 2.5)),
                               float(rng.uniform(1.0, 2.0)), vocab.PALETTE[color], vocab.TRANSIENT_CLASS, ()))
    position = place.position + offset
    ground = np.empty_like(place.ground)
    ground[:, 0], ground[:, 1] = to_vehicle(place.ground[:, 0], place.ground[:, 1])
    ground[:, 2] = place.ground[:, 2]
    return position, heading, latent, objects, ground


def _camera_view(cfg: WorldConfig, objects: list[_Object], cam: int):
    """Objects inside camera ``cam``'s field of view, far to near, with pixel extents."""
    h, w = cfg.image_size
    half = math.radians(cfg.fov) / 2.0
    focal = (w / 2.0) / half
    center = math.radians(cam * cfg.fov)
    horizon = h / 2.0
    out = []
    for ob in objects:
        rng_m = math.hypot(ob.x, ob.y)
        if rng_m < 1e-6:
            continue
        rel = (math.atan2(ob.y, ob.x) - center + math.pi) % (2 * math.pi) - math.pi
        half_w = math.atan2(ob.width / 2.0, rng_m)
        if abs(rel) - half_w >= half:
            continue
        u0 = (w / 2.0) - (rel + half_w) * focal
        u1 = (w / 2.0) - (rel - half_w) * focal
        bottom = horizon + focal * 1.6 / rng_m
        top = bottom - focal * ob.height / rng_m
        out.append((rng_m, ob, u0, u1, top, bottom, rel))
    out.sort(key=lambda t: -t[0])
    return out


def _span(a: float, b: float, n: int) -> slice:
    lo = int(min(max(math.floor(a + 0.5), 0), n))
    hi = int(min(max(math.floor(b + 0.5), 0), n))
    if hi <= lo and 0 <= a < n:
        lo, hi = int(a), int(a) + 1
    return slice(lo, hi)


def _background(latent: np.ndarray):
    tint = 30.0 * np.tanh(latent)
    sky = np.clip(np.array([150.0, 180.0, 215.0]) + tint[:3], 0, 255)
    ground = np.clip(np.array([105.0, 100.0, 95.0]) + tint[3:6], 0, 255)
    return sky, ground


def _render_camera(cfg: WorldConfig, view, latent, rng_img, rng_mask):
    h, w = cfg.image_size
    noise = cfg.noise
    sky, ground = _background(latent)
    img = np.empty((h, w, 3))
    mask = np.empty((h, w), dtype=np.uint8)
    hz = h // 2
    img[:hz], img[hz:] = sky, ground
    mask[:hz], mask[hz:] = vocab.SKY_CLASS, vocab.GROUND_CLASS
    for _, ob, u0, u1, top, bottom, _ in view:
        cols, rows = _span(u0, u1, w), _span(top, bottom, h)
        img[rows, cols] = ob.rgb
        mask[rows, cols] = ob.cls
    gain = np.clip(1.0 + rng_img.normal(0.0, noise.level("illumination"), size=3), 0.3, 1.7)
    img = img * gain + rng_img.normal(0.0, noise.level("image_pixel"), size=img.shape)
    img = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    flip = rng_mask.uniform(size=mask.shape) < noise.level("mask_flip")
    if flip.any():
        mask[flip] = rng_mask.integers(vocab.NUM_CLASSES, size=int(flip.sum()))
    return img, mask


def _render_cloud(cfg: WorldConfig, objects: list[_Object], ground: np.ndarray, rng: np.random.Generator):
    noise = cfg.noise
    parts = [ground]
    for ob in objects:
        n = int(20 + 8 * ob.width * ob.height / 4.0)
        src = rng if ob.shape_key is None else np.random.default_rng(list(ob.shape_key))
        # footprint is axis-aligned in the world frame, then rotated into the vehicle frame
        fx, fy = (src.uniform(-0.5, 0.5, size=(2, n)) * ob.width)
        c, s = math.cos(ob.heading), math.sin(ob.heading)
        local = np.stack([ob.x + c * fx + s * fy, ob.y - s * fx + c * fy, src.uniform(0.0, ob.height, size=n)], 1)
        parts.append(local)
    n_clutter = int(rng.poisson(noise.level("cloud_clutter")))
    if n_clutter:
        r = cfg.cloud_radius * np.sqrt(rng.uniform(size=n_clutter))
        a = rng.uniform(0.0, 2 * math.pi, size=n_clutter)
        parts.append(np.stack([r * np.cos(a), r * np.sin(a), rng.uniform(0.0, 3.0, n_clutter)], 1))
    pts = np.concatenate(parts)
    pts = pts + rng.normal(0.0, noise.level("cloud_jitter"), size=pts.shape)
    keep = rng.uniform(size=len(pts)) >= noise.level("cloud_dropout")
    if keep.sum() < 1:
        keep[0] = True
    return pts[keep]


def _render_texts(cfg: WorldConfig, views, rng: np.random.Generator) -> list[str]:
    noise = cfg.noise
    texts = []
    for view in views:
        phrases = []
        # nearest first
        for _, ob, *_ in sorted(view, key=lambda t: t[0]):
            if ob.words and rng.uniform() >= noise.level("text_dropout"):
                phrases.append(" ".join(ob.words))
        for _ in range(int(rng.poisson(noise.level("text_distractors")))):
            color = vocab.COLOR_NAMES[int(rng.integers(len(vocab.COLOR_NAMES)))]
            noun = cfg.vocabulary[int(rng.integers(len(cfg.vocabulary)))]
            phrases.insert(int(rng.integers(len(phrases) + 1)), f"{color} {noun}")
        texts.append(", ".join(phrases))
    return texts


def render_sample(cfg: WorldConfig, place: Place, traversal: int) -> dict:
    _, _, latent, objects, ground = _observe(cfg, place, traversal)
    base = [cfg.seed, _SAMPLE, place.index, traversal]
    rng_img = np.random.default_rng(base + [_IMAGE])
    rng_mask = np.random.default_rng(base + [_MASK])
    views = [_camera_view(cfg, objects, k) for k in range(cfg.cameras)]
    images, masks = [], []
    for view in views:
        img, mask = _render_camera(cfg, view, latent, rng_img, rng_mask)
        images.append(img)
        masks.append(mask)
    cloud = _render_cloud(cfg, objects, ground, np.random.default_rng(base + [_CLOUD]))
    texts = _render_texts(cfg, views, np.random.default_rng(base + [_TEXT]))
    return {"images": images, "masks": masks, "cloud": cloud, "texts": texts}


def sample_id(place: int, traversal: int) -> str:
    return f"p{place:05d}_t{traversal:02d}"


def generate_world(config: WorldConfig) -> Dataset:
    """All traversals of every place; payloads render lazily and deterministically."""
    places = _make_places(config)
    samples = []
    for t in range(config.traversals):
        for place in places:
            position, heading, latent, _, _ = _observe(config, place, t)
            samples.append(PlaceSample(
                sample_id(place.index, t), place.index, t, position, place.split, heading, latent,
                loader=(lambda p=place, tt=t: render_sample(config, p, tt))))
    return Dataset(samples, config.cameras, vocab.NUM_CLASSES, config)


def with_noise(config: WorldConfig, **changes) -> WorldConfig:
    return replace(config, noise=replace(config.noise, **changes))


def split_database_queries(dataset: Dataset, ratio: float = 0.5) -> tuple[Dataset, Dataset]:
    """Partition by traversal: the first floor(ratio * T) traversals (at least one) form the database."""
    travs = dataset.traversals()
    if len(travs) < 2:
        raise DataError("database/query split needs at least two traversals")
    if not 0.0 < ratio < 1.0:
        raise ConfigError("split ratio must lie in (0, 1)")
    n_db = min(len(travs) - 1, max(1, int(math.floor(ratio * len(travs) + 1e-9))))
    db_set = set(travs[:n_db])
    return dataset.select(lambda s: s.traversal in db_set), dataset.select(lambda s: s.traversal not in db_set)
