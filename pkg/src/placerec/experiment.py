"""Config-driven experiments: data -> features -> training -> database -> metrics."""

from __future__ import annotations

import copy
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from placerec.encoders import (
    BevConfig,
    PcaModel,
    TfidfModel,
    fit_pca,
    fit_tfidf,
    image_to_input,
    mask_to_input,
    project_pca,
    tfidf_matrix,
    voxelize_bev,
)
from placerec.errors import ConfigError, DataError
from placerec.retrieval import DescriptorDatabase, EvalProtocol, Metrics, build_database, evaluate
from placerec.synthdata import Dataset, NoiseConfig, WorldConfig, generate_world, load_real_dataset, split_database_queries
from placerec.training import (
    MODALITIES,
    FeatureTable,
    ModelConfig,
    PlaceModel,
    TrainConfig,
    TrainResult,
    embed,
    train,
)

CAMERA_SETS = ("F", "F+B", "L+R", "A")
_TERM = re.compile(r"([LIST])(?:\(([^)]*)\))?")


def camera_indices(name: str, cameras: int) -> tuple[int, ...]:
    """Camera indices for a named set; F=0, L=1, B=2, R=3 on a four-camera rig."""
    if name == "A":
        return tuple(range(cameras))
    if name == "F":
        return (0,)
    if cameras != 4 and name in ("F+B", "L+R"):
        raise ConfigError(f"camera set {name!r} needs a four-camera rig, world has {cameras}")
    if name == "F+B":
        return (0, 2)
    if name == "L+R":
        return (1, 3)
    raise ConfigError(f"unknown camera set {name!r}; expected one of {CAMERA_SETS}")


def parse_modalities(spec: str, default_cameras: str = "A") -> tuple[tuple[str, ...], str]:
    """'L+I(A)+S(F+B)' style notation -> (branch names, camera set name)."""
    text = spec.replace(" ", "")
    pos, terms = 0, []
    while pos < len(text):
        m = _TERM.match(text, pos)
        if not m:
            raise ConfigError(f"cannot parse modality notation {spec!r} at {text[pos:]!r}")
        terms.append((m.group(1), m.group(2)))
        pos = m.end()
        if pos < len(text):
            if text[pos] != "+":
                raise ConfigError(f"expected '+' in {spec!r} at {text[pos:]!r}")
            pos += 1
            if pos == len(text):
                raise ConfigError(f"trailing '+' in {spec!r}")
    if not terms:
        raise ConfigError("empty modality notation")
    codes = [t[0] for t in terms]
    if len(set(codes)) != len(codes):
        raise ConfigError(f"repeated modality in {spec!r}")
    sets = set()
    for code, cams in terms:
        if code == "L" and cams:
            raise ConfigError("the point cloud modality takes no camera set")
        if code != "L":
            cams = cams or default_cameras
            if cams not in CAMERA_SETS:
                raise ConfigError(f"unknown camera set {cams!r}; expected one of {CAMERA_SETS}")
            sets.add(cams)
    if len(sets) > 1:
        raise ConfigError(f"all camera-borne modalities must share one camera set, got {sorted(sets)}")
    return tuple(MODALITIES[c] for c in codes), (sets.pop() if sets else default_cameras)


def format_modalities(branches, camera_set: str) -> str:
    codes = {v: k for k, v in MODALITIES.items()}
    return "+".join(codes[b] if b == "cloud" else f"{codes[b]}({camera_set})" for b in branches)


# -- configuration --------------------------------------------------------------------


@dataclass
class EvalConfig:
    split_ratio: float = 0.5
    distance_threshold: float = 25.0
    top_percent: float = 1.0


@dataclass
class ExperimentConfig:
    modalities: str = "L+I(A)"
    fusion: str = "add"
    seed: int = 0
    world_seed: int | None = None
    world: WorldConfig = field(default_factory=WorldConfig)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    manifest: str | None = None

    def model_config(self, cameras: int) -> ModelConfig:
        branches, cam_set = parse_modalities(self.modalities)
        kwargs = dict(self.model)
        try:
            if isinstance(kwargs.get("bev"), dict):
                kwargs["bev"] = BevConfig(**kwargs["bev"])
            return ModelConfig(modalities=branches, cameras=camera_indices(cam_set, cameras),
                               fusion=self.fusion, **kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad model section: {exc}") from None

    def world_config(self) -> WorldConfig:
        return dataclasses.replace(self.world, seed=self.seed if self.world_seed is None else self.world_seed)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["world"]["vocabulary"] = list(d["world"]["vocabulary"])
        return _plain(d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {where!r}: {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where!r} section: {exc}") from None


def config_from_dict(data: dict | None) -> ExperimentConfig:
    data = copy.deepcopy(data or {})
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {unknown}")
    world = data.pop("world", None) or {}
    if not isinstance(world, dict):
        raise ConfigError("section 'world' must be a mapping")
    noise = _build(NoiseConfig, world.pop("noise", None), "world.noise")
    world_cfg = _build(WorldConfig, {**world, "noise": noise}, "world")
    train_cfg = _build(TrainConfig, data.pop("train", None), "train")
    eval_cfg = _build(EvalConfig, data.pop("eval", None), "eval")
    model = data.pop("model", None) or {}
    if not isinstance(model, dict):
        raise ConfigError("section 'model' must be a mapping")
    cfg = ExperimentConfig(world=world_cfg, train=train_cfg, eval=eval_cfg, model=model, **data)
    parse_modalities(cfg.modalities)
    cfg.model_config(cfg.world.cameras)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


# -- features -----------------------------------------------------------------------


@dataclass
class TextModels:
    tfidf: TfidfModel
    pca: PcaModel


def fit_text_models(dataset: Dataset, k: int = 128) -> TextModels:
    docs = [t for s in dataset for t in s.texts]
    tfidf = fit_tfidf(docs)
    return TextModels(tfidf, fit_pca(tfidf_matrix(tfidf, docs), k))


def build_table(dataset: Dataset, config: ModelConfig, text: TextModels | None = None) -> FeatureTable:
    """Model-ready inputs for the configured modalities and cameras."""
    if len(dataset) == 0:
        raise DataError("no samples to featurize")
    cams = list(config.cameras)
    if any(c >= dataset.cameras for c in cams):
        raise ConfigError(f"camera indices {cams} exceed the dataset's {dataset.cameras} cameras")
    inputs: dict[str, np.ndarray] = {}
    samples = dataset.samples
    for m in config.modalities:
        if m == "cloud":
            bev = config.bev
            grids = [voxelize_bev(s.cloud, bev.bounds, bev.resolution, bev.saturation_count) for s in samples]
            inputs[m] = np.stack(grids).transpose(0, 2, 3, 1).astype(np.float32)
        elif m == "image":
            inputs[m] = np.stack([[image_to_input(s.images[c]) for c in cams] for s in samples]).astype(np.float32)
        elif m == "mask":
            n_cls = dataset.num_mask_classes
            inputs[m] = np.stack([[mask_to_input(s.masks[c], n_cls) for c in cams] for s in samples]).astype(np.float32)
        else:
            if text is None:
                raise ConfigError("text modality needs fitted TF-IDF and PCA models")
            feats = []
            for s in samples:
                docs = [s.texts[c] for c in cams]
                feats.append(project_pca(text.pca, tfidf_matrix(text.tfidf, docs)))
            inputs[m] = np.stack(feats)
    return FeatureTable([s.id for s in samples], np.stack([s.position for s in samples]),
                        np.array([s.place for s in samples]), inputs)


# -- runs ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    train: TrainResult
    text: TextModels | None
    database: DescriptorDatabase
    metrics: Metrics
    query_ids: list[str]


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.manifest:
        return load_real_dataset(cfg.manifest)
    return generate_world(cfg.world_config())


def train_split(dataset: Dataset) -> tuple[Dataset, Dataset]:
    tr, te = dataset.split("train"), dataset.split("test")
    if len(tr) == 0 or len(te) == 0:
        raise DataError("dataset needs samples labelled 'train' and 'test' in its split column")
    return tr, te


def fit_model(cfg: ExperimentConfig, dataset: Dataset) -> tuple[TrainResult, TextModels | None]:
    model_cfg = cfg.model_config(dataset.cameras)
    tr, _ = train_split(dataset)
    text = fit_text_models(tr, model_cfg.text_in_dim) if "text" in model_cfg.modalities else None
    table = build_table(tr, model_cfg, text)
    return train(table, model_cfg, cfg.train, cfg.seed), text


def evaluate_model(cfg: ExperimentConfig, dataset: Dataset, model: PlaceModel, text: TextModels | None):
    _, te = train_split(dataset)
    db_set, q_set = split_database_queries(te, cfg.eval.split_ratio)
    dtype = np.float32 if cfg.train.dtype == "float32" else np.float64
    db_table = build_table(db_set, model.config, text)
    q_table = build_table(q_set, model.config, text)
    db = build_database(embed(model, db_table, dtype=dtype), db_table.positions, db_table.ids, model.config.layout)
    protocol = EvalProtocol(cfg.eval.distance_threshold, cfg.eval.top_percent)
    metrics = evaluate(db, embed(model, q_table, dtype=dtype), q_table.positions, protocol)
    return db, metrics, q_table


def run_experiment(cfg: ExperimentConfig, dataset: Dataset | None = None) -> ExperimentResult:
    dataset = dataset if dataset is not None else load_dataset(cfg)
    result, text = fit_model(cfg, dataset)
    db, metrics, q_table = evaluate_model(cfg, dataset, result.model, text)
    return ExperimentResult(cfg, result, text, db, metrics, q_table.ids)
