"""IMG1 rasters, PCD1 point clouds, and the CSV manifest that ties samples to payload files."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np
import yaml
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from placerec.errors import DataError
from placerec.numcore.serialize import expect_magic, read_f64, read_u64, write_f64, write_u64
from placerec.synthdata import vocab
from placerec.synthdata.world import Dataset, PlaceSample

IMG_MAGIC = b"IMG1"
PCD_MAGIC = b"PCD1"
MANIFEST = "manifest.csv"
SIDECAR = "dataset.yaml"
REQUIRED_COLUMNS = ("id", "traversal", "x", "y")
PAYLOAD_COLUMNS = ("cloud", "images", "masks", "texts")


def save_raster(path, raster: np.ndarray) -> None:
    arr = np.asarray(raster)
    if arr.dtype != np.uint8:
        raise DataError("IMG1 rasters hold 8-bit values")
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise DataError(f"raster must be (H, W) or (H, W, C), got {arr.shape}")
    buf = io.BytesIO()
    buf.write(IMG_MAGIC)
    for extent in arr.shape:
        write_u64(buf, extent)
    buf.write(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_raster(path) -> np.ndarray:
    """(H, W, C) uint8; single-channel rasters keep their channel axis."""
    raw = _read(path)
    fh = io.BytesIO(raw)
    expect_magic(fh, IMG_MAGIC, path)
    h, w, c = read_u64(fh), read_u64(fh), read_u64(fh)
    body = fh.read()
    if len(body) != h * w * c:
        raise DataError(f"{path}: expected {h * w * c} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).copy()


def save_cloud(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DataError(f"point cloud must be (N, 3), got {pts.shape}")
    buf = io.BytesIO()
    buf.write(PCD_MAGIC)
    write_u64(buf, len(pts))
    write_f64(buf, pts)
    Path(path).write_bytes(buf.getvalue())


def load_cloud(path) -> np.ndarray:
    raw = _read(path)
    fh = io.BytesIO(raw)
    expect_magic(fh, PCD_MAGIC, path)
    n = read_u64(fh)
    pts = read_f64(fh, 3 * n).reshape(n, 3)
    if fh.tell() != len(raw):
        raise DataError(f"{path}: trailing bytes after {n} points")
    return pts


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing payload file: {path}") from None


def export_dataset(dataset: Dataset, out_dir) -> Path:
    """Write every payload plus ``manifest.csv`` and ``dataset.yaml`` under ``out_dir``."""
    out = Path(out_dir)
    for sub in ("images", "masks", "clouds", "texts"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rows = []
    for s in dataset:
        imgs, masks = [], []
        for k, (img, mask) in enumerate(zip(s.images, s.masks)):
            imgs.append(f"images/{s.id}_c{k}.img")
            masks.append(f"masks/{s.id}_c{k}.img")
            save_raster(out / imgs[-1], img)
            save_raster(out / masks[-1], mask)
        cloud = f"clouds/{s.id}.pcd"
        save_cloud(out / cloud, s.cloud)
        text = f"texts/{s.id}.txt"
        (out / text).write_text("".join(t + "\n" for t in s.texts), encoding="utf-8")
        rows.append([s.id, s.traversal, repr(float(s.position[0])), repr(float(s.position[1])), s.place, s.split,
                     cloud, ";".join(imgs), ";".join(masks), text])
    with open(out / MANIFEST, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REQUIRED_COLUMNS + ("place", "split") + PAYLOAD_COLUMNS)
        writer.writerows(rows)
    meta = {"cameras": dataset.cameras, "num_mask_classes": dataset.num_mask_classes}
    (out / SIDECAR).write_text(yaml.safe_dump(meta, sort_keys=True), encoding="utf-8")
    return out / MANIFEST


def _load_payload(root: Path, row: dict, cameras: int) -> dict:
    out: dict = {}
    if row.get("images"):
        out["images"] = [load_raster(root / p) for p in row["images"].split(";")]
    if row.get("masks"):
        out["masks"] = [load_raster(root / p)[..., 0] for p in row["masks"].split(";")]
    if row.get("cloud"):
        out["cloud"] = load_cloud(root / row["cloud"])
    if row.get("texts"):
        path = root / row["texts"]
        try:
            content = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise DataError(f"missing payload file: {path}") from None
        lines = content.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if len(lines) != cameras:
            raise DataError(f"{path}: expected {cameras} text lines, found {len(lines)}")
        out["texts"] = lines
    for key in PAYLOAD_COLUMNS:
        if key != "cloud" and key in out and len(out[key]) != cameras:
            raise DataError(f"sample {row['id']}: {key} has {len(out[key])} entries, expected {cameras}")
    return out


def _derive_places(positions: np.ndarray, radius: float = 10.0) -> np.ndarray:
    tree = cKDTree(positions)
    graph = tree.sparse_distance_matrix(tree, radius)
    _, labels = connected_components(graph, directed=False)
    return labels


def load_real_dataset(manifest, on_missing: str = "error", require=PAYLOAD_COLUMNS,
                      num_mask_classes: int | None = None) -> Dataset:
    """Load a manifest; payload files are checked now and read on first access.

    ``on_missing`` decides what happens to rows lacking a required modality or
    referencing an absent file: "error" raises DataError naming the path,
    "skip" drops the row.
    """
    if on_missing not in ("error", "skip"):
        raise ValueError("on_missing must be 'error' or 'skip'")
    manifest = Path(manifest)
    root = manifest.parent
    try:
        text = manifest.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"missing manifest: {manifest}") from None
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise DataError(f"{manifest}: empty manifest")
    absent = [c for c in REQUIRED_COLUMNS if c not in reader.fieldnames]
    if absent:
        raise DataError(f"{manifest}: missing columns {absent}")
    meta = {}
    if (root / SIDECAR).exists():
        meta = yaml.safe_load((root / SIDECAR).read_text(encoding="utf-8")) or {}
    rows, cameras = [], meta.get("cameras")
    for lineno, row in enumerate(reader, start=2):
        try:
            traversal = int(row["traversal"])
            xy = (float(row["x"]), float(row["y"]))
        except (TypeError, ValueError):
            raise DataError(f"{manifest}:{lineno}: malformed row {row}") from None
        if not row["id"]:
            raise DataError(f"{manifest}:{lineno}: empty id")
        problem = None
        for col in require:
            if not row.get(col):
                problem = f"{manifest}:{lineno}: sample {row['id']} lacks modality {col!r}"
                break
            for p in row[col].split(";"):
                if not (root / p).is_file():
                    problem = f"{manifest}:{lineno}: missing payload file {root / p}"
                    break
            if problem:
                break
        if problem:
            if on_missing == "error":
                raise DataError(problem)
            continue
        if cameras is None:
            for col in ("images", "masks"):
                if row.get(col):
                    cameras = len(row[col].split(";"))
                    break
        rows.append((row, traversal, xy))
    if not rows:
        raise DataError(f"{manifest}: manifest holds no usable samples")
    cameras = int(cameras or 1)
    positions = np.array([xy for _, _, xy in rows])
    if all(r.get("place") not in (None, "") for r, _, _ in rows):
        places = [int(r["place"]) for r, _, _ in rows]
    else:
        places = _derive_places(positions).tolist()
    samples = [
        PlaceSample(row["id"], place, trav, xy, row.get("split") or "",
                    loader=(lambda r=row: _load_payload(root, r, cameras)))
        for (row, trav, xy), place in zip(rows, places)
    ]
    classes = num_mask_classes or meta.get("num_mask_classes") or vocab.NUM_CLASSES
    return Dataset(samples, cameras, int(classes))
