"""Dataset ingestion, splitting, tiling, augmentation, and batch synthesis.

Datasets are directories of pre-decoded TAR0 images, one subdirectory per
class: ``root/<class_name>/<image>.tnsr`` holding H x W x 3 float values in
[0, 1].  Codec decoding is delegated to whatever external tool produced the
records.  The manifest is a ``path,label,split`` CSV with a per-class
stratified 4:1 train/val split, reproducible from its seed.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tario
from .errors import ConfigurationError

logger = logging.getLogger("fpnkit.data")

LUMA = np.array([0.299, 0.587, 0.114])


# ---------------------------------------------------------------------------
# manifest and split
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # "<class_name>/<image>.tnsr"
    label: int
    split: str  # "train" | "val"


@dataclass
class DatasetManifest:
    root: str
    class_names: List[str]
    entries: List[ManifestEntry]
    seed: Optional[int] = None

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split_entries(self, split: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def class_counts(self) -> List[Tuple[str, int, int]]:
        """Per class: (name, train count, val count)."""
        train = np.zeros(self.num_classes, dtype=int)
        val = np.zeros(self.num_classes, dtype=int)
        for e in self.entries:
            (train if e.split == "train" else val)[e.label] += 1
        return [(name, int(train[i]), int(val[i])) for i, name in enumerate(self.class_names)]


def _val_count(n: int) -> int:
    # 4:1 within rounding, never an empty val split for classes with >= 2 images
    return max(1, round(n / 5)) if n >= 2 else 0


def ingest(root, seed: int = 0, allow_single_image_classes: bool = False) -> DatasetManifest:
    root = Path(root)
    if not root.is_dir():
        raise ConfigurationError(f"dataset root {root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ConfigurationError(f"no class directories under {root}")
    rng = np.random.default_rng(seed)
    entries: List[ManifestEntry] = []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(f.name for f in class_dir.iterdir() if f.suffix == ".tnsr")
        if not files:
            raise ConfigurationError(f"class {class_dir.name!r} contains no .tnsr images")
        if len(files) < 2 and not allow_single_image_classes:
            raise ConfigurationError(
                f"class {class_dir.name!r} has a single image; "
                "pass allow_single_image_classes=True to keep it train-only"
            )
        val_indices = set(rng.permutation(len(files))[: _val_count(len(files))].tolist())
        for i, name in enumerate(files):
            entries.append(
                ManifestEntry(
                    path=f"{class_dir.name}/{name}",
                    label=label,
                    split="val" if i in val_indices else "train",
                )
            )
    return DatasetManifest(
        root=str(root), class_names=[d.name for d in class_dirs], entries=entries, seed=seed
    )


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["path", "label", "split"])
        for e in manifest.entries:
            writer.writerow([e.path, e.label, e.split])


def load_manifest(path, root) -> DatasetManifest:
    entries: List[ManifestEntry] = []
    names: Dict[int, str] = {}
    with open(path, newline="") as fp:
        reader = csv.reader(fp)
        header = next(reader)
        if header != ["path", "label", "split"]:
            raise ConfigurationError(f"unexpected manifest header {header}")
        for rel, label, split in reader:
            label = int(label)
            entries.append(ManifestEntry(rel, label, split))
            names.setdefault(label, rel.split("/", 1)[0])
    if names and sorted(names) != list(range(len(names))):
        raise ConfigurationError("manifest labels are not dense")
    class_names = [names[i] for i in sorted(names)]
    return DatasetManifest(root=str(root), class_names=class_names, entries=entries)


# ---------------------------------------------------------------------------
# tiny-dataset tiling
# ---------------------------------------------------------------------------


def luminance(img: np.ndarray) -> np.ndarray:
    return img @ LUMA


def tile_grid(h: int, w: int, tile: int) -> List[Tuple[int, int]]:
    """Top-left offsets of all non-overlapping full tiles; remainders drop."""
    return [(r * tile, c * tile) for r in range(h // tile) for c in range(w // tile)]


def border_luminance_mean(img: np.ndarray, border: int = 1) -> float:
    lum = luminance(img)
    h, w = lum.shape
    if h <= 2 * border or w <= 2 * border:
        return float(lum.mean())
    mask = np.zeros((h, w), dtype=bool)
    mask[:border, :] = mask[-border:, :] = True
    mask[:, :border] = mask[:, -border:] = True
    return float(lum[mask].mean())


def keep_tile(tile_img: np.ndarray, border_mean: float, v_min: float = 1e-3, delta: float = 0.02) -> bool:
    """Automated stand-ins for manual tile triage: drop near-uniform tiles
    (luminance variance below v_min) and tiles whose mean luminance sits
    within delta of the image's border mean (background proxy)."""
    lum = luminance(tile_img)
    if lum.var() < v_min:
        return False
    if abs(float(lum.mean()) - border_mean) <= delta:
        return False
    return True


@dataclass
class TinyReport:
    tile: int
    raw_tiles: int = 0
    kept_tiles: int = 0
    skipped_images: int = 0
    per_class_raw: Dict[str, int] = field(default_factory=dict)
    per_class_kept: Dict[str, int] = field(default_factory=dict)


def generate_tiny(
    src_root,
    dst_root,
    tile: int = 32,
    v_min: float = 1e-3,
    delta: float = 0.02,
    border: int = 1,
) -> TinyReport:
    """Cut every source image into non-overlapping tile x tile crops, filter,
    and write the survivors under the same class layout.

    The report carries both the raw grid count and the post-filter count.
    """
    src_root, dst_root = Path(src_root), Path(dst_root)
    class_dirs = sorted(d for d in src_root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ConfigurationError(f"no class directories under {src_root}")
    report = TinyReport(tile=tile)
    for class_dir in class_dirs:
        out_dir = dst_root / class_dir.name
        out_dir.mkdir(parents=True, exist_ok=True)
        raw = kept = 0
        for img_path in sorted(class_dir.glob("*.tnsr")):
            img = tario.load_tensor(img_path)
            if img.ndim != 3 or img.shape[2] != 3:
                raise ConfigurationError(f"{img_path} is not an HxWx3 image record")
            h, w = img.shape[:2]
            if h < tile or w < tile:
                logger.warning("skipping %s: %dx%d is smaller than the %d tile", img_path, h, w, tile)
                report.skipped_images += 1
                continue
            border_mean = border_luminance_mean(img, border)
            for r, c in tile_grid(h, w, tile):
                raw += 1
                crop = img[r : r + tile, c : c + tile]
                if keep_tile(crop, border_mean, v_min, delta):
                    kept += 1
                    name = f"{img_path.stem}_r{r // tile}_c{c // tile}.tnsr"
                    tario.save_tensor(out_dir / name, crop)
        report.per_class_raw[class_dir.name] = raw
        report.per_class_kept[class_dir.name] = kept
        report.raw_tiles += raw
        report.kept_tiles += kept
    return report


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentationRegime:
    mode: str = "standard"  # none | standard | mixup
    crop_size: int = 32
    pad: int = 4  # zero padding before the random crop (32-pixel style)
    resize_shorter: int = 0  # resize shorter side first (224-crop style), 0 = off
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    std: np.ndarray = field(default_factory=lambda: np.ones(3))

    def validate(self) -> None:
        if self.mode not in ("none", "standard", "mixup"):
            raise ConfigurationError(f"unknown augmentation mode {self.mode!r}")
        if self.crop_size < 1:
            raise ConfigurationError(f"crop_size must be positive, got {self.crop_size}")

    @classmethod
    def herb224(cls, mode: str) -> "AugmentationRegime":
        return cls(mode=mode, crop_size=224, pad=0, resize_shorter=256)

    @classmethod
    def tiny32(cls, mode: str) -> "AugmentationRegime":
        return cls(mode=mode, crop_size=32, pad=4, resize_shorter=0)


def resize_shorter_side(img: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize (half-pixel centers, edge clamp) so the shorter spatial
    side equals ``target``; aspect ratio is preserved to the nearest pixel."""
    h, w = img.shape[:2]
    scale = target / min(h, w)
    oh = target if h <= w else max(target, int(round(h * scale)))
    ow = target if w < h else max(target, int(round(w * scale)))
    return _bilinear_hwc(img, oh, ow)


def _axis_coords(n_src: int, n_dst: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    s = np.clip((np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5, 0.0, n_src - 1.0)
    i0 = np.floor(s).astype(int)
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, s - i0


def _bilinear_hwc(img: np.ndarray, oh: int, ow: int) -> np.ndarray:
    h, w = img.shape[:2]
    y0, y1, fy = _axis_coords(h, oh)
    x0, x1, fx = _axis_coords(w, ow)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ConfigurationError(f"image {h}x{w} is smaller than the {size} crop")
    r = (h - size) // 2
    c = (w - size) // 2
    return img[r : r + size, c : c + size]


def random_crop(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ConfigurationError(f"image {h}x{w} is smaller than the {size} crop")
    r = int(rng.integers(0, h - size + 1))
    c = int(rng.integers(0, w - size + 1))
    return img[r : r + size, c : c + size]


def horizontal_flip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1]


def augment_standard(
    img: np.ndarray, regime: AugmentationRegime, train: bool, rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """HxWx3 in [0,1] -> normalized 3 x crop x crop.

    Training with an active regime applies random crop (after zero padding or
    shorter-side resize) plus a 0.5-probability horizontal flip; evaluation
    and the "none" regime take the deterministic center-crop path.
    """
    regime.validate()
    if regime.resize_shorter:
        img = resize_shorter_side(img, regime.resize_shorter)
    randomized = train and regime.mode != "none"
    if randomized:
        if rng is None:
            raise ConfigurationError("training augmentation needs an rng")
        if regime.pad:
            p = regime.pad
            img = np.pad(img, ((p, p), (p, p), (0, 0)))
        img = random_crop(img, regime.crop_size, rng)
        if rng.random() < 0.5:
            img = horizontal_flip(img)
    elif img.shape[0] != regime.crop_size or img.shape[1] != regime.crop_size:
        img = center_crop(img, regime.crop_size)
    out = (img - regime.mean) / regime.std
    return np.ascontiguousarray(out.transpose(2, 0, 1))


def normalization_stats(manifest: DatasetManifest) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over all raw pixels of the training split."""
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for e in manifest.split_entries("train"):
        img = tario.load_tensor(Path(manifest.root) / e.path).astype(np.float64)
        total += img.sum(axis=(0, 1))
        total_sq += (img**2).sum(axis=(0, 1))
        count += img.shape[0] * img.shape[1]
    if count == 0:
        raise ConfigurationError("training split is empty")
    mean = total / count
    var = total_sq / count - mean**2
    return mean, np.sqrt(np.maximum(var, 1e-12))


# ---------------------------------------------------------------------------
# mixup
# ---------------------------------------------------------------------------


def draw_mixup_lambda(rng: np.random.Generator, alpha: float) -> float:
    if alpha <= 0:
        raise ConfigurationError(f"mixup alpha must be positive, got {alpha}")
    return float(rng.beta(alpha, alpha))


def mixup_batch(
    batch_a: Tuple[np.ndarray, np.ndarray],
    batch_b: Tuple[np.ndarray, np.ndarray],
    lam: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """Convex combination of two batches and their label distributions."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"mixup lambda must lie in [0,1], got {lam}")
    xa, ya = batch_a
    xb, yb = batch_b
    return lam * xa + (1.0 - lam) * xb, lam * ya + (1.0 - lam) * yb


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def load_category_map(path) -> Dict[str, str]:
    """CSV of ``class_name,category`` rows; an empty file means no grouping."""
    mapping: Dict[str, str] = {}
    with open(path, newline="") as fp:
        for row in csv.reader(fp):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 2:
                raise ConfigurationError(f"category map rows need 2 columns, got {row}")
            mapping[row[0]] = row[1]
    return mapping


def dataset_stats_rows(
    manifest: DatasetManifest, category_map: Optional[Dict[str, str]] = None
) -> List[List[str]]:
    """Rows of class,category,train,val,total plus per-category aggregates."""
    rows: List[List[str]] = []
    by_category: Dict[str, np.ndarray] = {}
    for name, train, val in manifest.class_counts():
        category = (category_map or {}).get(name, "")
        rows.append([name, category, str(train), str(val), str(train + val)])
        if category:
            by_category.setdefault(category, np.zeros(2, dtype=int))
            by_category[category] += (train, val)
    for category in sorted(by_category):
        train, val = by_category[category]
        rows.append([f"category/{category}", "", str(train), str(val), str(train + val)])
    return rows


def write_stats_csv(rows: Sequence[Sequence[str]], fp) -> None:
    writer = csv.writer(fp)
    writer.writerow(["class", "category", "train", "val", "total"])
    writer.writerows(rows)


# ---------------------------------------------------------------------------
# in-memory dataset for training
# ---------------------------------------------------------------------------


class ImageDataset:
    """Manifest-backed image access with per-split augmentation."""

    def __init__(self, manifest: DatasetManifest, regime: AugmentationRegime):
        regime.validate()
        self.manifest = manifest
        self.regime = regime
        self.train_entries = manifest.split_entries("train")
        self.val_entries = manifest.split_entries("val")
        self._cache: Dict[str, np.ndarray] = {}

    @property
    def num_classes(self) -> int:
        return self.manifest.num_classes

    def load_raw(self, entry: ManifestEntry) -> np.ndarray:
        img = self._cache.get(entry.path)
        if img is None:
            img = tario.load_tensor(Path(self.manifest.root) / entry.path)
            self._cache[entry.path] = img
        return img

    def example(
        self, entry: ManifestEntry, train: bool, rng: Optional[np.random.Generator] = None
    ) -> Tuple[np.ndarray, int]:
        img = self.load_raw(entry)
        return augment_standard(img, self.regime, train, rng), entry.label

    def compute_normalization(self) -> None:
        self.regime.mean, self.regime.std = normalization_stats(self.manifest)


# ---------------------------------------------------------------------------
# synthetic textures (smoke datasets)
# ---------------------------------------------------------------------------


def make_texture_dataset(
    root, num_classes: int = 5, per_class: int = 20, size: int = 32, seed: int = 0
) -> DatasetManifest:
    """Write a tiny dataset of class-distinct sinusoidal gratings and ingest it."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    for k in range(num_classes):
        class_dir = root / f"texture{k:02d}"
        class_dir.mkdir(parents=True, exist_ok=True)
        theta = np.pi * k / num_classes
        freq = 2.0 + k
        axis = (xx * np.cos(theta) + yy * np.sin(theta)) / size
        for i in range(per_class):
            phase = rng.uniform(0, 2 * np.pi)
            img = np.stack(
                [0.5 + 0.4 * np.sin(2 * np.pi * freq * axis + phase + 0.5 * c) for c in range(3)],
                axis=2,
            )
            img += 0.03 * rng.normal(size=img.shape)
            tario.save_tensor(class_dir / f"img{i:03d}.tnsr", np.clip(img, 0.0, 1.0).astype(np.float32))
    return ingest(root, seed=seed)
