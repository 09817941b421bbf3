"""Manifests, image ingestion, split policies, label-efficiency subsets and the synthetic corpus.

Manifest format
---------------
UTF-8 JSON Lines. Each line is one object with keys ``id``, ``path``,
``modality`` and optionally ``class_label`` and ``mask_path``. Paths are
resolved relative to the manifest's directory. An optional line of the form
``{"_meta": {"class_count": 4, "target_size": [64, 64]}}`` carries
dataset-level settings; blank lines are ignored.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


class Modality(str, enum.Enum):
    MR = "MR"
    CT_PET = "CT_PET"
    US = "US"
    XRAY = "XRAY"
    COLOR = "COLOR"
    SYNTH = "SYNTH"


class ManifestError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray  # H x W x c, float32 in [0, 1]
    modality: Modality = Modality.SYNTH
    class_label: Optional[int] = None
    seg_mask: Optional[np.ndarray] = None  # H x W int64

    def __post_init__(self):
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise DataError(f"{self.id}: pixel values outside [0, 1]")
        if self.seg_mask is not None and self.seg_mask.shape != self.pixels.shape[:2]:
            raise DataError(f"{self.id}: mask {self.seg_mask.shape} does not match image {self.pixels.shape[:2]}")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    modality: Modality
    class_label: Optional[int] = None
    mask_path: Optional[str] = None

    def to_json(self) -> dict:
        d = {"id": self.id, "path": self.path, "modality": self.modality.value}
        if self.class_label is not None:
            d["class_label"] = self.class_label
        if self.mask_path is not None:
            d["mask_path"] = self.mask_path
        return d


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    class_count: int = 1
    target_size: tuple[int, int] = (64, 64)
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise ManifestError(f"duplicate id {e.id!r}")
            seen.add(e.id)
        labels = [e.class_label for e in self.entries if e.class_label is not None]
        if labels:
            if self.class_count < 1:
                raise ManifestError("class_count must be >= 1 when class labels are present")
            bad = [lab for lab in labels if not 0 <= lab < self.class_count]
            if bad:
                raise ManifestError(f"class label {bad[0]} outside [0, {self.class_count})")

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    def filter(self, modality: Modality | str | None) -> "DatasetManifest":
        if modality is None:
            return self
        modality = Modality(modality)
        return replace(self, entries=[e for e in self.entries if e.modality == modality])


def load_manifest(path, class_count: Optional[int] = None, target_size: Optional[tuple[int, int]] = None) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest {path} does not exist")
    entries, meta = [], {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("record is not an object")
                if "_meta" in obj:
                    meta.update(obj["_meta"])
                    continue
                unknown = set(obj) - {"id", "path", "modality", "class_label", "mask_path"}
                if unknown:
                    raise ValueError(f"unknown keys {sorted(unknown)}")
                label = obj.get("class_label")
                entry = ManifestEntry(
                    id=str(obj["id"]),
                    path=str(obj["path"]),
                    modality=Modality(obj.get("modality", "SYNTH")),
                    class_label=None if label is None else int(label),
                    mask_path=obj.get("mask_path"),
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: malformed record ({exc})") from None
            entries.append(entry)
    labels = [e.class_label for e in entries if e.class_label is not None]
    if class_count is None:
        class_count = int(meta.get("class_count", max(labels) + 1 if labels else 1))
    if target_size is None:
        target_size = tuple(meta.get("target_size", (64, 64)))
    manifest = DatasetManifest(entries, class_count, tuple(int(v) for v in target_size), path.parent)
    for e in entries:
        if e.mask_path is not None and not manifest.resolve(e.mask_path).exists():
            raise ManifestError(f"entry {e.id!r}: mask path {e.mask_path!r} does not exist")
    return manifest


def write_manifest(manifest: DatasetManifest, path, extra_meta: Optional[dict] = None) -> None:
    path = Path(path)
    meta = {"class_count": manifest.class_count, "target_size": list(manifest.target_size), **(extra_meta or {})}
    lines = [json.dumps({"_meta": meta}, sort_keys=True)]
    lines += [json.dumps(e.to_json(), sort_keys=True) for e in manifest.entries]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _decode(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("RGB", "RGBA", "P", "CMYK"):
                arr = np.asarray(im.convert("RGB"), dtype=np.float64)
            elif im.mode in ("L", "I;16", "I;16B", "I", "F", "1"):
                arr = np.asarray(im, dtype=np.float64)
            else:
                arr = np.asarray(im.convert("L"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode {path}: {exc}") from None
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise DataError(f"{path}: expected a 2-D or 3-channel raster, got shape {arr.shape}")
    return arr


def resize_bilinear(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if arr.shape[:2] == tuple(size):
        return arr
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]
    t = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return t[0].numpy().transpose(1, 2, 0)


def resize_nearest(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if mask.shape == tuple(size):
        return mask
    H, W = mask.shape
    rows = np.minimum((np.arange(size[0]) + 0.5) * H / size[0], H - 1).astype(np.int64)
    cols = np.minimum((np.arange(size[1]) + 0.5) * W / size[1], W - 1).astype(np.int64)
    return mask[rows][:, cols]


def minmax(arr: np.ndarray) -> np.ndarray:
    lo, hi = arr.min(), arr.max()
    if hi <= lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def prepare(pixels: np.ndarray, target_size, mask: Optional[np.ndarray] = None):
    """Resize (bilinear / nearest for masks) then min-max normalize one image."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    if mask is not None and mask.shape != pixels.shape[:2]:
        raise DataError(f"mask {mask.shape} does not match image {pixels.shape[:2]}")
    out = minmax(resize_bilinear(pixels, target_size)).astype(np.float32)
    if mask is not None:
        mask = resize_nearest(np.asarray(mask, dtype=np.int64), target_size)
    return out, mask


def ingest_image(entry: ManifestEntry, target_size, base_dir=None) -> ImageRecord:
    base = Path(base_dir) if base_dir is not None else Path()
    src = Path(entry.path) if Path(entry.path).is_absolute() else base / entry.path
    pixels = _decode(src)
    mask = None
    if entry.mask_path is not None:
        mpath = Path(entry.mask_path) if Path(entry.mask_path).is_absolute() else base / entry.mask_path
        mask = _decode(mpath)[:, :, 0].astype(np.int64)
    pixels, mask = prepare(pixels, target_size, mask)
    return ImageRecord(entry.id, pixels, entry.modality, entry.class_label, mask)


def ingest_manifest(manifest: DatasetManifest) -> list[ImageRecord]:
    return [ingest_image(e, manifest.target_size, manifest.base_dir) for e in manifest.entries]


class SplitPolicy(str, enum.Enum):
    KFOLD_CV = "KFOLD_CV"
    HOLDOUT = "HOLDOUT"


@dataclass(frozen=True)
class Fold:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]


@dataclass(frozen=True)
class SplitAssignment:
    policy: SplitPolicy
    folds: tuple[Fold, ...]
    fraction: float = 1.0
    seed: int = 0


KFOLD_THRESHOLD = 4000
N_FOLDS = 5


def make_splits(manifest, seed: int, policy: Optional[SplitPolicy] = None) -> SplitAssignment:
    """5-fold CV (train:val = 9:1 inside the non-test part) below 4000 images,
    otherwise a single 72/8/20 holdout. Val/test sizes are floored, the
    remainder goes to train."""
    ids = manifest.ids if isinstance(manifest, DatasetManifest) else list(manifest)
    n = len(ids)
    if n < 10:
        raise DataError(f"need at least 10 entries to split, got {n}")
    if policy is None:
        policy = SplitPolicy.KFOLD_CV if n < KFOLD_THRESHOLD else SplitPolicy.HOLDOUT
    policy = SplitPolicy(policy)
    order = [ids[i] for i in np.random.default_rng([seed, 0]).permutation(n)]
    folds = []
    if policy is SplitPolicy.KFOLD_CV:
        for k, test_idx in enumerate(np.array_split(np.arange(n), N_FOLDS)):
            test = [order[i] for i in test_idx]
            held = set(test_idx.tolist())
            rest = [order[i] for i in range(n) if i not in held]
            rest = [rest[i] for i in np.random.default_rng([seed, 1, k]).permutation(len(rest))]
            n_val = len(rest) // 10
            folds.append(Fold(tuple(rest[n_val:]), tuple(rest[:n_val]), tuple(test)))
    else:
        n_test, n_val = math.floor(0.2 * n), math.floor(0.08 * n)
        test, val, train = order[:n_test], order[n_test:n_test + n_val], order[n_test + n_val:]
        folds.append(Fold(tuple(train), tuple(val), tuple(test)))
    return SplitAssignment(policy, tuple(folds), 1.0, seed)


def subset_fraction(split: SplitAssignment, fraction: float, seed: int) -> SplitAssignment:
    """Keep the first ``ceil(fraction * |train|)`` ids of a seed-fixed permutation
    of each fold's train set, so smaller fractions are nested in larger ones."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    folds = []
    for k, fold in enumerate(split.folds):
        train = sorted(fold.train)
        perm = np.random.default_rng([seed, 2, k]).permutation(len(train))
        keep = math.ceil(fraction * len(train) - 1e-9)
        folds.append(Fold(tuple(train[i] for i in perm[:keep]), fold.val, fold.test))
    return replace(split, folds=tuple(folds), fraction=fraction)


SHAPES = ("ellipse", "rectangle", "triangle", "cross", "ring")
BACKGROUND = 0.2


def _shape_mask(kind: str, H: int, W: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    s = min(H, W)
    cy, cx = rng.uniform(0.3, 0.7) * H, rng.uniform(0.3, 0.7) * W
    r = rng.uniform(0.15, 0.28) * s
    dy, dx = yy - cy, xx - cx
    if kind == "ellipse":
        a, b = r, r * rng.uniform(0.55, 1.0)
        return (dy / b) ** 2 + (dx / a) ** 2 <= 1.0
    if kind == "rectangle":
        h = r * rng.uniform(0.6, 1.0)
        return (np.abs(dy) <= h) & (np.abs(dx) <= r)
    if kind == "triangle":
        # apex up; inside if below apex line pair and above base
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "cross":
        t = r * 0.3
        return ((np.abs(dy) <= t) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t) & (np.abs(dy) <= r))
    if kind == "ring":
        d = np.hypot(dy, dx)
        return (d <= r) & (d >= 0.55 * r)
    raise ValueError(kind)


def synth_image(index: int, size, class_label: int, noise: float, seed: int):
    """Render image ``index`` of a corpus: one shape of class ``class_label`` on a noisy background."""
    H, W = size
    rng = np.random.default_rng([seed, 3, index])
    shape = _shape_mask(SHAPES[class_label - 1], H, W, rng)
    fg = rng.uniform(0.6, 1.0)
    img = np.full((H, W), BACKGROUND)
    img[shape] = fg
    if noise > 0:
        img = img + noise * rng.standard_normal((H, W))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    mask = np.where(shape, class_label, 0).astype(np.int64)
    return img[:, :, None], mask


def generate_synthetic(n: int, size=(64, 64), class_count: int = 3, noise: float = 0.05, seed: int = 0) -> list[ImageRecord]:
    """In-memory synthetic corpus. Class labels run 1..class_count (0 is background)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 2 <= class_count <= len(SHAPES):
        raise ValueError(f"class_count must be in 2..{len(SHAPES)}, got {class_count}")
    labels = np.random.default_rng([seed, 4]).permutation(np.arange(n) % class_count) + 1
    records = []
    for i in range(n):
        img, mask = synth_image(i, size, int(labels[i]), noise, seed)
        records.append(ImageRecord(f"synth_{i:05d}", img, Modality.SYNTH, int(labels[i]), mask))
    return records


def synth_corpus(n: int, size=(64, 64), class_count: int = 3, noise: float = 0.05, seed: int = 0, out_dir=None,
                 extra_meta: Optional[dict] = None):
    """Generate the synthetic corpus; with ``out_dir`` also write 16-bit PNG
    images, 8-bit index masks and ``manifest.jsonl``.

    Returns ``(manifest, records)``. The manifest's ``class_count`` includes
    the background class, i.e. ``class_count + 1``.
    """
    records = generate_synthetic(n, size, class_count, noise, seed)
    entries = []
    base = Path(out_dir) if out_dir is not None else Path()
    if out_dir is not None:
        (base / "images").mkdir(parents=True, exist_ok=True)
        (base / "masks").mkdir(parents=True, exist_ok=True)
    for rec in records:
        img_rel, mask_rel = f"images/{rec.id}.png", f"masks/{rec.id}.png"
        if out_dir is not None:
            px16 = np.round(rec.pixels[:, :, 0].astype(np.float64) * 65535).astype(np.uint16)
            Image.fromarray(px16).save(base / img_rel)
            Image.fromarray(rec.seg_mask.astype(np.uint8)).save(base / mask_rel)
        entries.append(ManifestEntry(rec.id, img_rel, Modality.SYNTH, rec.class_label, mask_rel))
    manifest = DatasetManifest(entries, class_count + 1, tuple(size), base)
    if out_dir is not None:
        write_manifest(manifest, base / "manifest.jsonl", extra_meta)
    return manifest, records


def foreground_only(records: list[ImageRecord]) -> list[ImageRecord]:
    """Collapse every shape class to label 1 (binary foreground segmentation)."""
    return [replace(r, seg_mask=(r.seg_mask > 0).astype(np.int64)) if r.seg_mask is not None else r
            for r in records]
