"""Synthetic lung-slice stand-ins, preprocessing, dataset files and splits."""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .errors import DataError, UsageError

FILL_HU = -800.0
HU_PER_UNIT = 1000.0  # scaled value = HU / 1000 (division keeps -800 -> -0.8 exact)

# P(score); the 0 and ">1-5%" masses follow the reported screening cohort
# (about 73% at 0%, about 13% above 1-5%), the decreasing tail split is ours.
SCORE_PROBS = (0.73, 0.14, 0.06, 0.04, 0.02, 0.01)
# fraction of lung pixels affected, per score
EXTENT_FRACTIONS = ((0.0, 0.0), (0.01, 0.05), (0.06, 0.25), (0.26, 0.50), (0.51, 0.75), (0.76, 1.0))

HEALTHY_HU = (-885.0, -740.0)   # per-image parenchyma level
HEALTHY_NOISE_HU = (5.0, 30.0)   # per-image +- texture amplitude around that level
HEALTHY_FLOOR_HU = -897.0        # texture is capped so healthy tissue stays above this
GRADIENT_HU = (0.0, 80.0)        # per-image dependent-lung density increase across the slice
MAX_VESSELS = 300
DARK_HU = (-935.0, -915.0)       # per-image level of affected tissue
DARK_NOISE_HU = 10.0
VESSEL_HU = (-300.0, 0.0)      # blurred soft-tissue vessels (partial volume)
DARK_THRESHOLD = -0.90          # scaled units; separates affected from healthy pixels

IMAGE_MAGIC = b"TRIPIMG1"


class CropBox(NamedTuple):
    """Inclusive pixel bounds ``rows top..bottom`` and ``cols left..right``."""

    top: int
    bottom: int
    left: int
    right: int

    @property
    def height(self) -> int:
        return self.bottom - self.top + 1

    @property
    def width(self) -> int:
        return self.right - self.left + 1


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (H, W, 1), scaled HU
    score: int
    id: str

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[..., None]
        if not 0 <= int(self.score) <= 5:
            raise DataError(f"{self.id}: score {self.score} outside 0..5")
        if not np.all(np.isfinite(self.pixels)):
            raise DataError(f"{self.id}: non-finite pixels")
        self.score = int(self.score)


@dataclass
class SplitSpec:
    train_ids: list
    val_ids: list
    test_ids: list
    seed: int

    def __post_init__(self):
        sets = [set(self.train_ids), set(self.val_ids), set(self.test_ids)]
        if sum(map(len, sets)) != len(set().union(*sets)):
            raise DataError("split id lists overlap")

    @property
    def train_group(self) -> list:
        return list(self.train_ids) + list(self.val_ids)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train_ids": list(self.train_ids),
                "val_ids": list(self.val_ids), "test_ids": list(self.test_ids)}


# ---------------------------------------------------------------------------
# preprocessing

def bbox(mask: np.ndarray) -> CropBox:
    rows = np.flatnonzero(np.any(mask, axis=1))
    cols = np.flatnonzero(np.any(mask, axis=0))
    if len(rows) == 0:
        raise DataError("empty mask has no bounding box")
    return CropBox(int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1]))


def bbox_intersection(masks: Sequence[np.ndarray]) -> CropBox:
    """Intersection of the tight bounding boxes of every mask."""
    if len(masks) == 0:
        raise DataError("no masks given")
    boxes = [bbox(np.asarray(m, dtype=bool)) for m in masks]
    box = CropBox(
        max(b.top for b in boxes), min(b.bottom for b in boxes),
        max(b.left for b in boxes), min(b.right for b in boxes),
    )
    if box.top > box.bottom or box.left > box.right:
        raise DataError(f"bounding boxes do not intersect ({box})")
    return box


def preprocess(raw_hu: np.ndarray, mask: np.ndarray, crop_box: CropBox) -> np.ndarray:
    """Crop, fill outside the lung with -800 HU, scale by 1/1000.  Returns ``(h, w, 1)``."""
    raw_hu = np.asarray(raw_hu, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if raw_hu.shape != mask.shape or raw_hu.ndim != 2:
        raise UsageError(f"image {raw_hu.shape} and mask {mask.shape} must be equal 2-D shapes")
    b = CropBox(*crop_box)
    if b.top < 0 or b.left < 0 or b.bottom >= raw_hu.shape[0] or b.right >= raw_hu.shape[1] \
            or b.top > b.bottom or b.left > b.right:
        raise UsageError(f"crop box {tuple(b)} outside image of shape {raw_hu.shape}")
    img = raw_hu[b.top:b.bottom + 1, b.left:b.right + 1]
    m = mask[b.top:b.bottom + 1, b.left:b.right + 1]
    out = np.where(m, img, FILL_HU) / HU_PER_UNIT
    return out[..., None]


# ---------------------------------------------------------------------------
# synthetic data

def _lung_mask(rng, height, width):
    cy = height / 2 + rng.uniform(-0.04, 0.04) * height
    cx = width / 2 + rng.uniform(-0.04, 0.04) * width
    ry = height * rng.uniform(0.42, 0.56)
    rx = width * rng.uniform(0.42, 0.56)
    yy, xx = np.mgrid[0:height, 0:width]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _affected(rng, mask, fraction):
    """Blobby subset of ``mask`` covering exactly ``round(fraction * |mask|)`` pixels."""
    n_mask = int(mask.sum())
    count = int(round(fraction * n_mask))
    out = np.zeros_like(mask)
    if count == 0:
        return out
    field = ndimage.gaussian_filter(rng.standard_normal(mask.shape), sigma=rng.uniform(1.5, 3.0))
    inside = np.flatnonzero(mask.ravel())
    order = np.argsort(-field.ravel()[inside], kind="stable")
    out.ravel()[inside[order[:count]]] = True
    return out


def _texture(rng, height, width):
    """Smooth noise scaled to [-1, 1]."""
    t = ndimage.gaussian_filter(rng.uniform(-1, 1, (height, width)), 0.8)
    return t / (np.abs(t).max() + 1e-12)


def _vessels(rng, height, width):
    """Bright branching-looking structures: thin random line segments, blurred."""
    canvas = np.zeros((height, width))
    for _ in range(int(rng.integers(0, MAX_VESSELS + 1))):
        y0, x0 = rng.uniform(0, height), rng.uniform(0, width)
        angle = rng.uniform(0, np.pi)
        length = rng.uniform(5, 30)
        t = np.linspace(0, length, int(length * 2))
        ys = np.clip((y0 + t * np.sin(angle)).astype(int), 0, height - 1)
        xs = np.clip((x0 + t * np.cos(angle)).astype(int), 0, width - 1)
        canvas[ys, xs] = rng.uniform(0.5, 1.0)
    canvas = ndimage.gaussian_filter(canvas, 0.7)
    return np.clip(canvas / 0.4, 0.0, 1.0)


def synthetic_raw(rng: np.random.Generator, score: int, height: int, width: int):
    """One raw slice in HU, its lung mask and the affected-pixel mask."""
    mask = _lung_mask(rng, height, width)
    lo, hi = EXTENT_FRACTIONS[score]
    fraction = rng.uniform(lo, hi) if hi > 0 else 0.0
    affected = _affected(rng, mask, fraction)
    level = rng.uniform(*HEALTHY_HU)
    amplitude = min(rng.uniform(*HEALTHY_NOISE_HU), level - HEALTHY_FLOOR_HU)
    hu = level + amplitude * _texture(rng, height, width)
    # density rises linearly towards one (random) side of the slice
    yy, xx = np.mgrid[0:height, 0:width]
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (yy - height / 2) / height * np.sin(angle) + (xx - width / 2) / width * np.cos(angle)
    ramp = (ramp - ramp.min()) / (ramp.max() - ramp.min())
    hu = hu + rng.uniform(*GRADIENT_HU) * ramp
    vessel = _vessels(rng, height, width)
    hu = hu + vessel * (rng.uniform(*VESSEL_HU) - hu)
    dark = rng.uniform(*DARK_HU) + DARK_NOISE_HU * _texture(rng, height, width)
    hu = np.where(affected, dark, hu)
    return hu, mask, affected


def generate_synthetic(n: int, seed: int, height: int = 57, width: int = 125) -> list[LabeledImage]:
    """``n`` labelled synthetic slices; image ``i`` depends only on ``(seed, i)``."""
    if n < 10:
        raise UsageError(f"generate_synthetic needs n >= 10, got {n}")
    full = CropBox(0, height - 1, 0, width - 1)
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        score = int(rng.choice(len(SCORE_PROBS), p=SCORE_PROBS))
        hu, mask, _ = synthetic_raw(rng, score, height, width)
        out.append(LabeledImage(preprocess(hu, mask, full), score, f"img{i:05d}"))
    return out


def dark_fraction(image: LabeledImage) -> float:
    """Share of non-fill pixels darker than the affected-tissue threshold."""
    px = image.pixels[..., 0]
    return float(np.mean(px < DARK_THRESHOLD))


# ---------------------------------------------------------------------------
# splits

def split_dataset(ids: Sequence, seed: int) -> SplitSpec:
    """Shuffle, take the first ceil(n/2) as the training group, halve that into train/val."""
    ids = list(ids)
    if len(ids) < 4:
        raise UsageError(f"need at least 4 ids to split, got {len(ids)}")
    perm = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    n_group = math.ceil(len(ids) / 2)
    group, test = perm[:n_group], perm[n_group:]
    train, val = halve(group, seed)
    return SplitSpec(train, val, test, seed)


def halve(ids: Sequence, seed) -> tuple[list, list]:
    """Random halves; the first gets the extra id when the count is odd."""
    ids = list(ids)
    perm = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    k = math.ceil(len(ids) / 2)
    return perm[:k], perm[k:]


# ---------------------------------------------------------------------------
# files
#
# text image: first line "<height> <width> <score> <id>", then one line of
# space-separated floats per row (repr, so values round-trip exactly).
# binary image: b"TRIPIMG1", u32 height, u32 width, u32 score, u32 id_len,
# id (UTF-8), height*width little-endian f64 row-major.

def write_image(path, image: LabeledImage) -> None:
    path = Path(path)
    px = image.pixels[..., 0]
    h, w = px.shape
    if path.suffix == ".txt":
        lines = [f"{h} {w} {image.score} {image.id}"]
        lines += [" ".join(repr(float(v)) for v in row) for row in px]
        path.write_text("\n".join(lines) + "\n")
    elif path.suffix == ".bin":
        ident = image.id.encode()
        header = IMAGE_MAGIC + struct.pack("<IIII", h, w, image.score, len(ident)) + ident
        path.write_bytes(header + np.ascontiguousarray(px, dtype="<f8").tobytes())
    else:
        raise UsageError(f"unknown image format {path.suffix!r}; use .txt or .bin")


def read_image(path) -> LabeledImage:
    path = Path(path)
    try:
        if path.suffix == ".txt":
            lines = path.read_text().splitlines()
            h, w, score, ident = lines[0].split(maxsplit=3)
            px = np.array([[float(v) for v in line.split()] for line in lines[1:1 + int(h)]])
            if px.shape != (int(h), int(w)):
                raise DataError(f"{path}: expected {h}x{w} pixels, got {px.shape}")
            return LabeledImage(px, int(score), ident)
        buf = path.read_bytes()
        if buf[:8] != IMAGE_MAGIC:
            raise DataError(f"{path}: bad image magic")
        h, w, score, n = struct.unpack_from("<IIII", buf, 8)
        ident = buf[24:24 + n].decode()
        px = np.frombuffer(buf, dtype="<f8", count=h * w, offset=24 + n).astype(np.float64)
        return LabeledImage(px.reshape(h, w), score, ident)
    except (ValueError, struct.error, IndexError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: unreadable image ({exc})") from exc


def write_dataset(out_dir, images: Sequence[LabeledImage], split: SplitSpec, fmt: str = "bin") -> None:
    """``images/<id>.<fmt>``, ``labels.csv`` (id,score) and ``split.json``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    for image in images:
        write_image(out_dir / "images" / f"{image.id}.{fmt}", image)
    with open(out_dir / "labels.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["id", "score"])
        writer.writerows((im.id, im.score) for im in images)
    (out_dir / "split.json").write_text(json.dumps(split.to_dict(), indent=1) + "\n")


def read_dataset(data_dir) -> tuple[dict[str, LabeledImage], SplitSpec]:
    data_dir = Path(data_dir)
    labels_path = data_dir / "labels.csv"
    if not labels_path.is_file():
        raise DataError(f"{data_dir}: no labels.csv")
    with open(labels_path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["id", "score"]:
            raise DataError(f"{labels_path}: header must be 'id,score'")
        labels = {row["id"]: int(row["score"]) for row in reader}
    images = {}
    for ident, score in labels.items():
        candidates = [data_dir / "images" / f"{ident}.{ext}" for ext in ("bin", "txt")]
        path = next((p for p in candidates if p.is_file()), None)
        if path is None:
            raise DataError(f"{data_dir}: no image file for id {ident}")
        image = read_image(path)
        if image.score != score or image.id != ident:
            raise DataError(f"{path}: header disagrees with labels.csv")
        images[ident] = image
    split_path = data_dir / "split.json"
    if not split_path.is_file():
        raise DataError(f"{data_dir}: no split.json")
    s = json.loads(split_path.read_text())
    split = SplitSpec(s["train_ids"], s["val_ids"], s["test_ids"], int(s["seed"]))
    missing = set(split.train_group + split.test_ids) - set(images)
    if missing:
        raise DataError(f"split.json names unknown ids, e.g. {sorted(missing)[:3]}")
    return images, split
