"""Dataset types, ingestion, splitting, batching, and the synthetic corpus.

Images are 8-bit single-channel PNG or binary PGM (P5); DICOM conversion is
an upstream concern (``convert in.dcm -depth 8 out.png`` or equivalent).
Manifests follow the challenge layout ``patientId,x,y,width,height,Target``
with one row per box and empty coordinate fields for Target=0 rows.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, ContractError, DataError
from .rng import substream

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ["patientId", "x", "y", "width", "height", "Target"]

TRAIN_FRACTION = 0.75


# ---------------------------------------------------------------------------
# core types
# ---------------------------------------------------------------------------


@dataclass
class GrayImage:
    """2-D 8-bit grayscale raster, row-major."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 2 or arr.size == 0:
            raise ContractError(f"image must be non-empty 2-D, got shape {arr.shape}")
        self.pixels = arr.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box: top-left (x, y) plus extent, in pixels."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ContractError(f"bounding box must have positive extent, got {self}")


@dataclass
class RoiMask:
    """Boolean pixel mask with at least one selected pixel."""

    bits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.bits, dtype=bool)
        if arr.ndim != 2:
            raise ContractError(f"mask must be 2-D, got shape {arr.shape}")
        if not arr.any():
            raise ContractError("mask selects no pixels")
        self.bits = arr

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


@dataclass
class Sample:
    """One patient image with its label and (for positives) lesion box."""

    id: str
    image: GrayImage
    label: int
    bbox: Optional[BoundingBox] = None


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: tuple
    test_ids: tuple
    seed: int


# ---------------------------------------------------------------------------
# image IO and resampling
# ---------------------------------------------------------------------------


def load_image(path: str) -> GrayImage:
    try:
        with Image.open(path) as im:
            return GrayImage(np.asarray(im.convert("L")))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def save_png(image: GrayImage, path: str) -> None:
    Image.fromarray(image.pixels, mode="L").save(path, format="PNG")


def write_pgm(pixels: np.ndarray, path: str) -> None:
    """Binary P5 writer; byte-for-byte deterministic."""
    arr = np.asarray(pixels, dtype=np.uint8)
    if arr.ndim != 2:
        raise ContractError(f"PGM payload must be 2-D, got {arr.shape}")
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        f.write(arr.tobytes())


def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-centre alignment; float32 output.

    Resizing to the source size reproduces the input exactly.
    """
    src = np.asarray(pixels, dtype=np.float32)
    h, w = src.shape
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0).astype(np.float32)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0).astype(np.float32)[None, :]
    top = src[np.ix_(y0, x0)] * (1 - fx) + src[np.ix_(y0, x1)] * fx
    bot = src[np.ix_(y1, x0)] * (1 - fx) + src[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


# ---------------------------------------------------------------------------
# ROI handling
# ---------------------------------------------------------------------------


def roi_mask_from_bbox(image: GrayImage, bbox: Optional[BoundingBox]) -> RoiMask:
    """Mask of the box clipped to the image; no box means the whole image."""
    h, w = image.pixels.shape
    if bbox is None:
        return RoiMask(np.ones((h, w), dtype=bool))
    x0, y0 = max(bbox.x, 0), max(bbox.y, 0)
    x1, y1 = min(bbox.x + bbox.w, w), min(bbox.y + bbox.h, h)
    if x0 >= x1 or y0 >= y1:
        raise ContractError(f"bounding box {bbox} lies outside the {w}x{h} image")
    bits = np.zeros((h, w), dtype=bool)
    bits[y0:y1, x0:x1] = True
    return RoiMask(bits)


# ---------------------------------------------------------------------------
# manifest IO
# ---------------------------------------------------------------------------


def _parse_row(row: list, line_no: int):
    if len(row) != 6:
        raise DataError(f"manifest line {line_no}: expected 6 fields, got {len(row)}")
    pid = row[0].strip()
    if not pid:
        raise DataError(f"manifest line {line_no}: empty patientId")
    try:
        target = int(row[5])
    except ValueError as exc:
        raise DataError(f"manifest line {line_no}: bad Target {row[5]!r}") from exc
    if target not in (0, 1):
        raise DataError(f"manifest line {line_no}: Target must be 0 or 1, got {target}")
    coords = [c.strip() for c in row[1:5]]
    if all(c == "" for c in coords):
        return pid, target, None
    if any(c == "" for c in coords):
        raise DataError(f"manifest line {line_no}: partial box coordinates")
    if target == 0:
        raise DataError(f"manifest line {line_no}: Target=0 rows must leave box fields empty")
    try:
        x, y, w, h = (int(float(c)) for c in coords)
    except ValueError as exc:
        raise DataError(f"manifest line {line_no}: bad box coordinates {coords}") from exc
    if w < 1 or h < 1:
        raise DataError(f"manifest line {line_no}: box extent must be positive")
    return pid, target, (x, y, w, h)


def _union_box(boxes: Sequence[tuple]) -> BoundingBox:
    x0 = min(b[0] for b in boxes)
    y0 = min(b[1] for b in boxes)
    x1 = max(b[0] + b[2] for b in boxes)
    y1 = max(b[1] + b[3] for b in boxes)
    return BoundingBox(x0, y0, x1 - x0, y1 - y0)


def load_manifest(csv_path: str, image_dir: str):
    """Read a manifest and its images.

    Returns ``(samples, errors)`` where ``errors`` lists per-sample problems
    (currently: missing image files) that did not stop the load.  Structural
    problems in the CSV itself raise :class:`DataError` immediately.
    Multiple boxes for one patient are merged to their tight union.
    """
    try:
        f = open(csv_path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {csv_path}: {exc}") from exc
    with f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"manifest {csv_path} is empty") from None
        if [c.strip() for c in header] != MANIFEST_HEADER:
            raise DataError(
                f"manifest header {header} != expected {MANIFEST_HEADER}")
        order: list[str] = []
        targets: dict[str, int] = {}
        boxes: dict[str, list] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            pid, target, box = _parse_row(row, line_no)
            if pid not in targets:
                order.append(pid)
                targets[pid] = 0
                boxes[pid] = []
            targets[pid] = max(targets[pid], target)
            if box is not None:
                boxes[pid].append(box)

    samples: list[Sample] = []
    errors: list[str] = []
    for pid in order:
        path = None
        for ext in ("png", "pgm"):
            candidate = os.path.join(image_dir, f"{pid}.{ext}")
            if os.path.exists(candidate):
                path = candidate
                break
        if path is None:
            errors.append(f"{pid}: image file not found under {image_dir}")
            continue
        image = load_image(path)
        bbox = _union_box(boxes[pid]) if boxes[pid] else None
        samples.append(Sample(id=pid, image=image, label=targets[pid], bbox=bbox))
    return samples, errors


def write_manifest(samples: Sequence[Sample], csv_path: str) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for s in samples:
            if s.bbox is not None:
                writer.writerow([s.id, s.bbox.x, s.bbox.y, s.bbox.w, s.bbox.h, s.label])
            else:
                writer.writerow([s.id, "", "", "", "", s.label])


# ---------------------------------------------------------------------------
# splitting and batching
# ---------------------------------------------------------------------------


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_dataset(samples: Sequence[Sample], seed: int) -> DatasetSplit:
    """Deterministic 75/25 split, stratified by label when possible."""
    if len(samples) < 4:
        raise ContractError(f"need at least 4 samples to split, got {len(samples)}")
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ContractError("duplicate sample ids")
    n_train = _round_half_up(TRAIN_FRACTION * len(ids))

    by_label: dict[int, list[str]] = {}
    for s in samples:
        by_label.setdefault(s.label, []).append(s.id)

    rng = substream(seed, "split")
    if len(by_label) < 2 or min(len(v) for v in by_label.values()) < 2:
        logger.warning(
            "stratification unavailable (classes: %s); falling back to plain shuffle",
            {k: len(v) for k, v in by_label.items()})
        shuffled = list(ids)
        rng.shuffle(shuffled)
        return DatasetSplit(tuple(shuffled[:n_train]), tuple(shuffled[n_train:]), seed)

    labels = sorted(by_label)
    shuffled = {}
    take = {}
    for label in labels:
        group = list(by_label[label])
        rng.shuffle(group)
        shuffled[label] = group
        # keep at least one sample of each class on each side
        take[label] = min(max(_round_half_up(TRAIN_FRACTION * len(group)), 1),
                          len(group) - 1)
    # reconcile per-class rounding with the global 75% count
    while sum(take.values()) > n_train:
        label = max(labels, key=lambda l: (take[l], l))
        if take[label] <= 1:
            break
        take[label] -= 1
    while sum(take.values()) < n_train:
        label = max(labels, key=lambda l: (len(shuffled[l]) - take[l], l))
        if take[label] >= len(shuffled[label]) - 1:
            break
        take[label] += 1

    train, test = [], []
    for label in labels:
        train.extend(shuffled[label][:take[label]])
        test.extend(shuffled[label][take[label]:])
    return DatasetSplit(tuple(train), tuple(test), seed)


def make_batches(ids: Sequence[str], batch_size: int, epoch_seed: int,
                 drop_partial: bool) -> list[list[str]]:
    """Seeded shuffle then fixed-size chunks.

    Contrastive phases (``drop_partial=True``) require batch_size >= 2 and
    drop the trailing partial batch so every softmax ranges over a full
    batch; fine-tuning and evaluation keep the remainder.
    """
    if drop_partial and batch_size < 2:
        raise ConfigError(
            f"contrastive batches need batch_size >= 2, got {batch_size}")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(epoch_seed)))
    order = list(ids)
    rng.shuffle(order)
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if drop_partial and batches and len(batches[-1]) < batch_size:
        batches.pop()
    return batches


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

LESION_MIN_SEMI_AXIS = 4.5
LESION_SUPPORT_THRESHOLD = 12  # 8-bit intensity links bbox to visible extent


def _soft_ellipse(res: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy = (np.arange(res, dtype=np.float64)[:, None] - cy) / ry
    xx = (np.arange(res, dtype=np.float64)[None, :] - cx) / rx
    return np.clip(1.0 - (yy * yy + xx * xx), 0.0, 1.0)


def _value_noise(rng: np.random.Generator, res: int) -> np.ndarray:
    """Octaves of bilinearly upsampled random grids, normalised to [0, 1]."""
    total = np.zeros((res, res), dtype=np.float64)
    weight_sum = 0.0
    for cell, weight in ((res // 4, 1.0), (res // 8, 0.5), (res // 16, 0.25)):
        grid = rng.random((max(cell, 2), max(cell, 2)))
        total += weight * resize_bilinear(grid, res, res)
        weight_sum += weight
    total /= weight_sum
    lo, hi = total.min(), total.max()
    return (total - lo) / (hi - lo) if hi > lo else np.zeros_like(total)


def _box_blur(arr: np.ndarray, passes: int = 2) -> np.ndarray:
    out = arr.astype(np.float64)
    for _ in range(passes):
        padded = np.pad(out, 1, mode="edge")
        acc = np.zeros_like(out)
        for di in range(3):
            for dj in range(3):
                acc += padded[di:di + out.shape[0], dj:dj + out.shape[1]]
        out = acc / 9.0
    return out


LESION_MIN_MARGIN = 6.0  # required inside-vs-outside mean intensity gap


def _synth_sample(idx: int, seed: int, res: int) -> Sample:
    rng = substream(seed, "sample", idx)
    label = idx % 2
    img = 105.0 + 80.0 * _value_noise(rng, res)

    lung_centers = []
    for side in (0.32, 0.68):
        cx = side * res + rng.uniform(-0.03, 0.03) * res
        cy = 0.52 * res + rng.uniform(-0.03, 0.03) * res
        rx = 0.15 * res * rng.uniform(0.9, 1.1)
        ry = 0.30 * res * rng.uniform(0.9, 1.1)
        img -= 40.0 * _soft_ellipse(res, cy, cx, ry, rx) ** 0.6
        lung_centers.append((cy, cx))

    for _ in range(int(rng.integers(1, 3))):
        cy = rng.uniform(0.15, 0.85) * res
        cx = rng.uniform(0.15, 0.85) * res
        r = rng.uniform(3.0, 6.0)
        img -= rng.uniform(8.0, 18.0) * _soft_ellipse(res, cy, cx, r, r)

    # per-study exposure jitter, as with real acquisitions
    img = img * rng.uniform(0.88, 1.12) + rng.uniform(-10.0, 10.0)

    bbox = None
    if label == 1:
        cy0, cx0 = lung_centers[int(rng.integers(0, 2))]
        lo = max(LESION_MIN_SEMI_AXIS, 0.09 * res)
        hi = max(lo + 1.0, 0.18 * res)
        ry = rng.uniform(lo, hi)
        rx = rng.uniform(lo, hi)
        margin_y, margin_x = ry + 3.0, rx + 3.0
        cy = np.clip(cy0 + rng.uniform(-0.08, 0.08) * res, margin_y, res - 1 - margin_y)
        cx = np.clip(cx0 + rng.uniform(-0.08, 0.08) * res, margin_x, res - 1 - margin_x)
        amp = rng.uniform(70.0, 110.0)
        added = _box_blur(amp * _soft_ellipse(res, cy, cx, ry, rx) ** 1.2)
        rows = np.where((added >= LESION_SUPPORT_THRESHOLD).any(axis=1))[0]
        cols = np.where((added >= LESION_SUPPORT_THRESHOLD).any(axis=0))[0]
        bbox = BoundingBox(int(cols[0]), int(rows[0]),
                           int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))
        # guarantee the box is the brightest region: top up weak lesions once
        box = np.zeros((res, res), dtype=bool)
        box[bbox.y:bbox.y + bbox.h, bbox.x:bbox.x + bbox.w] = True
        margin = (img[box] + added[box]).mean() - (img[~box] + added[~box]).mean()
        if margin < LESION_MIN_MARGIN:
            added *= 1.0 + (LESION_MIN_MARGIN - margin) / max(added[box].mean(), 1.0)
        img += added

    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Sample(id=f"s{idx:04d}", image=GrayImage(pixels), label=label, bbox=bbox)


def generate_synthetic_dataset(n: int, seed: int, resolution: int,
                               out_dir: str) -> list[Sample]:
    """Write n synthetic chest-like images plus a manifest under out_dir.

    Even indices are normals; odd indices carry one bright blurred lesion
    whose tight bounds become the manifest box.  Layout:
    ``out_dir/manifest.csv`` and ``out_dir/images/<id>.png``.
    """
    if n < 8:
        raise ContractError(f"need n >= 8, got {n}")
    if resolution < 32:
        raise ContractError(f"need resolution >= 32, got {resolution}")
    image_dir = os.path.join(out_dir, "images")
    os.makedirs(image_dir, exist_ok=True)
    samples = [_synth_sample(i, seed, resolution) for i in range(n)]
    for s in samples:
        save_png(s.image, os.path.join(image_dir, f"{s.id}.png"))
    write_manifest(samples, os.path.join(out_dir, "manifest.csv"))
    return samples
