"""Dataset ingest: label manifests in the `image,level` CSV convention,
selective background cropping, bilinear resizing and u8/tensor conversion.

Images are 8-bit RGB throughout; tensors are float32 NCHW in [0, 1].
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import discovery as D
from . import sequencer as S
from .errors import DomainError, ManifestError, ShapeError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)  # Rec. 601
DEFAULT_CROP_THRESHOLD = 10.0
IMAGE_SUFFIXES = (".png", ".jpeg", ".jpg")


@dataclass(frozen=True)
class ManifestEntry:
    stem: str
    path: Path
    grade: int


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    entries: tuple[ManifestEntry, ...]
    grade_count: int

    def __len__(self) -> int:
        return len(self.entries)


def _resolve_image(image_dir: Path, name: str) -> Path | None:
    direct = image_dir / name
    if direct.suffix and direct.is_file():
        return direct
    for suffix in IMAGE_SUFFIXES:
        cand = image_dir / (name + suffix)
        if cand.is_file():
            return cand
    return None


def load_manifest(csv_path, image_dir, laterality: str = "all",
                  grade_count: int = 5) -> DatasetManifest:
    """Read an `image,level` CSV and resolve each row to an image file.

    ``laterality`` "right" keeps only stems ending in ``_right``, "left"
    likewise, "all" keeps every row.  Rows are kept in CSV order.
    """
    if laterality not in ("all", "right", "left"):
        raise DomainError(f"laterality must be all/right/left, got {laterality!r}")
    csv_path = Path(csv_path)
    image_dir = Path(image_dir)
    if not csv_path.is_file():
        raise ManifestError(f"manifest CSV not found: {csv_path}")
    if not image_dir.is_dir():
        raise ManifestError(f"image directory not found: {image_dir}")

    entries = []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{csv_path}: empty manifest") from None
        if [h.strip().lower() for h in header[:2]] != ["image", "level"]:
            raise ManifestError(
                f"{csv_path}: header must start with 'image,level', got {','.join(header)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise ManifestError(f"{csv_path}:{lineno}: expected 2 columns, got {len(row)}")
            name = row[0].strip()
            try:
                grade = int(row[1].strip())
            except ValueError:
                raise ManifestError(
                    f"{csv_path}:{lineno}: level {row[1]!r} is not an integer"
                ) from None
            if not 0 <= grade < grade_count:
                raise ManifestError(
                    f"{csv_path}:{lineno}: level {grade} outside [0, {grade_count})"
                )
            stem = Path(name).stem
            if laterality != "all" and not stem.endswith(f"_{laterality}"):
                continue
            path = _resolve_image(image_dir, name)
            if path is None:
                raise ManifestError(
                    f"{csv_path}:{lineno}: image {name!r} not found under {image_dir}"
                )
            entries.append(ManifestEntry(stem=stem, path=path, grade=grade))
    return DatasetManifest(root=image_dir, entries=tuple(entries), grade_count=grade_count)


def read_image(path) -> np.ndarray:
    """Decode PNG or JPEG to uint8 (H, W, 3)."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def write_png(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ShapeError(f"expected uint8 (H, W, 3), got {image.dtype} {image.shape}")
    Image.fromarray(image, mode="RGB").save(path, format="PNG")


def luminance(image: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of an 8-bit RGB image, float32 in [0, 255]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3), got {image.shape}")
    return image.astype(np.float32) @ np.asarray(LUMA_WEIGHTS, dtype=np.float32)


def selective_crop(image: np.ndarray, threshold: float = DEFAULT_CROP_THRESHOLD) -> np.ndarray:
    """Tightest bounding box of pixels whose luma exceeds the threshold.

    If nothing exceeds it, the image comes back unchanged.  The output is
    always a contiguous sub-rectangle, never an enlargement.
    """
    if not 0.0 <= threshold <= 255.0:
        raise DomainError(f"threshold must lie in [0, 255], got {threshold}")
    mask = luminance(image) > threshold
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return image
    return image[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]


def resize(image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resize with the half-pixel center convention.

    Destination pixel centers map to source coordinates
    ``(i + 0.5) * src / dst - 0.5``, clamped to the image, so resizing to the
    same size reproduces the input exactly and 2x2 -> 1x1 samples the center
    (the four-pixel average).
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3), got {image.shape}")
    if target_h < 1 or target_w < 1:
        raise DomainError(f"target extents must be positive, got {(target_h, target_w)}")
    h, w = image.shape[:2]
    if (h, w) == (target_h, target_w):
        return image.copy()

    ys = np.clip((np.arange(target_h, dtype=np.float64) + 0.5) * h / target_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(target_w, dtype=np.float64) + 0.5) * w / target_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]

    src = image.astype(np.float64)
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bot = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def to_tensor(image: np.ndarray) -> np.ndarray:
    """uint8 (H, W, 3) to float32 (1, 3, H, W) scaled to [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3), got {image.shape}")
    return np.ascontiguousarray(
        image.astype(np.float32).transpose(2, 0, 1)[None] / np.float32(255.0)
    )


def from_map(arr: np.ndarray) -> np.ndarray:
    """Float image in [0, 1] to uint8 (H, W, 3).

    Accepts (H, W, 3), (3, H, W), (1, 3, H, W) or a single (H, W) plane,
    which is replicated across channels.
    """
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 3 and arr.shape[0] == 3 and arr.shape[2] != 3:
        arr = arr.transpose(1, 2, 0)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"cannot interpret shape {arr.shape} as an RGB image")
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def preprocess(image: np.ndarray, size: int,
               crop_threshold: float = DEFAULT_CROP_THRESHOLD) -> np.ndarray:
    """Crop away dark background, resize to a square canvas, convert to a
    tensor."""
    return to_tensor(resize(selective_crop(image, crop_threshold), size, size))


def load_dataset(manifest: DatasetManifest, size: int,
                 crop_threshold: float = DEFAULT_CROP_THRESHOLD,
                 grades: S.GradeSet | None = None) -> D.LabeledDataset:
    """Decode and preprocess every manifest entry into a LabeledDataset."""
    if len(manifest) == 0:
        raise ManifestError("manifest holds no entries")
    grades = grades or S.GradeSet.generic(manifest.grade_count)
    if grades.count != manifest.grade_count:
        raise DomainError(
            f"grade set covers {grades.count} grades, manifest declares "
            f"{manifest.grade_count}"
        )
    images = np.concatenate(
        [preprocess(read_image(e.path), size, crop_threshold) for e in manifest.entries]
    )
    labels = np.asarray([e.grade for e in manifest.entries], dtype=np.int64)
    refs = tuple(e.stem for e in manifest.entries)
    return D.LabeledDataset(images=images, labels=labels, grades=grades, refs=refs)
