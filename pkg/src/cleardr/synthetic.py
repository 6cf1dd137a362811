"""Planted-lesion fixture data: each class is a distinct textured blob at a
random position on a dark noisy background.

The class textures differ in both color and stripe orientation, all of them
symmetric under horizontal and vertical flips, so flip augmentation never
changes a label.  The generator also reports each blob's bounding box, which
is what localization checks compare attentive regions against.

Run as a script to write a PNG/CSV fixture tree:

    python3 -m cleardr.synthetic --out DIR --count 60 --seed 7
"""

from __future__ import annotations

import argparse
import csv
from pathlib import Path

import numpy as np

from . import discovery as D
from . import sequencer as S
from .errors import DomainError


def _texture(cls: int, blob: int, rng: np.random.Generator) -> np.ndarray:
    """A (blob, blob, 3) patch: stripes or checks in a class-specific color."""
    period = 5
    phase = int(rng.integers(0, period))
    amp = 0.85 + 0.15 * float(rng.random())
    rows = (np.arange(blob) + phase) // (period // 2 + 1) % 2
    cols = (np.arange(blob) + phase) // (period // 2 + 1) % 2
    if cls % 3 == 0:
        wave = rows[:, None] * np.ones(blob)[None, :]
        color = (0.95, 0.55, 0.20)
    elif cls % 3 == 1:
        wave = np.ones(blob)[:, None] * cols[None, :]
        color = (0.30, 0.95, 0.35)
    else:
        wave = (rows[:, None] + cols[None, :]) % 2
        color = (0.45, 0.55, 0.98)
    brightness = (0.40 + 0.60 * wave) * amp
    patch = brightness[:, :, None] * np.asarray(color)
    patch += rng.normal(0.0, 0.02, patch.shape)
    return np.clip(patch, 0.0, 1.0)


def make_blob_dataset(
    count: int = 600,
    size: int = 64,
    classes: int = 3,
    blob: int = 20,
    seed: int = 7,
    margin: int = 2,
) -> tuple[D.LabeledDataset, np.ndarray]:
    """Balanced dataset of ``count`` images plus (count, 4) blob boxes as
    (top, left, height, width)."""
    if count < 1 or classes < 1 or blob < 1 or margin < 0:
        raise DomainError("count, classes and blob must be positive, margin non-negative")
    if blob + 2 * margin > size:
        raise DomainError(f"blob {blob} with margin {margin} does not fit in {size}x{size}")
    rng = np.random.default_rng(seed)
    images = np.empty((count, 3, size, size), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    boxes = np.empty((count, 4), dtype=np.int64)
    span = size - blob - 2 * margin + 1
    for i in range(count):
        cls = i % classes
        canvas = np.clip(rng.normal(0.05, 0.04, (size, size, 3)), 0.0, 0.15)
        top = margin + int(rng.integers(0, span))
        left = margin + int(rng.integers(0, span))
        canvas[top : top + blob, left : left + blob] = _texture(cls, blob, rng)
        images[i] = canvas.astype(np.float32).transpose(2, 0, 1)
        labels[i] = cls
        boxes[i] = (top, left, blob, blob)
    refs = tuple(f"blob_{i:05d}" for i in range(count))
    dataset = D.LabeledDataset(
        images=images, labels=labels, grades=S.GradeSet.generic(classes), refs=refs
    )
    return dataset, boxes


def box_iou(a, b) -> float:
    """Intersection over union of two (top, left, height, width) boxes."""
    at, al, ah, aw = (int(v) for v in a)
    bt, bl, bh, bw = (int(v) for v in b)
    iy = max(0, min(at + ah, bt + bh) - max(at, bt))
    ix = max(0, min(al + aw, bl + bw) - max(al, bl))
    inter = iy * ix
    union = ah * aw + bh * bw - inter
    return inter / union if union else 0.0


def write_fixture_tree(out_dir, count: int = 60, size: int = 64, classes: int = 3,
                       blob: int = 20, seed: int = 7) -> Path:
    """Materialize the dataset as PNGs plus labels.csv and boxes.csv."""
    from . import ingest  # local import: ingest pulls in the PNG codec

    out = Path(out_dir)
    image_dir = out / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    dataset, boxes = make_blob_dataset(
        count=count, size=size, classes=classes, blob=blob, seed=seed
    )
    with open(out / "labels.csv", "w", newline="", encoding="utf-8") as lab_fh, open(
        out / "boxes.csv", "w", newline="", encoding="utf-8"
    ) as box_fh:
        labels = csv.writer(lab_fh)
        labels.writerow(["image", "level"])
        boxes_csv = csv.writer(box_fh)
        boxes_csv.writerow(["image", "top", "left", "height", "width"])
        for i, stem in enumerate(dataset.refs):
            ingest.write_png(image_dir / f"{stem}.png", ingest.from_map(dataset.images[i]))
            labels.writerow([stem, int(dataset.labels[i])])
            boxes_csv.writerow([stem] + [int(v) for v in boxes[i]])
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="python3 -m cleardr.synthetic",
        description="Write a planted-lesion PNG/CSV fixture tree.",
    )
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--count", type=int, default=60, help="number of images (default 60)")
    parser.add_argument("--size", type=int, default=64, help="canvas side (default 64)")
    parser.add_argument("--classes", type=int, default=3, help="class count (default 3)")
    parser.add_argument("--blob", type=int, default=20, help="blob side (default 20)")
    parser.add_argument("--seed", type=int, default=7, help="generator seed (default 7)")
    args = parser.parse_args(argv)
    out = write_fixture_tree(
        args.out, count=args.count, size=args.size, classes=args.classes,
        blob=args.blob, seed=args.seed,
    )
    print(f"wrote {args.count} images under {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
