"""Attentive-response maps and their color-coded composition.

For a traced forward pass, each grade's kernel response at the final conv
layer is projected back to the input plane through the adjoints of the very
layers that produced it: transposed convolution for conv layers, switch-driven
unpooling for max-pool layers, and a configurable rectification at each
interior ReLU site.  The per-grade maps are then fused into a single RGB image
where hue encodes the locally dominant grade and brightness encodes how
strongly that grade's kernels responded.

Because every backward step is linear for a fixed trace (switches and gates
frozen), back-projection with gating "none" distributes over sums of
responses, and positive scaling of the response never changes which grade
dominates a pixel.
"""

from __future__ import annotations

import struct
from collections import namedtuple
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_ops as T
from . import sequencer as S
from .errors import (
    DomainError,
    IntegrityError,
    ShapeError,
)

GATING_POLICIES = ("deconvnet", "guided", "none")

STACK_MAGIC = b"CLRA"

Rect = namedtuple("Rect", ["top", "left", "height", "width"])


@dataclass(frozen=True)
class GradeColorMap:
    """Injective assignment of a hue in [0, 1) to each grade index."""

    hues: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "hues", tuple(float(h) for h in self.hues))
        if not self.hues:
            raise DomainError("color map needs at least one hue")
        for h in self.hues:
            if not 0.0 <= h < 1.0:
                raise DomainError(f"hue {h} outside [0, 1)")
        if len(set(self.hues)) != len(self.hues):
            raise DomainError("hues must be distinct per grade")

    @staticmethod
    def evenly_spaced(count: int) -> "GradeColorMap":
        if count < 1:
            raise DomainError("need at least one grade")
        return GradeColorMap(tuple(d / count for d in range(count)))

    def hue(self, grade: int) -> float:
        if not 0 <= grade < len(self.hues):
            raise DomainError(f"grade {grade} outside [0, {len(self.hues)})")
        return self.hues[grade]


@dataclass
class AttentiveResponseStack:
    """One input-plane response map per grade, shape (N, H, W)."""

    maps: np.ndarray
    grades: S.GradeSet
    gating: str

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float32)
        if self.maps.ndim != 3:
            raise ShapeError(f"stack must be (N, H, W), got {self.maps.shape}")
        if self.maps.shape[0] != self.grades.count:
            raise ShapeError(
                f"stack holds {self.maps.shape[0]} maps for {self.grades.count} grades"
            )


@dataclass
class DominantResponseMap:
    """Winning response per pixel; ``rectified`` clips negatives to zero."""

    raw: np.ndarray
    rectified: np.ndarray = field(init=False)

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float32)
        if self.raw.ndim != 2:
            raise ShapeError(f"response map must be 2-D, got {self.raw.shape}")
        self.rectified = np.maximum(self.raw, 0.0)


@dataclass
class ClearMap:
    """The fused map: float RGB in [0, 1] plus the planes it was built from."""

    rgb: np.ndarray          # (H, W, 3) float32
    class_map: np.ndarray    # (H, W) int64 grade indices
    value: np.ndarray        # (H, W) float32 in [0, 1]
    palette: GradeColorMap
    model_checksum: int | None = None
    gating: str = "deconvnet"


def _layer_index_before_gap(config: S.SequencerConfig) -> int:
    return config.gap_index() - 1


def _check_trace(trace: S.ForwardTrace, model: S.SequencerModel) -> None:
    if trace.model_checksum != model.checksum():
        raise IntegrityError(
            "forward trace was produced by a different model "
            f"(trace checksum {trace.model_checksum:#010x}, "
            f"model checksum {model.checksum():#010x})"
        )
    if len(trace.records) != len(model.config.layers):
        raise IntegrityError(
            f"trace has {len(trace.records)} layer records for "
            f"{len(model.config.layers)} layers"
        )


def _check_gating(gating: str) -> None:
    if gating not in GATING_POLICIES:
        raise DomainError(f"unknown gating policy {gating!r}, expected one of {GATING_POLICIES}")


def grade_response(trace: S.ForwardTrace, model: S.SequencerModel, grade: int) -> np.ndarray:
    """The final conv stage's response with every channel but ``grade`` zeroed.

    The final conv layer has exactly one kernel per grade, so zeroing the
    other channels isolates that grade's kernels exactly.
    """
    if not 0 <= grade < model.config.grades.count:
        raise DomainError(f"grade {grade} outside [0, {model.config.grades.count})")
    z = trace.records[_layer_index_before_gap(model.config)].output
    masked = np.zeros_like(z)
    masked[:, grade] = z[:, grade]
    return masked


def back_project(
    trace: S.ForwardTrace,
    model: S.SequencerModel,
    response: np.ndarray | None = None,
    gating: str = "deconvnet",
) -> np.ndarray:
    """Project a final-stage response back to the input plane and collapse
    channels.

    ``response`` must be shaped like the layer output feeding global average
    pooling; it defaults to that output itself (all grades at once).  The
    walk applies, in reverse layer order, the conv adjoints, the recorded
    unpooling switches and the chosen ReLU treatment:

    - "deconvnet": rectify the backward signal (default),
    - "guided": rectify and also apply the forward ReLU gate,
    - "none": pass through, which keeps the walk exactly linear.

    ReLU layers sitting after the final conv are part of the traced response
    itself and are never re-applied on the way down.
    """
    _check_trace(trace, model)
    _check_gating(gating)
    z = trace.records[_layer_index_before_gap(model.config)].output
    if response is None:
        response = z
    response = np.asarray(response, dtype=np.float32)
    if response.shape != z.shape:
        raise ShapeError(f"response shape {response.shape} does not match {z.shape}")

    banks = list(model.banks)
    signal = response
    seen_conv = False
    for i in reversed(range(model.config.gap_index())):
        spec = model.config.layers[i]
        rec = trace.records[i]
        if spec.kind == "conv":
            bank = banks.pop()
            signal = T.conv2d_adjoint(
                signal, bank, spec.stride, spec.padding,
                input_shape=trace.layer_input(i).shape,
            )
            seen_conv = True
        elif spec.kind == "maxpool":
            signal = T.unpool(signal, rec.switches)
        elif spec.kind == "relu":
            if not seen_conv:
                continue
            if gating == "deconvnet":
                signal = np.maximum(signal, 0.0)
            elif gating == "guided":
                signal = np.maximum(signal, 0.0) * rec.gate
    return signal.sum(axis=1)[0]


def attentive_response(
    trace: S.ForwardTrace,
    model: S.SequencerModel,
    grade: int,
    gating: str = "deconvnet",
) -> np.ndarray:
    """Input-plane response map (H, W) of a single grade's kernels."""
    return back_project(trace, model, grade_response(trace, model, grade), gating)


def attentive_stack(
    trace: S.ForwardTrace,
    model: S.SequencerModel,
    gating: str = "deconvnet",
) -> AttentiveResponseStack:
    """All grades' response maps, stacked in grade order."""
    maps = np.stack(
        [
            attentive_response(trace, model, d, gating)
            for d in range(model.config.grades.count)
        ]
    )
    return AttentiveResponseStack(maps=maps, grades=model.config.grades, gating=gating)


def dominant_class_map(stack: AttentiveResponseStack) -> np.ndarray:
    """Per pixel, the grade whose response is largest (lowest index on ties)."""
    return np.argmax(stack.maps, axis=0).astype(np.int64)


def dominant_response_map(stack: AttentiveResponseStack,
                          class_map: np.ndarray | None = None) -> DominantResponseMap:
    """Per pixel, the winning grade's response value."""
    if class_map is None:
        class_map = dominant_class_map(stack)
    class_map = np.asarray(class_map)
    if class_map.shape != stack.maps.shape[1:]:
        raise ShapeError(
            f"class map {class_map.shape} does not match stack {stack.maps.shape[1:]}"
        )
    rows, cols = np.indices(class_map.shape)
    return DominantResponseMap(raw=stack.maps[class_map, rows, cols])


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorized HSV to RGB, all components in [0, 1], output (..., 3)."""
    h = np.asarray(h, dtype=np.float32)
    s = np.asarray(s, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    h6 = (h % 1.0) * 6.0
    k = np.floor(h6).astype(np.int64) % 6
    f = (h6 - np.floor(h6)).astype(np.float32)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(k, [v, q, p, p, t, v])
    g = np.choose(k, [t, v, v, q, p, p])
    b = np.choose(k, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1).astype(np.float32)


def compose_clear_map(
    class_map: np.ndarray,
    response: DominantResponseMap,
    palette: GradeColorMap,
    model_checksum: int | None = None,
    gating: str = "deconvnet",
) -> ClearMap:
    """Fuse the dominant grade and its response strength into one RGB image.

    Hue comes from the palette, saturation is 1 everywhere, and value is the
    rectified winning response min-max normalized over the image (a constant
    response map renders black).
    """
    class_map = np.asarray(class_map, dtype=np.int64)
    if class_map.ndim != 2:
        raise ShapeError(f"class map must be 2-D, got {class_map.shape}")
    if response.rectified.shape != class_map.shape:
        raise ShapeError(
            f"response map {response.rectified.shape} does not match class map "
            f"{class_map.shape}"
        )
    if class_map.size and (class_map.min() < 0 or class_map.max() >= len(palette.hues)):
        raise DomainError(
            f"class map holds grade {int(class_map.max())}, palette covers "
            f"[0, {len(palette.hues)})"
        )
    rect = response.rectified
    lo = float(rect.min())
    hi = float(rect.max())
    if hi > lo:
        value = ((rect - lo) / (hi - lo)).astype(np.float32)
    else:
        value = np.zeros_like(rect, dtype=np.float32)
    hues = np.asarray(palette.hues, dtype=np.float32)[class_map]
    rgb = hsv_to_rgb(hues, np.ones_like(value), value)
    return ClearMap(
        rgb=rgb,
        class_map=class_map,
        value=value,
        palette=palette,
        model_checksum=model_checksum,
        gating=gating,
    )


def _hue_ratio(hue: float) -> tuple[int, float]:
    """HSV sector index and the mid-channel/value ratio for a fully saturated
    color of this hue."""
    h6 = (hue % 1.0) * 6.0
    k = int(np.floor(h6)) % 6
    f = h6 - np.floor(h6)
    x = f if k % 2 == 0 else 1.0 - f
    return k, float(x)


def _minimal_denominator(x: float, max_den: int = 64, tol: float = 1e-6) -> int:
    """Smallest r with x*r integral, or 0 when no small denominator exists."""
    for r in range(1, max_den + 1):
        if abs(x * r - round(x * r)) <= tol:
            return r
    return 0


def clear_map_to_u8(cm: ClearMap) -> np.ndarray:
    """Quantize to 8-bit RGB without disturbing hue.

    Rounding each channel independently can shift the recovered hue by up to
    1/(6*max_channel), far too much for dark pixels.  Instead the max channel
    is snapped to a multiple of the hue ratio's denominator, so the mid
    channel lands exactly on an integer and the ratio (hence the hue) decodes
    exactly.  Saturation stays exactly 1 because the min channel is 0; the
    value plane absorbs the brightness error, bounded by half the denominator
    step.
    """
    h, w = cm.value.shape
    out = np.zeros((h, w, 3), dtype=np.float64)
    for d, hue in enumerate(cm.palette.hues):
        mask = cm.class_map == d
        if not mask.any():
            continue
        v = cm.value[mask].astype(np.float64)
        k, x = _hue_ratio(hue)
        r = _minimal_denominator(x)
        if r:
            q = np.clip(np.rint(255.0 * v / r) * r, 0.0, 255.0)
        else:
            q = np.rint(255.0 * v)
        m = np.rint(q * x)
        zeros = np.zeros_like(q)
        channels = {
            0: (q, m, zeros),
            1: (m, q, zeros),
            2: (zeros, q, m),
            3: (zeros, m, q),
            4: (m, zeros, q),
            5: (q, zeros, m),
        }[k]
        for c in range(3):
            plane = out[:, :, c]
            plane[mask] = channels[c]
    return out.astype(np.uint8)


def overlay(cm: ClearMap, source: np.ndarray, alpha: float) -> np.ndarray:
    """Blend the map over a grayscale rendering of the source image.

    ``source`` is (H, W, 3), either uint8 or float in [0, 1].  alpha 0 gives
    the plain grayscale source, alpha 1 the map alone.
    """
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    src = np.asarray(source)
    if src.ndim != 3 or src.shape[2] != 3:
        raise ShapeError(f"source must be (H, W, 3), got {src.shape}")
    if src.shape[:2] != cm.rgb.shape[:2]:
        raise ShapeError(
            f"source {src.shape[:2]} does not match map {cm.rgb.shape[:2]}"
        )
    if src.dtype == np.uint8:
        src = src.astype(np.float32) / 255.0
    else:
        src = src.astype(np.float32)
    gray = src @ np.asarray([0.299, 0.587, 0.114], dtype=np.float32)
    gray3 = np.repeat(gray[:, :, None], 3, axis=2)
    return (alpha * cm.rgb + (1.0 - alpha) * gray3).astype(np.float32)


def most_attentive_region(response, box) -> Rect:
    """Top-left placement of the box whose rectified response sum is largest.

    Ties resolve to the topmost, then leftmost placement.  ``box`` is a side
    length or an (height, width) pair.
    """
    if isinstance(response, DominantResponseMap):
        arr = response.rectified
    else:
        arr = np.maximum(np.asarray(response, dtype=np.float32), 0.0)
    if arr.ndim != 2:
        raise ShapeError(f"response map must be 2-D, got {arr.shape}")
    if isinstance(box, (int, np.integer)):
        bh = bw = int(box)
    else:
        bh, bw = (int(v) for v in box)
    if bh < 1 or bw < 1:
        raise DomainError(f"box extents must be positive, got {(bh, bw)}")
    hgt, wid = arr.shape
    if bh > hgt or bw > wid:
        raise ShapeError(f"box {(bh, bw)} exceeds map {arr.shape}")
    windows = np.lib.stride_tricks.sliding_window_view(arr.astype(np.float64), (bh, bw))
    sums = windows.sum(axis=(2, 3))
    flat = int(np.argmax(sums))
    top, left = divmod(flat, sums.shape[1])
    return Rect(top=top, left=left, height=bh, width=bw)


def draw_box(image_u8: np.ndarray, rect: Rect,
             color: tuple[int, int, int] = (255, 0, 0)) -> np.ndarray:
    """Return a copy with a one-pixel rectangle outline burned in."""
    img = np.asarray(image_u8)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ShapeError(f"expected uint8 (H, W, 3), got {img.dtype} {img.shape}")
    out = img.copy()
    t, l = rect.top, rect.left
    b, r = t + rect.height - 1, l + rect.width - 1
    h, w = out.shape[:2]
    if t < 0 or l < 0 or b >= h or r >= w:
        raise ShapeError(f"box {rect} exceeds image {out.shape[:2]}")
    col = np.asarray(color, dtype=np.uint8)
    out[t, l : r + 1] = col
    out[b, l : r + 1] = col
    out[t : b + 1, l] = col
    out[t : b + 1, r] = col
    return out


def write_stack(path, stack: AttentiveResponseStack) -> None:
    """Raw sidecar: magic, N/H/W as little-endian u32, float32 map data."""
    n, h, w = stack.maps.shape
    with open(path, "wb") as fh:
        fh.write(STACK_MAGIC)
        fh.write(struct.pack("<3I", n, h, w))
        fh.write(stack.maps.astype("<f4").tobytes())


def read_stack(path, grades: S.GradeSet | None = None,
               gating: str = "deconvnet") -> AttentiveResponseStack:
    """Read a sidecar written by :func:`write_stack`."""
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:4] != STACK_MAGIC:
        raise IntegrityError(f"not a response-stack sidecar: {path}")
    n, h, w = struct.unpack("<3I", buf[4:16])
    expect = 16 + 4 * n * h * w
    if len(buf) != expect:
        raise IntegrityError(
            f"sidecar holds {len(buf)} bytes, header declares {expect}"
        )
    maps = np.frombuffer(buf[16:], dtype="<f4").reshape(n, h, w).astype(np.float32)
    grades = grades or S.GradeSet.generic(n)
    return AttentiveResponseStack(maps=maps, grades=grades, gating=gating)
