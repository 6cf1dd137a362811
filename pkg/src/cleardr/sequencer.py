"""The radiomic sequencer: an ordered conv/relu/maxpool/gap layer stack with
one output kernel per grade, plus forward tracing and checkpoint I/O.

The forward trace keeps every intermediate activation together with the
max-pool switches and ReLU gate masks, which is exactly the material the
attentive-response back-projection needs.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import tensor_ops as T
from .errors import (
    CheckpointChecksumError,
    CheckpointFormatError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    ShapeError,
)

CHECKPOINT_MAGIC = b"CLRS"
CHECKPOINT_VERSION = 1

DR_GRADE_NAMES = ("Negative", "Mild", "Moderate", "Severe", "Proliferative")


@dataclass(frozen=True)
class GradeSet:
    """The ordered disease grades the sequencer distinguishes."""

    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        if len(self.names) < 1:
            raise ConfigError("grade set must contain at least one grade")

    @property
    def count(self) -> int:
        return len(self.names)

    @staticmethod
    def default() -> "GradeSet":
        """The five retinopathy grades, Negative through Proliferative."""
        return GradeSet(DR_GRADE_NAMES)

    @staticmethod
    def generic(count: int) -> "GradeSet":
        if count == 5:
            return GradeSet.default()
        return GradeSet(tuple(f"Grade{i}" for i in range(count)))


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kh: int
    kw: int
    stride: int = 1
    padding: int = 0
    kind: str = field(default="conv", init=False)


@dataclass(frozen=True)
class ReluSpec:
    kind: str = field(default="relu", init=False)


@dataclass(frozen=True)
class PoolSpec:
    window: int
    stride: int
    kind: str = field(default="maxpool", init=False)


@dataclass(frozen=True)
class GapSpec:
    kind: str = field(default="gap", init=False)


LayerSpec = Union[ConvSpec, ReluSpec, PoolSpec, GapSpec]


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean and standard deviation of a training split."""

    mean: tuple[float, ...]
    std: tuple[float, ...]


@dataclass(frozen=True)
class SequencerConfig:
    """Layer stack plus input shape and grade set, validated end to end."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]  # (channels, height, width)
    grades: GradeSet

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        self.layer_shapes()  # raises ConfigError on the first bad layer

    def layer_shapes(self) -> list[tuple[int, int, int]]:
        """Shape (c, h, w) after each layer; validates the whole chain."""
        if len(self.input_shape) != 3 or any(v < 1 for v in self.input_shape):
            raise ConfigError(f"input shape must be 3 positive extents, got {self.input_shape}")
        if not self.layers:
            raise ConfigError("layer stack is empty")
        shapes = []
        c, h, w = self.input_shape
        last_conv = None
        gap_seen = False
        for i, spec in enumerate(self.layers):
            where = f"layer {i} ({spec.kind})"
            if gap_seen:
                raise ConfigError(f"{where}: no layers may follow gap")
            if spec.kind == "conv":
                if spec.out_channels < 1 or spec.kh < 1 or spec.kw < 1:
                    raise ConfigError(f"{where}: extents must be positive")
                if spec.stride < 1 or spec.padding < 0:
                    raise ConfigError(f"{where}: bad stride/padding")
                ho, wo = T.conv_output_hw(h, w, spec.kh, spec.kw, spec.stride, spec.padding)
                if ho < 1 or wo < 1:
                    raise ConfigError(f"{where}: output would be empty on input {(c, h, w)}")
                c, h, w = spec.out_channels, ho, wo
                last_conv = i
            elif spec.kind == "relu":
                pass
            elif spec.kind == "maxpool":
                if spec.window < 1 or spec.stride < 1:
                    raise ConfigError(f"{where}: window and stride must be positive")
                if spec.window > h or spec.window > w:
                    raise ConfigError(f"{where}: window {spec.window} exceeds input {(c, h, w)}")
                h = (h - spec.window) // spec.stride + 1
                w = (w - spec.window) // spec.stride + 1
            elif spec.kind == "gap":
                gap_seen = True
                h = w = 1
            else:
                raise ConfigError(f"{where}: unknown layer kind")
            shapes.append((c, h, w))
        if not gap_seen:
            raise ConfigError(f"layer {len(self.layers) - 1}: stack must end with gap")
        if last_conv is None:
            raise ConfigError("layer stack contains no conv layer")
        if self.layers[last_conv].out_channels != self.grades.count:
            raise ConfigError(
                f"layer {last_conv} (conv): final conv has "
                f"{self.layers[last_conv].out_channels} kernels but the grade set has "
                f"{self.grades.count}; one kernel per grade is required"
            )
        return shapes

    def last_conv_index(self) -> int:
        return max(i for i, s in enumerate(self.layers) if s.kind == "conv")

    def gap_index(self) -> int:
        return len(self.layers) - 1

    def conv_specs(self) -> list[ConvSpec]:
        return [s for s in self.layers if s.kind == "conv"]

    @staticmethod
    def default(grades: GradeSet = None, input_hw: int = 64) -> "SequencerConfig":
        """Desk-scale stack: two conv/relu/pool stages, a grade conv, relu, gap."""
        grades = grades or GradeSet.default()
        return SequencerConfig(
            layers=(
                ConvSpec(16, 3, 3, stride=1, padding=1),
                ReluSpec(),
                PoolSpec(window=2, stride=2),
                ConvSpec(32, 3, 3, stride=1, padding=1),
                ReluSpec(),
                PoolSpec(window=2, stride=2),
                ConvSpec(grades.count, 3, 3, stride=1, padding=1),
                ReluSpec(),
                GapSpec(),
            ),
            input_shape=(3, input_hw, input_hw),
            grades=grades,
        )

    def to_dict(self) -> dict:
        layers = []
        for s in self.layers:
            if s.kind == "conv":
                layers.append(
                    {
                        "kind": "conv",
                        "out_channels": s.out_channels,
                        "kh": s.kh,
                        "kw": s.kw,
                        "stride": s.stride,
                        "padding": s.padding,
                    }
                )
            elif s.kind == "maxpool":
                layers.append({"kind": "maxpool", "window": s.window, "stride": s.stride})
            else:
                layers.append({"kind": s.kind})
        return {
            "input_shape": list(self.input_shape),
            "grade_names": list(self.grades.names),
            "layers": layers,
        }

    @staticmethod
    def from_dict(data: dict) -> "SequencerConfig":
        try:
            layers = []
            for entry in data["layers"]:
                kind = entry["kind"]
                if kind == "conv":
                    layers.append(
                        ConvSpec(
                            int(entry["out_channels"]),
                            int(entry["kh"]),
                            int(entry["kw"]),
                            int(entry["stride"]),
                            int(entry["padding"]),
                        )
                    )
                elif kind == "relu":
                    layers.append(ReluSpec())
                elif kind == "maxpool":
                    layers.append(PoolSpec(int(entry["window"]), int(entry["stride"])))
                elif kind == "gap":
                    layers.append(GapSpec())
                else:
                    raise ConfigError(f"unknown layer kind {kind!r}")
            return SequencerConfig(
                layers=tuple(layers),
                input_shape=tuple(int(v) for v in data["input_shape"]),
                grades=GradeSet(tuple(data["grade_names"])),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed config descriptor: {exc}") from exc


@dataclass
class SequencerModel:
    """A configured stack plus one kernel bank per conv layer.

    Treated as immutable after construction; training produces new models.
    """

    config: SequencerConfig
    banks: list[T.KernelBank]
    norm: ChannelStats | None = None

    def __post_init__(self):
        specs = self.config.conv_specs()
        if len(self.banks) != len(specs):
            raise ConfigError(
                f"model has {len(self.banks)} kernel banks for {len(specs)} conv layers"
            )
        c = self.config.input_shape[0]
        shapes = [self.config.input_shape] + self.config.layer_shapes()
        bank_iter = iter(self.banks)
        for i, spec in enumerate(self.config.layers):
            if spec.kind != "conv":
                continue
            bank = next(bank_iter)
            expect = (spec.out_channels, shapes[i][0], spec.kh, spec.kw)
            if bank.weights.shape != expect:
                raise ConfigError(
                    f"layer {i} (conv): bank shape {bank.weights.shape} does not match "
                    f"spec {expect}"
                )

    def checksum(self) -> int:
        """CRC-32 over all weight and bias bytes, little-endian float32."""
        crc = 0
        for bank in self.banks:
            crc = zlib.crc32(bank.weights.astype("<f4").tobytes(), crc)
            crc = zlib.crc32(bank.bias.astype("<f4").tobytes(), crc)
        return crc


@dataclass
class LayerRecord:
    """One layer's contribution to a forward trace."""

    kind: str
    output: np.ndarray
    switches: T.SwitchRecord | None = None
    gate: np.ndarray | None = None


@dataclass
class ForwardTrace:
    """Everything one forward pass produced, layer by layer."""

    image: np.ndarray
    records: list[LayerRecord]
    logits: np.ndarray
    predicted: int
    model_checksum: int

    def layer_input(self, i: int) -> np.ndarray:
        return self.image if i == 0 else self.records[i - 1].output


def initialize(config: SequencerConfig, seed: int) -> SequencerModel:
    """Fresh model: zero-mean weights scaled by sqrt(2 / fan_in), zero biases.

    Fully determined by the seed.
    """
    shapes = [config.input_shape] + config.layer_shapes()
    rng = np.random.default_rng(seed)
    banks = []
    for i, spec in enumerate(config.layers):
        if spec.kind != "conv":
            continue
        in_c = shapes[i][0]
        fan_in = in_c * spec.kh * spec.kw
        scale = np.float32(math.sqrt(2.0 / fan_in))
        weights = rng.standard_normal(
            (spec.out_channels, in_c, spec.kh, spec.kw), dtype=np.float32
        )
        banks.append(
            T.KernelBank(
                weights=weights * scale,
                bias=np.zeros(spec.out_channels, dtype=np.float32),
            )
        )
    return SequencerModel(config=config, banks=banks)


def run_layers(model: SequencerModel, x: np.ndarray) -> list[LayerRecord]:
    """Run the stack on a batch, recording outputs, switches and gates."""
    records = []
    bank_iter = iter(model.banks)
    for spec in model.config.layers:
        if spec.kind == "conv":
            x = T.conv2d(x, next(bank_iter), spec.stride, spec.padding)
            records.append(LayerRecord("conv", x))
        elif spec.kind == "relu":
            x, gate = T.relu(x)
            records.append(LayerRecord("relu", x, gate=gate))
        elif spec.kind == "maxpool":
            x, switches = T.maxpool(x, spec.window, spec.stride)
            records.append(LayerRecord("maxpool", x, switches=switches))
        else:
            x = T.global_average_pool(x)
            records.append(LayerRecord("gap", x))
    return records


def forward(model: SequencerModel, image) -> ForwardTrace:
    """Single-image forward pass with a full trace."""
    image = np.ascontiguousarray(np.asarray(image, dtype=np.float32))
    if image.ndim == 3:
        image = image[None]
    expect = (1,) + tuple(model.config.input_shape)
    if image.shape != expect:
        raise ShapeError(f"image shape {image.shape} does not match model input {expect}")
    records = run_layers(model, image)
    logits = records[-1].output
    predicted = int(np.argmax(logits.reshape(-1)))  # ties resolve to the lowest grade
    return ForwardTrace(
        image=image,
        records=records,
        logits=logits,
        predicted=predicted,
        model_checksum=model.checksum(),
    )


def predict_grade(model: SequencerModel, image) -> tuple[int, np.ndarray]:
    """Predicted grade index and the softmax probability vector."""
    trace = forward(model, image)
    probs = T.softmax(trace.logits).reshape(-1)
    return trace.predicted, probs


def _descriptor_dict(model: SequencerModel) -> dict:
    data = model.config.to_dict()
    if model.norm is not None:
        data["norm"] = {"mean": list(model.norm.mean), "std": list(model.norm.std)}
    else:
        data["norm"] = None
    return data


def save(model: SequencerModel, path) -> None:
    """Write the checkpoint format: magic, version, config descriptor, banks,
    trailing CRC-32."""
    descriptor = json.dumps(_descriptor_dict(model), sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<H", CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(descriptor))
    blob += descriptor
    for bank in model.banks:
        blob += struct.pack("<4I", *bank.weights.shape)
        blob += bank.weights.astype("<f4").tobytes()
        blob += bank.bias.astype("<f4").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    Path(path).write_bytes(bytes(blob))


def _take(buf: bytes, offset: int, n: int, context: str) -> tuple[bytes, int]:
    if offset + n > len(buf):
        raise CheckpointTruncatedError(f"checkpoint ends inside {context}")
    return buf[offset : offset + n], offset + n


def load(path) -> SequencerModel:
    """Read a checkpoint written by :func:`save`.

    Raises a distinct error for bad magic, unsupported version, truncation,
    shape inconsistency and checksum mismatch.
    """
    buf = Path(path).read_bytes()
    off = 0
    magic, off = _take(buf, off, 4, "magic bytes")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(
            f"bad magic bytes {magic!r}, expected {CHECKPOINT_MAGIC!r}"
        )
    raw, off = _take(buf, off, 2, "format version")
    (version,) = struct.unpack("<H", raw)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    raw, off = _take(buf, off, 4, "descriptor length")
    (desc_len,) = struct.unpack("<I", raw)
    raw, off = _take(buf, off, desc_len, "config descriptor")
    try:
        data = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"config descriptor is not valid JSON: {exc}") from exc
    config = SequencerConfig.from_dict(data)

    shapes = [config.input_shape] + config.layer_shapes()
    banks = []
    conv_i = 0
    for i, spec in enumerate(config.layers):
        if spec.kind != "conv":
            continue
        ctx = f"bank {conv_i} (layer {i})"
        raw, off = _take(buf, off, 16, f"shape of {ctx}")
        shape = struct.unpack("<4I", raw)
        expect = (spec.out_channels, shapes[i][0], spec.kh, spec.kw)
        if shape != expect:
            raise CheckpointFormatError(
                f"{ctx}: stored shape {shape} does not match config {expect}"
            )
        k, c, kh, kw = shape
        raw, off = _take(buf, off, 4 * k * c * kh * kw, f"weights of {ctx}")
        weights = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        raw, off = _take(buf, off, 4 * k, f"bias of {ctx}")
        bias = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        banks.append(T.KernelBank(weights=weights, bias=bias))
        conv_i += 1

    raw, off = _take(buf, off, 4, "trailing checksum")
    (stored,) = struct.unpack("<I", raw)
    if off != len(buf):
        raise CheckpointFormatError(f"{len(buf) - off} trailing bytes after the checksum")
    actual = zlib.crc32(buf[:-4])
    if stored != actual:
        raise CheckpointChecksumError(
            f"checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"
        )

    norm = None
    if data.get("norm") is not None:
        norm = ChannelStats(
            mean=tuple(float(v) for v in data["norm"]["mean"]),
            std=tuple(float(v) for v in data["norm"]["std"]),
        )
    return SequencerModel(config=config, banks=banks, norm=norm)
