"""Supervised kernel discovery: minibatch SGD with momentum over the
sequencer stack, plus dataset splitting, channel normalization and flip
augmentation.

Everything is seed-deterministic: the shuffle order, the augmentation coin
flips and the initial weights are all functions of explicit seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor_ops as T
from . import sequencer as S
from .errors import ConfigError, DomainError, NumericalError, ShapeError, TrainingDivergenceError


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    hflip: bool = True
    vflip: bool = True

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 0:
            raise ConfigError(f"epoch count must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be positive, got {self.batch_size}")


@dataclass
class LabeledDataset:
    """Images (m, c, h, w) float32 with integer grade labels (m,)."""

    images: np.ndarray
    labels: np.ndarray
    grades: S.GradeSet
    refs: tuple[str, ...] | None = None  # source identifiers, e.g. file stems

    def __post_init__(self):
        self.images = np.ascontiguousarray(np.asarray(self.images, dtype=np.float32))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ShapeError(f"images must be (m, c, h, w), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ShapeError(
                f"labels shape {self.labels.shape} does not match {self.images.shape[0]} images"
            )
        if len(self) and (self.labels.min() < 0 or self.labels.max() >= self.grades.count):
            raise DomainError(
                f"labels must lie in [0, {self.grades.count}), "
                f"got range [{self.labels.min()}, {self.labels.max()}]"
            )
        if self.refs is not None and len(self.refs) != len(self):
            raise ShapeError("refs length does not match image count")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        refs = tuple(self.refs[i] for i in indices) if self.refs is not None else None
        return LabeledDataset(self.images[indices], self.labels[indices], self.grades, refs)


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    train_accuracy: float
    test_accuracy: float  # nan when no test split was supplied


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # (N, N) int64, rows = true grade, cols = predicted


def split(dataset: LabeledDataset, fraction: float = 0.9, seed: int = 0):
    """Seeded shuffle, then the first ceil(fraction * m) samples train and the
    rest test."""
    m = len(dataset)
    if m == 0:
        raise DomainError("cannot split an empty dataset")
    if not 0 < fraction < 1:
        raise DomainError(f"split fraction must lie in (0, 1), got {fraction}")
    perm = np.random.default_rng(seed).permutation(m)
    n_train = math.ceil(fraction * m)
    return dataset.subset(perm[:n_train]), dataset.subset(perm[n_train:])


def channel_stats(dataset: LabeledDataset) -> S.ChannelStats:
    """Per-channel mean and std over every pixel of the dataset."""
    if len(dataset) == 0:
        raise DomainError("cannot compute channel statistics of an empty dataset")
    flat = dataset.images.transpose(1, 0, 2, 3).reshape(dataset.images.shape[1], -1)
    mean = flat.mean(axis=1, dtype=np.float64)
    std = flat.std(axis=1, dtype=np.float64)
    for c, s in enumerate(std):
        if s <= 0:
            raise DomainError(f"channel {c} has zero standard deviation")
    return S.ChannelStats(mean=tuple(float(v) for v in mean), std=tuple(float(v) for v in std))


def normalize_channels(images: np.ndarray, stats: S.ChannelStats) -> np.ndarray:
    """(x - mean) / std per channel. Accepts (c, h, w) or (n, c, h, w)."""
    images = np.asarray(images, dtype=np.float32)
    c_axis = 0 if images.ndim == 3 else 1
    if images.ndim not in (3, 4):
        raise ShapeError(f"expected 3-D or 4-D images, got shape {images.shape}")
    if images.shape[c_axis] != len(stats.mean):
        raise ShapeError(
            f"images have {images.shape[c_axis]} channels, stats cover {len(stats.mean)}"
        )
    for c, s in enumerate(stats.std):
        if s <= 0:
            raise DomainError(f"channel {c} has non-positive standard deviation {s}")
    mean = np.asarray(stats.mean, dtype=np.float32).reshape(-1, 1, 1)
    std = np.asarray(stats.std, dtype=np.float32).reshape(-1, 1, 1)
    return ((images - mean) / std).astype(np.float32)


def augment(image: np.ndarray, rng: np.random.Generator, hflip: bool = True,
            vflip: bool = True) -> np.ndarray:
    """Independent 50/50 horizontal and vertical flips on the last two axes."""
    out = image
    if hflip and rng.random() < 0.5:
        out = out[..., :, ::-1]
    if vflip and rng.random() < 0.5:
        out = out[..., ::-1, :]
    return np.ascontiguousarray(out)


def _zero_velocity(banks):
    return [
        (np.zeros_like(b.weights), np.zeros_like(b.bias))
        for b in banks
    ]


def backward(model: S.SequencerModel, x: np.ndarray, records, grad_logits: np.ndarray):
    """Gradients of the loss w.r.t. every kernel bank, via the layer adjoints."""
    grad = grad_logits
    bank_grads: list[T.KernelBank | None] = [None] * len(model.banks)
    bank_idx = len(model.banks)
    for i in reversed(range(len(model.config.layers))):
        spec = model.config.layers[i]
        inp = x if i == 0 else records[i - 1].output
        if spec.kind == "gap":
            grad = T.global_average_pool_backward(grad, inp.shape[2:])
        elif spec.kind == "relu":
            grad = grad * records[i].gate
        elif spec.kind == "maxpool":
            grad = T.unpool(grad, records[i].switches)
        else:
            bank_idx -= 1
            gk, grad = T.conv2d_grads(inp, model.banks[bank_idx], grad, spec.stride, spec.padding)
            bank_grads[bank_idx] = gk
    return bank_grads


def train(
    model: S.SequencerModel,
    dataset: LabeledDataset,
    config: TrainConfig,
    test_set: LabeledDataset | None = None,
    progress=None,
) -> tuple[S.SequencerModel, list[EpochMetrics]]:
    """SGD with momentum. Returns a new model (with the dataset's channel
    statistics attached) and one metrics row per epoch.

    Any non-finite activation or gradient aborts the run with a
    TrainingDivergenceError naming the epoch.
    """
    if len(dataset) == 0:
        raise DomainError("cannot train on an empty dataset")
    if dataset.grades.count != model.config.grades.count:
        raise ConfigError(
            f"dataset has {dataset.grades.count} grades, model expects "
            f"{model.config.grades.count}"
        )
    if tuple(dataset.images.shape[1:]) != tuple(model.config.input_shape):
        raise ShapeError(
            f"dataset images {dataset.images.shape[1:]} do not match model input "
            f"{tuple(model.config.input_shape)}"
        )

    stats = channel_stats(dataset)
    images = normalize_channels(dataset.images, stats)
    labels = dataset.labels
    m = len(dataset)

    banks = [
        T.KernelBank(weights=b.weights.copy(), bias=b.bias.copy()) for b in model.banks
    ]
    work = S.SequencerModel(config=model.config, banks=banks, norm=stats)
    velocity = _zero_velocity(banks)
    mu = np.float32(config.momentum)
    lr = np.float32(config.learning_rate)

    metrics: list[EpochMetrics] = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch]))
        order = rng.permutation(m)
        loss_sum = 0.0
        correct = 0
        try:
            for start in range(0, m, config.batch_size):
                idx = order[start : start + config.batch_size]
                batch = np.stack(
                    [augment(images[i], rng, config.hflip, config.vflip) for i in idx]
                )
                records = S.run_layers(work, batch)
                logits = records[-1].output
                preds = logits.reshape(len(idx), -1).argmax(axis=1)
                correct += int((preds == labels[idx]).sum())
                loss, grad_logits = T.softmax_cross_entropy(logits, labels[idx])
                loss_sum += loss * len(idx)
                bank_grads = backward(work, batch, records, grad_logits)
                for b, (vel_w, vel_b), g in zip(banks, velocity, bank_grads):
                    np.multiply(vel_w, mu, out=vel_w)
                    vel_w -= lr * g.weights
                    np.multiply(vel_b, mu, out=vel_b)
                    vel_b -= lr * g.bias
                    b.weights += vel_w
                    b.bias += vel_b
        except NumericalError as exc:
            raise TrainingDivergenceError(
                epoch, f"training diverged at epoch {epoch}: {exc}"
            ) from exc

        test_acc = float("nan")
        if test_set is not None and len(test_set):
            test_acc = evaluate(work, test_set).accuracy
        row = EpochMetrics(
            epoch=epoch,
            mean_loss=loss_sum / m,
            train_accuracy=correct / m,
            test_accuracy=test_acc,
        )
        metrics.append(row)
        if progress is not None:
            progress(row)
    return work, metrics


def evaluate(model: S.SequencerModel, dataset: LabeledDataset,
             batch_size: int = 64) -> EvalResult:
    """Accuracy and confusion matrix on raw images.

    Applies the model's stored channel statistics when present, so the same
    dataset object can be fed to train and evaluate.
    """
    if len(dataset) == 0:
        raise DomainError("cannot evaluate on an empty dataset")
    n = model.config.grades.count
    if dataset.grades.count != n:
        raise ConfigError(
            f"dataset has {dataset.grades.count} grades, model expects {n}"
        )
    images = dataset.images
    if model.norm is not None:
        images = normalize_channels(images, model.norm)
    confusion = np.zeros((n, n), dtype=np.int64)
    for start in range(0, len(dataset), batch_size):
        batch = images[start : start + batch_size]
        records = S.run_layers(model, batch)
        preds = records[-1].output.reshape(len(batch), -1).argmax(axis=1)
        for truth, pred in zip(dataset.labels[start : start + batch_size], preds):
            confusion[truth, pred] += 1
    accuracy = float(np.trace(confusion)) / len(dataset)
    return EvalResult(accuracy=accuracy, confusion=confusion)


def write_metrics(path, metrics: list[EpochMetrics]) -> None:
    """CSV with one row per epoch: epoch, mean_loss, train_accuracy, test_accuracy."""
    lines = ["epoch,mean_loss,train_accuracy,test_accuracy"]
    for row in metrics:
        lines.append(
            f"{row.epoch},{row.mean_loss:.6f},{row.train_accuracy:.6f},{row.test_accuracy:.6f}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
