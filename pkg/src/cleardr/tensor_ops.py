"""Dense 4-D tensor kernels: convolution, its adjoint, pooling, unpooling,
global average pooling and the classification loss.

Conventions, fixed once for the whole package:

* tensors are ``numpy.float32`` arrays laid out ``(batch, channel, height,
  width)`` row-major;
* ``conv2d`` is cross-correlation (no kernel flip) with zero padding;
* the adjoint is taken of the bias-free linear part only;
* max-pool ties resolve to the lowest flat input index.

Every public operation is a pure function, returns freshly allocated
arrays, and raises :class:`~cleardr.errors.NumericalError` if it would
return a NaN or Inf.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericalError, ShapeError

# Fault-injection knob for selftest verification: when nonzero it is added
# to every kernel weight used by conv2d_adjoint, which breaks the adjoint
# identity on purpose.  Never set outside of tests.
_ADJOINT_FAULT: float = 0.0


def _as_tensor(x, name: str = "input") -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(x, dtype=np.float32))
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (n, c, h, w), got shape {arr.shape}")
    return arr


def _ensure_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericalError(f"{op} produced non-finite values")
    return arr


@dataclass
class KernelBank:
    """Weights of one convolutional layer.

    ``weights`` has shape ``(out_channels, in_channels, kh, kw)``; ``bias``
    has one entry per output channel.
    """

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.ascontiguousarray(np.asarray(self.weights, dtype=np.float32))
        self.bias = np.ascontiguousarray(np.asarray(self.bias, dtype=np.float32))
        if self.weights.ndim != 4:
            raise ShapeError(f"kernel weights must be 4-D, got shape {self.weights.shape}")
        k, _, kh, kw = self.weights.shape
        if k < 1 or kh < 1 or kw < 1:
            raise ShapeError(f"kernel bank needs positive extents, got {self.weights.shape}")
        if self.bias.shape != (k,):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {k} output channels"
            )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_hw(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


@dataclass
class SwitchRecord:
    """Argmax positions recorded by :func:`maxpool`, consumed by :func:`unpool`.

    ``indices[n, c, i, j]`` is the flat index into the ``h * w`` spatial
    plane of the element that won pooling cell ``(i, j)``.
    """

    indices: np.ndarray
    input_hw: tuple[int, int]
    window: int
    stride: int

    @property
    def pooled_shape(self) -> tuple[int, int, int, int]:
        return self.indices.shape


def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    """Spatial extents of a convolution output: floor((x + 2p - k) / s) + 1."""
    return (h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Patch matrix of a padded input: shape (n, ho*wo, c*kh*kw)."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * kh * kw)


def _check_conv_args(x: np.ndarray, kernels: KernelBank, stride: int, padding: int):
    if stride < 1:
        raise DomainError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise DomainError(f"padding must be non-negative, got {padding}")
    n, c, h, w = x.shape
    if c != kernels.in_channels:
        raise ShapeError(
            f"input has {c} channels but kernels expect {kernels.in_channels} "
            f"(input {x.shape}, kernels {kernels.weights.shape})"
        )
    kh, kw = kernels.kernel_hw
    ho, wo = conv_output_hw(h, w, kh, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"kernels {kernels.weights.shape} with stride {stride}, padding {padding} "
            f"produce empty output on input {x.shape}"
        )
    return ho, wo


def conv2d(x, kernels: KernelBank, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlate ``x`` with a kernel bank and add the per-channel bias.

    Output shape is ``(n, out_channels, floor((h+2p-kh)/s)+1,
    floor((w+2p-kw)/s)+1)``.
    """
    x = _as_tensor(x)
    ho, wo = _check_conv_args(x, kernels, stride, padding)
    n = x.shape[0]
    k, _, kh, kw = kernels.weights.shape
    cols = _im2col(_pad(x, padding), kh, kw, stride)
    out = cols @ kernels.weights.reshape(k, -1).T  # (n, ho*wo, k)
    out += kernels.bias
    out = np.ascontiguousarray(out.transpose(0, 2, 1).reshape(n, k, ho, wo))
    return _ensure_finite(out, "conv2d")


def conv2d_adjoint(
    response,
    kernels: KernelBank,
    stride: int = 1,
    padding: int = 0,
    input_shape: tuple[int, int, int, int] = None,
) -> np.ndarray:
    """Exact adjoint of the bias-free convolution.

    Maps a response on the output side back to the input side so that
    ``<conv2d_nobias(a), b> == <a, conv2d_adjoint(b)>`` for all a, b.
    ``input_shape`` disambiguates the input extents (they are not unique
    for stride > 1).
    """
    response = _as_tensor(response, "response")
    if input_shape is None or len(input_shape) != 4:
        raise ShapeError(f"input_shape must be a 4-tuple, got {input_shape!r}")
    n, c, h, w = input_shape
    probe = np.empty((n, c, h, w), dtype=np.float32)
    ho, wo = _check_conv_args(probe, kernels, stride, padding)
    k, _, kh, kw = kernels.weights.shape
    if response.shape != (n, k, ho, wo):
        raise ShapeError(
            f"response shape {response.shape} does not match the conv2d output "
            f"{(n, k, ho, wo)} for input {tuple(input_shape)}"
        )
    weights = kernels.weights
    if _ADJOINT_FAULT:
        weights = weights + np.float32(_ADJOINT_FAULT)

    # Transpose of the im2col factorization: spread each response value
    # over the kernel footprint it was gathered from.
    grad_cols = response.reshape(n, k, ho * wo).transpose(0, 2, 1) @ weights.reshape(k, -1)
    grad_cols = grad_cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    hp, wp = h + 2 * padding, w + 2 * padding
    xp_grad = np.zeros((n, c, hp, wp), dtype=np.float32)
    for u in range(kh):
        for v in range(kw):
            xp_grad[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += grad_cols[
                :, :, u, v
            ]
    if padding:
        xp_grad = np.ascontiguousarray(xp_grad[:, :, padding : padding + h, padding : padding + w])
    return _ensure_finite(xp_grad, "conv2d_adjoint")


def relu(x) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise max(0, x) plus the gate mask of strictly positive inputs."""
    x = _as_tensor(x)
    mask = x > 0
    return _ensure_finite(np.where(mask, x, np.float32(0.0)), "relu"), mask


def maxpool(x, window: int, stride: int) -> tuple[np.ndarray, SwitchRecord]:
    """Per-window spatial maximum with recorded argmax switches.

    Ties go to the lowest flat input index (row-major scan order).
    """
    x = _as_tensor(x)
    if window < 1 or stride < 1:
        raise DomainError(f"window and stride must be positive, got {window}, {stride}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} exceeds spatial extents of input {x.shape}")
    win = np.lib.stride_tricks.sliding_window_view(x, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ph, pw = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ph, pw, window * window)
    arg = flat.argmax(axis=-1)  # first max in scan order = lowest flat index
    out = np.ascontiguousarray(flat.max(axis=-1))
    # window-local (u, v) back to a flat index in the h*w plane
    u, v = arg // window, arg % window
    rows = np.arange(ph, dtype=np.int64)[None, None, :, None] * stride + u
    cols = np.arange(pw, dtype=np.int64)[None, None, None, :] * stride + v
    switches = SwitchRecord(
        indices=rows * w + cols, input_hw=(h, w), window=window, stride=stride
    )
    return _ensure_finite(out, "maxpool"), switches


def unpool(response, switches: SwitchRecord) -> np.ndarray:
    """Scatter pooled responses back to their recorded argmax positions.

    All other positions are zero.  Overlapping windows (stride < window)
    accumulate, which keeps this the exact adjoint of pooling-as-selection.
    """
    response = _as_tensor(response, "response")
    if response.shape != switches.pooled_shape:
        raise ShapeError(
            f"response shape {response.shape} does not match the pooled shape "
            f"{switches.pooled_shape} of the switch record"
        )
    n, c, ph, pw = response.shape
    h, w = switches.input_hw
    out = np.zeros((n * c, h * w), dtype=np.float32)
    idx = switches.indices.reshape(n * c, ph * pw)
    resp = response.reshape(n * c, ph * pw)
    rows = np.arange(n * c)[:, None]
    if switches.stride >= switches.window:
        out[rows, idx] = resp  # non-overlapping windows: indices unique per plane
    else:
        np.add.at(out, (rows, idx), resp)
    return _ensure_finite(out.reshape(n, c, h, w), "unpool")


def global_average_pool(x) -> np.ndarray:
    """Spatial mean per channel, output shape (n, c, 1, 1)."""
    x = _as_tensor(x)
    return _ensure_finite(x.mean(axis=(2, 3), keepdims=True), "global_average_pool")


def global_average_pool_backward(upstream, input_hw: tuple[int, int]) -> np.ndarray:
    """Gradient of GAP: spread each upstream value uniformly over its plane."""
    upstream = _as_tensor(upstream, "upstream")
    h, w = input_hw
    scale = np.float32(1.0 / (h * w))
    return np.ascontiguousarray(np.broadcast_to(upstream * scale, upstream.shape[:2] + (h, w)))


def softmax_cross_entropy(logits, label) -> tuple[float, np.ndarray]:
    """Stabilized softmax cross-entropy.

    ``logits`` has shape ``(n, N, 1, 1)``; ``label`` is a grade index or a
    length-n vector of them.  Returns the mean loss over the batch and its
    gradient ``(softmax - one_hot) / n`` with the logits' shape.
    """
    logits = _as_tensor(logits, "logits")
    n, num_classes = logits.shape[0], logits.shape[1]
    if logits.shape[2:] != (1, 1):
        raise ShapeError(f"logits must have shape (n, N, 1, 1), got {logits.shape}")
    labels = np.asarray(label, dtype=np.int64).reshape(-1)
    if labels.size == 1 and n > 1:
        labels = np.full(n, labels[0], dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DomainError(
            f"label out of range: got {labels.tolist()} for {num_classes} grades"
        )
    z = logits.reshape(n, num_classes)
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    losses = (np.log(s) + m)[:, 0] - z[np.arange(n), labels]
    loss = float(losses.mean())
    if not np.isfinite(loss):
        raise NumericalError("softmax_cross_entropy produced a non-finite loss")
    grad = e / s
    grad[np.arange(n), labels] -= 1.0
    grad /= np.float32(n)
    return loss, _ensure_finite(grad.reshape(logits.shape), "softmax_cross_entropy")


def softmax(logits) -> np.ndarray:
    """Softmax over the channel axis of (n, N, 1, 1) logits."""
    logits = _as_tensor(logits, "logits")
    z = logits.reshape(logits.shape[0], logits.shape[1])
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return _ensure_finite((e / e.sum(axis=1, keepdims=True)).reshape(logits.shape), "softmax")


def conv2d_grads(
    x, kernels: KernelBank, upstream, stride: int = 1, padding: int = 0
) -> tuple[KernelBank, np.ndarray]:
    """Gradients of conv2d wrt its weights, bias and input.

    Returns a :class:`KernelBank` whose ``weights``/``bias`` hold the weight
    and bias gradients, plus the input gradient (which equals
    ``conv2d_adjoint(upstream)``).
    """
    x = _as_tensor(x)
    upstream = _as_tensor(upstream, "upstream")
    ho, wo = _check_conv_args(x, kernels, stride, padding)
    n = x.shape[0]
    k, c, kh, kw = kernels.weights.shape
    if upstream.shape != (n, k, ho, wo):
        raise ShapeError(
            f"upstream shape {upstream.shape} does not match conv2d output {(n, k, ho, wo)}"
        )
    cols = _im2col(_pad(x, padding), kh, kw, stride)  # (n, ho*wo, c*kh*kw)
    up = upstream.reshape(n, k, ho * wo)
    grad_w = np.tensordot(up, cols, axes=([0, 2], [0, 1])).reshape(k, c, kh, kw)
    grad_b = upstream.sum(axis=(0, 2, 3))
    grad_x = conv2d_adjoint(upstream, kernels, stride, padding, x.shape)
    _ensure_finite(grad_w, "conv2d_grads")
    return KernelBank(weights=grad_w, bias=grad_b), grad_x
