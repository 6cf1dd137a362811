"""Independent correctness oracles for the tensor core and the
back-projection chain.

Every oracle here is built by a different route than the code it checks:
dense layer matrices are assembled entry by entry from index arithmetic
(no im2col, no stride tricks), and gradients are compared against central
finite differences.  The ``run_selftest`` suite drives all of them and is
what the ``selftest`` CLI subcommand reports.
"""

from __future__ import annotations

from collections import namedtuple

import numpy as np

from . import clear as C
from . import sequencer as S
from . import tensor_ops as T

CheckResult = namedtuple("CheckResult", ["name", "ok", "detail"])


def conv_matrix(bank: T.KernelBank, input_shape, stride: int, padding: int) -> np.ndarray:
    """Dense matrix G with conv(x) (bias-free) = G @ x.flat for one image.

    Built by looping over every output and kernel coordinate, independent of
    the strided implementation under test.
    """
    c, h, w = input_shape
    k, ci, kh, kw = bank.weights.shape
    assert ci == c, "bank does not match the input channel count"
    ho, wo = T.conv_output_hw(h, w, kh, kw, stride, padding)
    weights = bank.weights.astype(np.float64)
    mat = np.zeros((k * ho * wo, c * h * w), dtype=np.float64)
    for ko in range(k):
        for oy in range(ho):
            for ox in range(wo):
                row = (ko * ho + oy) * wo + ox
                for cc in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            iy = oy * stride + u - padding
                            ix = ox * stride + v - padding
                            if 0 <= iy < h and 0 <= ix < w:
                                col = (cc * h + iy) * w + ix
                                mat[row, col] += weights[ko, cc, u, v]
    return mat


def pool_matrix(switches: T.SwitchRecord) -> np.ndarray:
    """Dense selection matrix of a recorded max-pool, single image.

    pooled.flat = P @ x.flat, one 1 per row at the winning input position.
    """
    n, c, ph, pw = switches.pooled_shape
    assert n == 1, "selection matrix is defined per image"
    h, w = switches.input_hw
    mat = np.zeros((c * ph * pw, c * h * w), dtype=np.float64)
    for cc in range(c):
        for oy in range(ph):
            for ox in range(pw):
                row = (cc * ph + oy) * pw + ox
                col = cc * h * w + int(switches.indices[0, cc, oy, ox])
                mat[row, col] = 1.0
    return mat


def backprojection_matrix(model: S.SequencerModel, trace: S.ForwardTrace) -> np.ndarray:
    """Dense matrix of the whole linear backward walk (gating "none").

    Maps the flattened final-stage response to the flattened input plane:
    the product of conv-matrix transposes and pool-selection transposes in
    backward order.  ReLU layers above the final conv stage are skipped, the
    interior ones are identities under gating "none".
    """
    banks = list(model.banks)
    mat = None
    seen_conv = False
    for i in reversed(range(model.config.gap_index())):
        spec = model.config.layers[i]
        if spec.kind == "conv":
            g = conv_matrix(
                banks.pop(), trace.layer_input(i).shape[1:], spec.stride, spec.padding
            )
            step = g.T
            seen_conv = True
        elif spec.kind == "maxpool":
            step = pool_matrix(trace.records[i].switches).T
        else:
            if not seen_conv:
                continue
            step = None  # identity
        if step is None:
            continue
        mat = step if mat is None else step @ mat
    return mat


def collapse_channels(flat: np.ndarray, shape) -> np.ndarray:
    """Sum a flattened (c, h, w) signal over channels, giving (h, w)."""
    c, h, w = shape
    return flat.reshape(c, h, w).sum(axis=0)


def fd_gradient(fn, x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar function, entry by entry."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = grad.reshape(-1)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + eps
        hi = fn()
        x.flat[i] = orig - eps
        lo = fn()
        x.flat[i] = orig
        flat[i] = (hi - lo) / (2.0 * eps)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Sup-norm difference over the sum of sup norms (0 when both vanish)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = float(np.abs(a).max(initial=0.0) + np.abs(b).max(initial=0.0))
    if denom == 0.0:
        return 0.0
    return float(np.abs(a - b).max()) / denom


def _check_adjoint_identity(rng: np.random.Generator, trials: int = 60) -> CheckResult:
    worst = 0.0
    grid = [
        (stride, padding, ksize)
        for stride in (1, 2)
        for padding in (0, 1)
        for ksize in (1, 2, 3)
    ]
    for t in range(trials):
        stride, padding, ksize = grid[t % len(grid)]
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        h = int(rng.integers(ksize, ksize + 6))
        w = int(rng.integers(ksize, ksize + 6))
        x = rng.standard_normal((n, c, h, w), dtype=np.float32)
        bank = T.KernelBank(
            weights=rng.standard_normal((k, c, ksize, ksize), dtype=np.float32),
            bias=np.zeros(k, dtype=np.float32),
        )
        y = T.conv2d(x, bank, stride, padding)  # zero bias, so purely linear
        r = rng.standard_normal(y.shape, dtype=np.float32)
        back = T.conv2d_adjoint(r, bank, stride, padding, input_shape=x.shape)
        lhs = float(np.vdot(y.astype(np.float64), r.astype(np.float64)))
        rhs = float(np.vdot(x.astype(np.float64), back.astype(np.float64)))
        scale = max(abs(lhs), abs(rhs), 1e-12)
        worst = max(worst, abs(lhs - rhs) / scale)
    ok = worst <= 1e-4
    return CheckResult("adjoint_identity", ok, f"worst relative mismatch {worst:.3e}")


def _check_unpool_adjoint(rng: np.random.Generator, trials: int = 20) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, 4))
        window = int(rng.integers(2, 4))
        stride = int(rng.integers(1, window + 1))
        h = int(rng.integers(window, window + 6))
        w = int(rng.integers(window, window + 6))
        x = rng.standard_normal((n, c, h, w), dtype=np.float32)
        pooled, switches = T.maxpool(x, window, stride)
        r = rng.standard_normal(pooled.shape, dtype=np.float32)
        lhs = float(np.vdot(pooled.astype(np.float64), r.astype(np.float64)))
        back = T.unpool(r, switches)
        rhs = float(np.vdot(x.astype(np.float64), back.astype(np.float64)))
        # lhs uses the pooled values; the selection identity needs the values
        # gathered at the switch positions, which equal the pooled maxima.
        scale = max(abs(lhs), abs(rhs), 1e-12)
        worst = max(worst, abs(lhs - rhs) / scale)
    ok = worst <= 1e-4
    return CheckResult("unpool_adjoint", ok, f"worst relative mismatch {worst:.3e}")


def _selftest_model(rng: np.random.Generator) -> tuple[S.SequencerModel, np.ndarray]:
    grades = S.GradeSet.generic(3)
    config = S.SequencerConfig(
        layers=(
            S.ConvSpec(4, 3, 3, stride=1, padding=1),
            S.ReluSpec(),
            S.PoolSpec(window=2, stride=2),
            S.ConvSpec(3, 3, 3, stride=1, padding=1),
            S.ReluSpec(),
            S.GapSpec(),
        ),
        input_shape=(2, 8, 8),
        grades=grades,
    )
    model = initialize_random(config, rng)
    image = rng.standard_normal((1, 2, 8, 8), dtype=np.float32)
    return model, image


def initialize_random(config: S.SequencerConfig, rng: np.random.Generator) -> S.SequencerModel:
    """A model with fan-in-scaled random weights and small random biases.

    The fan-in scaling keeps composed activations near unit magnitude, so
    absolute comparisons against float64 oracles stay meaningful.
    """
    shapes = [config.input_shape] + config.layer_shapes()
    banks = []
    for i, spec in enumerate(config.layers):
        if spec.kind != "conv":
            continue
        fan_in = shapes[i][0] * spec.kh * spec.kw
        scale = np.float32(np.sqrt(2.0 / fan_in))
        banks.append(
            T.KernelBank(
                weights=scale * rng.standard_normal(
                    (spec.out_channels, shapes[i][0], spec.kh, spec.kw), dtype=np.float32
                ),
                bias=(0.1 * rng.standard_normal(spec.out_channels)).astype(np.float32),
            )
        )
    return S.SequencerModel(config=config, banks=banks)


def _check_dense_backprojection(rng: np.random.Generator) -> CheckResult:
    model, image = _selftest_model(rng)
    trace = S.forward(model, image)
    mat = backprojection_matrix(model, trace)
    z = trace.records[model.config.gap_index() - 1].output
    worst = 0.0
    for grade in range(model.config.grades.count):
        fast = C.attentive_response(trace, model, grade, gating="none")
        masked = np.zeros_like(z)
        masked[:, grade] = z[:, grade]
        dense = collapse_channels(
            mat @ masked.reshape(-1).astype(np.float64), trace.image.shape[1:]
        )
        worst = max(worst, float(np.abs(fast.astype(np.float64) - dense).max()))
    ok = worst <= 1e-5
    return CheckResult("dense_backprojection", ok, f"worst absolute mismatch {worst:.3e}")


def _check_conv_gradients(rng: np.random.Generator) -> CheckResult:
    worst = 0.0
    for _ in range(4):
        n, c, k = 2, 2, 3
        h = w = 5
        stride, padding = 1, 1
        x = (rng.standard_normal((n, c, h, w)) / 2).astype(np.float32)
        bank = T.KernelBank(
            weights=(rng.standard_normal((k, c, 3, 3)) / 2).astype(np.float32),
            bias=(0.1 * rng.standard_normal(k)).astype(np.float32),
        )
        probe = (rng.standard_normal(T.conv2d(x, bank, stride, padding).shape) / 8).astype(
            np.float32
        )

        def scalar():
            out = T.conv2d(x, bank, stride, padding)
            return float(np.vdot(out.astype(np.float64), probe.astype(np.float64)))

        grads, grad_x = T.conv2d_grads(x, bank, probe, stride, padding)
        worst = max(worst, rel_err(fd_gradient(scalar, bank.weights), grads.weights))
        worst = max(worst, rel_err(fd_gradient(scalar, bank.bias), grads.bias))
        worst = max(worst, rel_err(fd_gradient(scalar, x), grad_x))
    ok = worst <= 1e-3
    return CheckResult("conv_gradients", ok, f"worst relative error {worst:.3e}")


def _check_loss_gradients(rng: np.random.Generator) -> CheckResult:
    worst = 0.0
    for _ in range(4):
        n, classes = 3, 5
        logits = rng.standard_normal((n, classes, 1, 1)).astype(np.float32)
        labels = rng.integers(0, classes, size=n)

        def scalar():
            loss, _ = T.softmax_cross_entropy(logits, labels)
            return loss

        _, grad = T.softmax_cross_entropy(logits, labels)
        worst = max(worst, rel_err(fd_gradient(scalar, logits), grad))
    ok = worst <= 1e-3
    return CheckResult("loss_gradients", ok, f"worst relative error {worst:.3e}")


def run_selftest(seed: int = 0) -> list[CheckResult]:
    """Run every embedded oracle; one result per check."""
    checks = [
        ("adjoint_identity", _check_adjoint_identity),
        ("unpool_adjoint", _check_unpool_adjoint),
        ("dense_backprojection", _check_dense_backprojection),
        ("conv_gradients", _check_conv_gradients),
        ("loss_gradients", _check_loss_gradients),
    ]
    results = []
    for name, fn in checks:
        rng = np.random.default_rng(np.random.SeedSequence([seed, len(results)]))
        try:
            results.append(fn(rng))
        except Exception as exc:  # a crashed check is a failed check
            results.append(CheckResult(name, False, f"raised {type(exc).__name__}: {exc}"))
    return results
