"""Acceptance gate: nine property and end-to-end criteria, each reported as
one pass/fail line.

The long-running pieces (the 30-epoch synthetic run) execute once in a
module fixture and are shared by the criteria that inspect them.
"""

import colorsys
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import numpy.testing as npt
import pytest

from cleardr import clear as C, discovery as D, ingest as I, oracles
from cleardr import sequencer as S, synthetic, tensor_ops as T


def _report(name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"{name}: {status}" + (f" ({detail})" if detail else ""))
    assert ok, f"{name}: {status} {detail}"


def _hue_distance(a, b):
    d = abs(a - b) % 1.0
    return min(d, 1.0 - d)


@pytest.fixture(scope="module")
def synthetic_run():
    """Seed-7 planted-lesion experiment: 600 images, 30 epochs."""
    dataset, boxes = synthetic.make_blob_dataset(count=600, size=64, classes=3, seed=7)
    train_ds, test_ds = D.split(dataset, 0.9, seed=7)
    perm = np.random.default_rng(7).permutation(len(dataset))
    test_idx = perm[math.ceil(0.9 * len(dataset)):]
    model0 = S.initialize(S.SequencerConfig.default(S.GradeSet.generic(3), 64), seed=7)
    start = time.monotonic()
    model, metrics = D.train(model0, train_ds, D.TrainConfig(epochs=30, seed=7),
                             test_set=test_ds)
    elapsed = time.monotonic() - start
    return {
        "dataset": dataset,
        "boxes": boxes,
        "test_idx": test_idx,
        "model": model,
        "metrics": metrics,
        "train_seconds": elapsed,
    }


def test_criterion_1_adjoint_identity():
    rng = np.random.default_rng(100)
    grid = [
        (stride, padding, ksize)
        for stride in (1, 2)
        for padding in (0, 1)
        for ksize in (1, 2, 3)
    ]
    start = time.monotonic()
    worst = 0.0
    for trial in range(100):
        stride, padding, ksize = grid[trial % len(grid)]
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        h = int(rng.integers(ksize, ksize + 7))
        w = int(rng.integers(ksize, ksize + 7))
        x = rng.standard_normal((n, c, h, w), dtype=np.float32)
        bank = T.KernelBank(
            weights=rng.standard_normal((k, c, ksize, ksize), dtype=np.float32),
            bias=np.zeros(k, dtype=np.float32),
        )
        y = T.conv2d(x, bank, stride, padding)
        r = rng.standard_normal(y.shape, dtype=np.float32)
        back = T.conv2d_adjoint(r, bank, stride, padding, input_shape=x.shape)
        lhs = np.vdot(y.astype(np.float64), r.astype(np.float64))
        rhs = np.vdot(x.astype(np.float64), back.astype(np.float64))
        denom = max(abs(lhs), abs(rhs), 1e-12)
        worst = max(worst, abs(lhs - rhs) / denom)
    elapsed = time.monotonic() - start
    _report(
        "criterion 1 adjoint identity",
        worst <= 1e-4 and elapsed < 10.0,
        f"worst {worst:.2e}, {elapsed:.1f}s over 100 triples",
    )


def _dense_family():
    conv = S.ConvSpec
    # every stack shape up to 2 conv and 1 pool, with and without relu sites
    yield (conv(2, 3, 3, 1, 1),), (1, 1, 6, 6)
    yield (conv(2, 2, 2, 2, 0),), (1, 2, 8, 8)
    yield (conv(2, 3, 3, 1, 0), S.ReluSpec()), (1, 2, 7, 7)
    yield (conv(2, 3, 3, 1, 1), S.PoolSpec(2, 2)), (1, 2, 8, 8)
    yield (conv(3, 3, 3, 1, 1), S.ReluSpec(), S.PoolSpec(2, 2), conv(2, 3, 3, 1, 1)), (1, 2, 8, 8)
    yield (conv(3, 2, 2, 1, 0), S.PoolSpec(2, 1), conv(2, 2, 2, 1, 0)), (1, 2, 8, 8)
    yield (conv(3, 3, 3, 1, 1), S.ReluSpec(), conv(2, 3, 3, 1, 1), S.ReluSpec()), (1, 2, 8, 8)
    yield (conv(4, 3, 3, 2, 1), S.ReluSpec(), S.PoolSpec(2, 2), conv(2, 1, 1, 1, 0)), (1, 2, 8, 8)


def test_criterion_2_dense_backprojection_oracle():
    start = time.monotonic()
    worst = 0.0
    nets = 0
    for idx, (layers, shape) in enumerate(_dense_family()):
        rng = np.random.default_rng(200 + idx)
        grades = layers[-1].out_channels if layers[-1].kind == "conv" else 2
        config = S.SequencerConfig(
            layers=tuple(layers) + (S.GapSpec(),),
            input_shape=shape[1:],
            grades=S.GradeSet.generic(grades),
        )
        model = oracles.initialize_random(config, rng)
        image = rng.standard_normal(shape, dtype=np.float32)
        trace = S.forward(model, image)
        mat = oracles.backprojection_matrix(model, trace)
        z = trace.records[config.gap_index() - 1].output
        for grade in range(grades):
            fast = C.attentive_response(trace, model, grade, gating="none")
            masked = np.zeros_like(z)
            masked[:, grade] = z[:, grade]
            dense = oracles.collapse_channels(
                mat @ masked.reshape(-1).astype(np.float64), shape[1:]
            )
            worst = max(worst, float(np.abs(fast.astype(np.float64) - dense).max()))
        full = C.back_project(trace, model, None, gating="none")
        dense_full = oracles.collapse_channels(
            mat @ z.reshape(-1).astype(np.float64), shape[1:]
        )
        worst = max(worst, float(np.abs(full.astype(np.float64) - dense_full).max()))
        nets += 1
    elapsed = time.monotonic() - start
    _report(
        "criterion 2 dense back-projection oracle",
        worst <= 1e-5 and elapsed < 30.0,
        f"worst {worst:.2e} over {nets} nets, {elapsed:.1f}s",
    )


def test_criterion_3_gradient_checks():
    start = time.monotonic()
    worst = 0.0
    rng = np.random.default_rng(300)
    for _ in range(12):  # conv instances
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, 3))
        k = int(rng.integers(1, 4))
        ksize = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 2))
        h = int(rng.integers(ksize, ksize + 4))
        w = int(rng.integers(ksize, ksize + 4))
        x = (rng.standard_normal((n, c, h, w)) / 2).astype(np.float32)
        bank = T.KernelBank(
            weights=(rng.standard_normal((k, c, ksize, ksize)) / 2).astype(np.float32),
            bias=(0.1 * rng.standard_normal(k)).astype(np.float32),
        )
        probe = (rng.standard_normal(T.conv2d(x, bank, stride, padding).shape) / 4
                 ).astype(np.float32)

        def scalar():
            out = T.conv2d(x, bank, stride, padding)
            return float(np.vdot(out.astype(np.float64), probe.astype(np.float64)))

        grads, grad_x = T.conv2d_grads(x, bank, probe, stride, padding)
        worst = max(worst, oracles.rel_err(oracles.fd_gradient(scalar, bank.weights),
                                           grads.weights))
        worst = max(worst, oracles.rel_err(oracles.fd_gradient(scalar, bank.bias),
                                           grads.bias))
        worst = max(worst, oracles.rel_err(oracles.fd_gradient(scalar, x), grad_x))
    for _ in range(8):  # loss instances
        n = int(rng.integers(1, 5))
        classes = int(rng.integers(2, 7))
        logits = rng.standard_normal((n, classes, 1, 1)).astype(np.float32)
        labels = rng.integers(0, classes, size=n)

        def loss_only():
            value, _ = T.softmax_cross_entropy(logits, labels)
            return value

        _, grad = T.softmax_cross_entropy(logits, labels)
        worst = max(worst, oracles.rel_err(oracles.fd_gradient(loss_only, logits), grad))
    elapsed = time.monotonic() - start
    _report(
        "criterion 3 gradient checks",
        worst <= 1e-3 and elapsed < 30.0,
        f"worst {worst:.2e} over 20 instances, {elapsed:.1f}s",
    )


def test_criterion_4_isolation_and_selection():
    rng = np.random.default_rng(400)
    config = S.SequencerConfig(
        layers=(
            S.ConvSpec(4, 3, 3, 1, 1), S.ReluSpec(), S.PoolSpec(2, 2),
            S.ConvSpec(5, 3, 3, 1, 1), S.ReluSpec(), S.GapSpec(),
        ),
        input_shape=(2, 8, 8),
        grades=S.GradeSet.generic(5),
    )
    model = oracles.initialize_random(config, rng)
    trace = S.forward(model, rng.standard_normal((1, 2, 8, 8), dtype=np.float32))
    isolated = True
    for gating in C.GATING_POLICIES:
        for grade in range(5):
            base = C.attentive_response(trace, model, grade, gating)
            import copy as _copy
            noisy = _copy.deepcopy(trace)
            z = noisy.records[-2].output
            for other in range(5):
                if other != grade:
                    z[:, other] = rng.standard_normal(z[:, other].shape).astype(np.float32)
            again = C.attentive_response(noisy, model, grade, gating)
            isolated = isolated and np.array_equal(base, again)

    selection_exact = True
    for trial in range(10):
        maps = rng.standard_normal((5, 9, 11)).astype(np.float32)
        stack = C.AttentiveResponseStack(maps=maps, grades=S.GradeSet.generic(5),
                                         gating="none")
        cmap = C.dominant_class_map(stack)
        resp = C.dominant_response_map(stack, cmap)
        for i in range(9):
            for j in range(11):
                best = 0
                for d in range(5):
                    if maps[d, i, j] > maps[best, i, j]:
                        best = d
                selection_exact = selection_exact and cmap[i, j] == best
                selection_exact = selection_exact and resp.raw[i, j] == maps[best, i, j]
    _report(
        "criterion 4 kernel isolation and argmax/selection scans",
        isolated and selection_exact,
        "exact equality over 3 policies x 5 grades, 10 random stacks",
    )


def test_criterion_5_superposition_default_architecture():
    worst = 0.0
    for seed in (500, 501, 502):
        rng = np.random.default_rng(seed)
        config = S.SequencerConfig.default(S.GradeSet.default(), 64)
        model = oracles.initialize_random(config, rng)
        trace = S.forward(model, rng.standard_normal((1, 3, 64, 64), dtype=np.float32))
        stack = C.attentive_stack(trace, model, "none")
        total = stack.maps.sum(axis=0)
        full = C.back_project(trace, model, None, gating="none")
        denom = float(np.abs(total).max() + np.abs(full).max()) or 1.0
        worst = max(worst, float(np.abs(total - full).max()) / denom)
    _report(
        "criterion 5 superposition under linear gating",
        worst <= 1e-4,
        f"worst relative deviation {worst:.2e} on the default 3-conv stack",
    )


def test_criterion_6_positive_scale_argmax_invariance():
    import copy as _copy

    rng = np.random.default_rng(600)
    config = S.SequencerConfig.default(S.GradeSet.default(), 64)
    model = oracles.initialize_random(config, rng)
    trace = S.forward(model, rng.standard_normal((1, 3, 64, 64), dtype=np.float32))
    stable = True
    for gating in C.GATING_POLICIES:
        base = C.dominant_class_map(C.attentive_stack(trace, model, gating))
        for alpha in (0.1, 1.0, 10.0):
            scaled = _copy.deepcopy(trace)
            scaled.records[-2].output *= np.float32(alpha)
            got = C.dominant_class_map(C.attentive_stack(scaled, model, gating))
            stable = stable and np.array_equal(base, got)
    _report(
        "criterion 6 positive-scale argmax invariance",
        stable,
        "alpha in {0.1, 1, 10} x 3 gating policies, pixelwise identical",
    )


def test_criterion_7_synthetic_end_to_end(synthetic_run):
    model = synthetic_run["model"]
    dataset = synthetic_run["dataset"]
    boxes = synthetic_run["boxes"]
    metrics = synthetic_run["metrics"]

    start = time.monotonic()
    correct = 0
    hits = 0
    for gi in synthetic_run["test_idx"]:
        image = D.normalize_channels(dataset.images[gi], model.norm)
        trace = S.forward(model, image)
        if trace.predicted != dataset.labels[gi]:
            continue
        correct += 1
        stack = C.attentive_stack(trace, model, "deconvnet")
        resp = C.dominant_response_map(stack)
        rect = C.most_attentive_region(resp, 16)
        if synthetic.box_iou(rect, boxes[gi]) >= 0.25:
            hits += 1
    map_seconds = time.monotonic() - start

    total = len(synthetic_run["test_idx"])
    accuracy = metrics[-1].test_accuracy
    hit_rate = hits / max(correct, 1)
    runtime = synthetic_run["train_seconds"] + map_seconds
    monotone = metrics[4].mean_loss < metrics[0].mean_loss
    _report(
        "criterion 7 synthetic end-to-end",
        accuracy >= 0.90 and hit_rate >= 0.70 and runtime <= 300.0 and monotone,
        f"test acc {accuracy:.3f}, IoU hit rate {hit_rate:.2%} "
        f"({hits}/{correct} correct of {total}), {runtime:.0f}s total",
    )


def test_criterion_8_png_hue_fidelity(synthetic_run, tmp_path):
    model = synthetic_run["model"]
    dataset = synthetic_run["dataset"]
    palette = C.GradeColorMap.evenly_spaced(model.config.grades.count)
    worst_hue = 0.0
    worst_sat = 0.0
    checked = 0
    for gi in synthetic_run["test_idx"][:6]:
        image = D.normalize_channels(dataset.images[gi], model.norm)
        trace = S.forward(model, image)
        stack = C.attentive_stack(trace, model, "deconvnet")
        cmap = C.dominant_class_map(stack)
        resp = C.dominant_response_map(stack, cmap)
        cm = C.compose_clear_map(cmap, resp, palette, model.checksum(), "deconvnet")
        path = tmp_path / f"map_{gi}.png"
        I.write_png(path, C.clear_map_to_u8(cm))
        png = I.read_image(path).astype(np.float64) / 255.0
        for i in range(png.shape[0]):
            for j in range(png.shape[1]):
                h, s, v = colorsys.rgb_to_hsv(*png[i, j].tolist())
                if v <= 0.05:
                    continue
                checked += 1
                worst_hue = max(worst_hue, _hue_distance(h, palette.hue(int(cmap[i, j]))))
                worst_sat = max(worst_sat, abs(s - 1.0))
    _report(
        "criterion 8 emitted PNG hue fidelity",
        worst_hue <= 1 / 512 and worst_sat <= 1 / 255 and checked > 1000,
        f"worst hue error {worst_hue:.2e}, worst saturation error {worst_sat:.2e}, "
        f"{checked} pixels above the value floor",
    )


def _run_cli(args, cwd):
    env = dict(os.environ)
    env["CLEARDR_THREADS"] = "1"
    return subprocess.run(
        [sys.executable, "-m", "cleardr.cli", *args],
        capture_output=True, text=True, env=env, cwd=cwd, timeout=300,
    )


def test_criterion_9_cli_determinism_and_format(tmp_path):
    fixture = tmp_path / "data"
    synthetic.write_fixture_tree(fixture, count=24, size=16, blob=8, seed=11)
    outputs = {}
    for tag in ("a", "b"):
        run_dir = tmp_path / tag
        run_dir.mkdir()
        ckpt = run_dir / "model.clrs"
        result = _run_cli([
            "train",
            "--csv", str(fixture / "labels.csv"),
            "--images", str(fixture / "images"),
            "--out", str(ckpt),
            "--epochs", "2", "--grades", "3", "--size", "16",
            "--seed", "7", "--crop-threshold", "0",
        ], cwd=tmp_path)
        assert result.returncode == 0, result.stderr
        result = _run_cli([
            "clear-map",
            "--model", str(ckpt),
            "--image", str(fixture / "images" / "blob_00003.png"),
            "--out", str(run_dir / "map.png"),
            "--alpha", "0.6",
            "--crop-threshold", "0",
        ], cwd=tmp_path)
        assert result.returncode == 0, result.stderr
        outputs[tag] = {
            "ckpt": ckpt.read_bytes(),
            "map": (run_dir / "map.png").read_bytes(),
            "overlay": (run_dir / "map_overlay.png").read_bytes(),
        }
    identical = all(outputs["a"][key] == outputs["b"][key] for key in outputs["a"])

    # checkpoint round-trip: load then save reproduces the exact bytes
    ckpt_path = tmp_path / "a" / "model.clrs"
    model = S.load(ckpt_path)
    resaved = tmp_path / "resaved.clrs"
    S.save(model, resaved)
    round_trip = ckpt_path.read_bytes() == resaved.read_bytes()

    # corrupted checkpoints fail with structured errors, never crashes
    blob = bytearray(ckpt_path.read_bytes())
    structured = True
    from cleardr.errors import CheckpointError
    mutations = [blob[:0], blob[:3], blob[:9], blob[: len(blob) // 2], blob[:-1]]
    for offset in (0, 5, 8, 40, len(blob) // 2, len(blob) - 3):
        mutated = bytearray(blob)
        mutated[offset] ^= 0xFF
        mutations.append(mutated)
    for k, mutated in enumerate(mutations):
        bad = tmp_path / f"bad_{k}.clrs"
        bad.write_bytes(bytes(mutated))
        try:
            S.load(bad)
            structured = False  # every mutation must be caught
        except CheckpointError:
            pass
        except Exception:
            structured = False
    _report(
        "criterion 9 CLI determinism and checkpoint format",
        identical and round_trip and structured,
        f"2 runs byte-identical, round-trip exact, {len(mutations)} corruptions "
        "all raised structured errors",
    )
