"""Command-line surface: train, grade, clear-map, eval, selftest.

Exit codes are a stable contract: 0 success, 1 internal or self-check
failure, 2 user or input error, 3 numerical divergence.

Every flag can also be supplied through ``--config FILE`` holding plain
``key=value`` lines (``#`` starts a comment).  Precedence is built-in
defaults, then the config file, then explicit command-line flags.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from types import SimpleNamespace

from . import clear as C
from . import discovery as D
from . import ingest as I
from . import oracles
from . import sequencer as S
from .errors import (
    CheckpointError,
    ConfigError,
    DomainError,
    IntegrityError,
    ManifestError,
    NumericalError,
    ShapeError,
    TrainingDivergenceError,
)

_BOOL_WORDS = {
    "1": True, "true": True, "yes": True, "on": True,
    "0": False, "false": False, "no": False, "off": False,
}


def _to_bool(raw: str) -> bool:
    try:
        return _BOOL_WORDS[raw.strip().lower()]
    except KeyError:
        raise ValueError(f"expected a boolean word, got {raw!r}") from None


class Opt:
    """One documented flag: name, default, converter, help text."""

    def __init__(self, name, default, conv, help_text, required=False):
        self.name = name
        self.default = default
        self.conv = conv
        self.help = help_text
        self.required = required

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


_COMMON = [Opt("config", None, str, "key=value file overriding flag defaults")]

_TRAIN_OPTS = _COMMON + [
    Opt("csv", None, str, "label manifest CSV with header image,level", required=True),
    Opt("images", None, str, "directory holding the images", required=True),
    Opt("out", None, str, "checkpoint output path", required=True),
    Opt("metrics", None, str, "metrics CSV path (default: <out>.metrics.csv)"),
    Opt("epochs", 30, int, "training epochs (default 30)"),
    Opt("lr", 0.01, float, "learning rate (default 0.01)"),
    Opt("momentum", 0.9, float, "momentum coefficient (default 0.9)"),
    Opt("batch_size", 16, int, "minibatch size (default 16)"),
    Opt("seed", 0, int, "seed for init, split, shuffling, augmentation (default 0)"),
    Opt("split", 0.9, float, "train fraction of the data (default 0.9)"),
    Opt("grades", 5, int, "grade count (default 5, the retinopathy scale)"),
    Opt("size", 64, int, "square input canvas side (default 64)"),
    Opt("laterality", "all", str, "keep all/right/left eye images (default all)"),
    Opt("crop_threshold", 10.0, float, "background luma threshold (default 10)"),
    Opt("hflip", True, _to_bool, "horizontal flip augmentation (default true)"),
    Opt("vflip", True, _to_bool, "vertical flip augmentation (default true)"),
]

_GRADE_OPTS = _COMMON + [
    Opt("model", None, str, "checkpoint path", required=True),
    Opt("image", None, str, "image to grade", required=True),
    Opt("crop_threshold", 10.0, float, "background luma threshold (default 10)"),
]

_CLEAR_OPTS = _COMMON + [
    Opt("model", None, str, "checkpoint path", required=True),
    Opt("image", None, str, "image to explain", required=True),
    Opt("out", None, str, "map PNG output path", required=True),
    Opt("gating", "deconvnet", str,
        "backward ReLU policy: deconvnet, guided or none (default deconvnet)"),
    Opt("alpha", None, float, "also write an overlay PNG with this blend weight"),
    Opt("overlay_out", None, str, "overlay PNG path (default: <out stem>_overlay.png)"),
    Opt("box", None, int, "draw the most-attentive SxS box in red"),
    Opt("stack_out", None, str, "write the per-grade response stack sidecar"),
    Opt("full_out", None, str, "write the unmasked back-projection sidecar"),
    Opt("crop_threshold", 10.0, float, "background luma threshold (default 10)"),
]

_EVAL_OPTS = _COMMON + [
    Opt("model", None, str, "checkpoint path", required=True),
    Opt("csv", None, str, "label manifest CSV", required=True),
    Opt("images", None, str, "directory holding the images", required=True),
    Opt("laterality", "all", str, "keep all/right/left eye images (default all)"),
    Opt("crop_threshold", 10.0, float, "background luma threshold (default 10)"),
]

_SELFTEST_OPTS = _COMMON + [
    Opt("seed", 0, int, "seed for the oracle suite (default 0)"),
]


def _parse_config_file(path: str) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    return values


def _resolve(opts: list[Opt], args: argparse.Namespace) -> SimpleNamespace:
    """Merge defaults, config file values and explicit flags, in that order."""
    by_name = {o.name: o for o in opts}
    values = {o.name: o.default for o in opts}
    given = vars(args)
    if "config" in given and given["config"] is not None:
        for key, raw in _parse_config_file(given["config"]).items():
            opt = by_name.get(key)
            if opt is None or key == "config":
                raise ConfigError(
                    f"unknown config key {key!r}; valid keys: "
                    + ", ".join(sorted(n for n in by_name if n != "config"))
                )
            try:
                values[key] = opt.conv(raw)
            except ValueError as exc:
                raise ConfigError(f"config key {key}: {exc}") from exc
    for name, raw in given.items():
        if name in by_name and raw is not None and name != "config":
            try:
                values[name] = by_name[name].conv(raw)
            except ValueError as exc:
                raise ConfigError(f"flag --{name.replace('_', '-')}: {exc}") from exc
    for opt in opts:
        if opt.required and values[opt.name] is None:
            raise ConfigError(f"missing required flag {opt.flag}")
    return SimpleNamespace(**values)


def _add_opts(sub: argparse.ArgumentParser, opts: list[Opt]) -> None:
    for opt in opts:
        sub.add_argument(opt.flag, dest=opt.name, default=None, help=opt.help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cleardr",
        description="Interpretable fundus grading: train, grade and explain.",
    )
    subs = parser.add_subparsers(dest="command")
    for name, opts, fn, desc in (
        ("train", _TRAIN_OPTS, cmd_train, "train a sequencer on a labeled image set"),
        ("grade", _GRADE_OPTS, cmd_grade, "predict the grade of one image"),
        ("clear-map", _CLEAR_OPTS, cmd_clear_map, "render the color-coded attention map"),
        ("eval", _EVAL_OPTS, cmd_eval, "accuracy and confusion matrix on a labeled set"),
        ("selftest", _SELFTEST_OPTS, cmd_selftest, "run the embedded oracle suite"),
    ):
        sub = subs.add_parser(name, help=desc, description=desc)
        _add_opts(sub, opts)
        sub.set_defaults(cmd=fn, opts=opts)
    return parser


def _prepare_image(model: S.SequencerModel, path: str, crop_threshold: float):
    """Decode, crop, resize to the model canvas; returns the display image
    (uint8, model resolution) and the normalized input tensor."""
    raw = I.read_image(path)
    _, h, w = model.config.input_shape
    display = I.resize(I.selective_crop(raw, crop_threshold), h, w)
    tensor = I.to_tensor(display)
    if model.norm is not None:
        tensor = D.normalize_channels(tensor, model.norm)
    return display, tensor


def cmd_train(args: argparse.Namespace) -> int:
    v = _resolve(_TRAIN_OPTS, args)
    grades = S.GradeSet.generic(v.grades)
    manifest = I.load_manifest(v.csv, v.images, v.laterality, v.grades)
    dataset = I.load_dataset(manifest, v.size, v.crop_threshold, grades)
    train_ds, test_ds = D.split(dataset, v.split, v.seed)
    model0 = S.initialize(S.SequencerConfig.default(grades, v.size), v.seed)
    config = D.TrainConfig(
        learning_rate=v.lr,
        momentum=v.momentum,
        epochs=v.epochs,
        batch_size=v.batch_size,
        seed=v.seed,
        hflip=v.hflip,
        vflip=v.vflip,
    )

    def progress(row: D.EpochMetrics) -> None:
        print(
            f"epoch {row.epoch}: loss={row.mean_loss:.4f} "
            f"train_acc={row.train_accuracy:.4f} test_acc={row.test_accuracy:.4f}"
        )

    model, metrics = D.train(
        model0, train_ds, config,
        test_set=test_ds if len(test_ds) else None,
        progress=progress,
    )
    S.save(model, v.out)
    metrics_path = v.metrics or (str(v.out) + ".metrics.csv")
    D.write_metrics(metrics_path, metrics)
    print(f"wrote checkpoint {v.out}")
    print(f"wrote metrics {metrics_path}")
    return 0


def cmd_grade(args: argparse.Namespace) -> int:
    v = _resolve(_GRADE_OPTS, args)
    model = S.load(v.model)
    _, tensor = _prepare_image(model, v.image, v.crop_threshold)
    grade, probs = S.predict_grade(model, tensor)
    name = model.config.grades.names[grade]
    prob_text = ",".join(f"{p:.6f}" for p in probs)
    print(f"grade={grade} name={name} probs={prob_text}")
    return 0


def cmd_clear_map(args: argparse.Namespace) -> int:
    v = _resolve(_CLEAR_OPTS, args)
    if v.gating not in C.GATING_POLICIES:
        raise DomainError(
            f"unknown gating policy {v.gating!r}, expected one of {C.GATING_POLICIES}"
        )
    model = S.load(v.model)
    display, tensor = _prepare_image(model, v.image, v.crop_threshold)
    trace = S.forward(model, tensor)
    stack = C.attentive_stack(trace, model, v.gating)
    class_map = C.dominant_class_map(stack)
    response = C.dominant_response_map(stack, class_map)
    palette = C.GradeColorMap.evenly_spaced(model.config.grades.count)
    cm = C.compose_clear_map(
        class_map, response, palette,
        model_checksum=model.checksum(), gating=v.gating,
    )
    png = C.clear_map_to_u8(cm)
    rect = None
    if v.box is not None:
        rect = C.most_attentive_region(response, v.box)
        png = C.draw_box(png, rect)
        print(f"box top={rect.top} left={rect.left} height={rect.height} width={rect.width}")
    I.write_png(v.out, png)
    print(f"wrote map {v.out}")

    if v.alpha is not None:
        blended = I.from_map(C.overlay(cm, display, v.alpha))
        if rect is not None:
            blended = C.draw_box(blended, rect)
        overlay_path = v.overlay_out or str(
            Path(v.out).with_name(Path(v.out).stem + "_overlay.png")
        )
        I.write_png(overlay_path, blended)
        print(f"wrote overlay {overlay_path}")
    if v.stack_out:
        C.write_stack(v.stack_out, stack)
        print(f"wrote stack {v.stack_out}")
    if v.full_out:
        full = C.back_project(trace, model, None, v.gating)
        C.write_stack(
            v.full_out,
            C.AttentiveResponseStack(
                maps=full[None], grades=S.GradeSet.generic(1), gating=v.gating
            ),
        )
        print(f"wrote full back-projection {v.full_out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    v = _resolve(_EVAL_OPTS, args)
    model = S.load(v.model)
    grades = model.config.grades
    manifest = I.load_manifest(v.csv, v.images, v.laterality, grades.count)
    size = model.config.input_shape[1]
    dataset = I.load_dataset(manifest, size, v.crop_threshold, grades)
    result = D.evaluate(model, dataset)
    print(f"accuracy={result.accuracy:.6f}")
    for row in result.confusion:
        print(",".join(str(int(x)) for x in row))
    return 0


def cmd_selftest(args: argparse.Namespace) -> int:
    v = _resolve(_SELFTEST_OPTS, args)
    results = oracles.run_selftest(v.seed)
    for res in results:
        status = "ok" if res.ok else "FAIL"
        print(f"{res.name}: {status} {res.detail}")
    return 0 if all(r.ok for r in results) else 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "cmd", None) is None:
        parser.print_help()
        return 2
    try:
        return args.cmd(args)
    except (TrainingDivergenceError, NumericalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except IntegrityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (
        CheckpointError,
        ManifestError,
        ConfigError,
        DomainError,
        ShapeError,
        OSError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
