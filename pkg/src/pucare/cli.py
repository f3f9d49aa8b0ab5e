"""``pucare`` command-line entry point.

Exit codes: 0 success, 1 usage or parameter error, 2 data/format error,
3 verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import data_io, gradcheck
from .augment import AugmentConfig, build_augmented_set
from .data_io import Dataset, Sample, SyntheticSpec, generate_synthetic, load_dataset, read_checkpoint, save_checkpoint
from .errors import DataError, FileReadError, ParameterError, PucareError, VerificationError
from .metrics import binarize
from .model import ModelConfig, init_params
from .preprocess import PreprocessConfig, normalize, preprocess_pair, resize_bilinear, resize_mask_nearest
from .training import SplitSpec, TrainConfig, evaluate_model, fit, predict_proba, pretrain_finetune, split_dataset

log = logging.getLogger("pucare")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# configuration


def _pick(cls, *sources: dict) -> dict:
    names = {f.name for f in fields(cls)}
    out = {}
    for src in sources:
        out.update({k: v for k, v in (src or {}).items() if k in names})
    return out


def load_config(path: str | None) -> dict:
    """Read a JSON config. Sections ``model``, ``train``, ``pretrain``,
    ``augment`` and ``preprocess`` are optional; top-level keys are matched
    to whichever config has a field of that name."""
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataError(f"config {path} must be a JSON object")
    return doc


def resolve_configs(doc: dict, overrides: dict, input_size: int | None = None):
    """Merge default < file < flag values into model / train / pretrain configs."""
    top = {k: v for k, v in doc.items() if not isinstance(v, dict)}
    model_kw = _pick(ModelConfig, top, doc.get("model"))
    if input_size is not None and "input_size" not in model_kw:
        model_kw["input_size"] = input_size
    if overrides.get("no_attention"):
        model_kw["attention"] = False
    train_kw = _pick(TrainConfig, top, doc.get("train"))
    pre_kw = _pick(TrainConfig, top, doc.get("train"), doc.get("pretrain"))
    for kw in (train_kw, pre_kw):
        if overrides.get("seed") is not None:
            kw["seed"] = overrides["seed"]
        if overrides.get("epochs") is not None:
            kw["epochs"] = overrides["epochs"]
    if overrides.get("seed") is not None:
        model_kw["seed"] = overrides["seed"]
    return ModelConfig(**model_kw), TrainConfig(**train_kw), TrainConfig(**pre_kw)


def _input_size(ds: Dataset) -> int:
    shapes = {s.image.shape[:2] for s in ds}
    if len(shapes) != 1:
        raise DataError(f"images must share one size (run `pucare preprocess`), got {sorted(shapes)}")
    h, w = shapes.pop()
    if h != w:
        raise DataError(f"images must be square, got {h}x{w}")
    return h


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    ds = generate_synthetic(SyntheticSpec(n=args.n, domain=args.domain, size=args.size, seed=args.seed))
    data_io.save_dataset(ds, args.out)
    print(f"wrote {len(ds)} {args.domain} samples to {args.out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = PreprocessConfig(target_size=args.size, antialias=not args.no_antialias)
    ds = load_dataset(args.inp)
    samples = [Sample(s.id, *preprocess_pair(s.image, s.mask, cfg)) for s in ds]
    meta = dict(ds.meta, preprocess={"target_size": cfg.target_size, "antialias": cfg.antialias, "normalize": cfg.normalize_mode})
    data_io.save_dataset(Dataset(samples, meta), args.out)
    print(f"resized {len(samples)} samples to {cfg.target_size}x{cfg.target_size} in {args.out}")
    return EXIT_OK


def cmd_augment(args) -> int:
    doc = load_config(args.config)
    kw = _pick(AugmentConfig, doc.get("augment"))
    kw.update(rotations_per_image=args.rotations, reflect_x=args.reflect, reflect_y=args.reflect, watershed=args.watershed, seed=args.seed)
    if args.threshold is not None:
        kw["watershed_threshold"] = args.threshold
    if "rotation_range_deg" in kw:
        kw["rotation_range_deg"] = tuple(kw["rotation_range_deg"])
    cfg = AugmentConfig(**kw)
    out = build_augmented_set(load_dataset(args.inp), cfg)
    data_io.save_dataset(out, args.out)
    print(f"wrote {len(out)} samples to {args.out}")
    return EXIT_OK


def _print_metrics(label: str, m) -> None:
    print(f"{label}: acc={m.acc:.6f} iou={m.iou:.6f} dsc={m.dsc:.6f}")


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    doc = load_config(args.config)
    init = read_checkpoint(args.init) if args.init else None
    if init is not None:
        model_cfg = init.config
        if args.no_attention and model_cfg.attention:
            raise ParameterError("--no-attention conflicts with an --init checkpoint that has attention weights")
        _, train_cfg, _ = resolve_configs(doc, {"seed": args.seed, "epochs": args.epochs}, model_cfg.input_size)
    else:
        model_cfg, train_cfg, _ = resolve_configs(
            doc, {"seed": args.seed, "epochs": args.epochs, "no_attention": args.no_attention}, _input_size(ds)
        )
    split = None
    if args.val:
        train, val = ds, load_dataset(args.val)
    else:
        spec = SplitSpec(seed=train_cfg.seed)
        train, val, test = split_dataset(ds, spec)
        split = {"seed": spec.seed, "train": train.ids, "val": val.ids, "test": test.ids}
    params = init.params if init is not None else init_params(model_cfg, dtype=train_cfg.dtype)
    params, history = fit(train, val, params, model_cfg, train_cfg)
    resolved = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}
    final_val = None
    evaluation = None
    if len(val):
        evaluation = evaluate_model(val, params, model_cfg, train_cfg)
        final_val = evaluation.macro.to_dict()
        _print_metrics("validation", evaluation.macro)
    save_checkpoint(
        params,
        model_cfg,
        args.out,
        seed=train_cfg.seed,
        history_digest=history.digest(),
        extra={"resolved_config": resolved, "split": split, "final_val": final_val},
    )
    if args.report:
        data_io.write_report(history, evaluation, args.report, config=resolved)
    print(f"saved checkpoint to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    source, target = load_dataset(args.source), load_dataset(args.target)
    doc = load_config(args.config)
    model_cfg, fine_cfg, pre_cfg = resolve_configs(doc, {"seed": args.seed}, _input_size(source))
    spec = SplitSpec(seed=fine_cfg.seed)
    t_train, t_val, t_test = split_dataset(target, spec)
    params, (h_pre, h_fine) = pretrain_finetune(source, t_train, pre_cfg, fine_cfg, model_cfg, target_val=t_val)
    resolved = {"model": model_cfg.to_dict(), "pretrain": pre_cfg.to_dict(), "train": fine_cfg.to_dict()}
    evaluation = evaluate_model(t_val, params, model_cfg, fine_cfg)
    _print_metrics("target validation", evaluation.macro)
    split = {"seed": spec.seed, "train": t_train.ids, "val": t_val.ids, "test": t_test.ids}
    save_checkpoint(
        params,
        model_cfg,
        args.out,
        seed=fine_cfg.seed,
        history_digest=h_fine.digest(),
        extra={"resolved_config": resolved, "split": split, "final_val": evaluation.macro.to_dict(), "pretrain_history": h_pre.to_dict()},
    )
    if args.report:
        data_io.write_report(h_fine, evaluation, args.report, config=resolved, extra={"pretrain": h_pre.to_dict()})
    print(f"saved checkpoint to {args.out}")
    return EXIT_OK


def _train_config_from(ckpt) -> TrainConfig:
    resolved = ckpt.extra.get("resolved_config") or {}
    return TrainConfig.from_dict(resolved.get("train") or {})


def cmd_eval(args) -> int:
    ckpt = read_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    if args.split != "all":
        split = ckpt.extra.get("split")
        if not split:
            raise ParameterError(f"--split {args.split} needs a checkpoint trained with an internal split")
        ds = ds.subset(split[args.split], note=args.split)
        if len(ds) != len(split[args.split]):
            raise DataError(f"{args.data} does not contain every sample of the recorded {args.split} split")
    train_cfg = _train_config_from(ckpt)
    evaluation = evaluate_model(ds, ckpt.params, ckpt.config, train_cfg)
    config = {"model": ckpt.config.to_dict(), "train": train_cfg.to_dict(), "data": str(args.data), "split": args.split}
    data_io.write_report(None, evaluation, args.report, config=config)
    _print_metrics("macro", evaluation.macro)
    _print_metrics("micro", evaluation.micro)
    return EXIT_OK


def _read_rgb(path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            return normalize(np.asarray(im.convert("RGB")))
    except OSError as exc:
        raise FileReadError(f"cannot read {path}: {exc}") from exc


def _parse_color(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise ParameterError(f"--color needs three comma-separated values, got {text!r}")
    if max(parts) > 1.0:
        parts = [p / 255.0 for p in parts]
    return tuple(parts)


def cmd_predict(args) -> int:
    ckpt = read_checkpoint(args.ckpt)
    img = _read_rgb(args.image)
    h, w = img.shape[:2]
    s = ckpt.config.input_size
    small = resize_bilinear(img, s, s, antialias=True)
    prob = predict_proba(small.transpose(2, 0, 1)[None], ckpt.params, ckpt.config)[0, 0]
    mask = resize_mask_nearest(binarize(prob, _train_config_from(ckpt).binarize_threshold), h, w)
    PILImage.fromarray(mask * 255, "L").save(args.out_mask)
    if args.overlay:
        over = data_io.render_overlay(img, mask, _parse_color(args.color), args.alpha)
        PILImage.fromarray(data_io.to_uint8(over), "RGB").save(args.overlay)
    print(f"wound fraction {mask.mean():.4f}; mask written to {args.out_mask}")
    return EXIT_OK


def cmd_overlay(args) -> int:
    img = _read_rgb(args.image)
    try:
        with PILImage.open(args.mask) as im:
            mask = (np.asarray(im.convert("L")) > 127).astype(np.uint8)
    except OSError as exc:
        raise FileReadError(f"cannot read {args.mask}: {exc}") from exc
    over = data_io.render_overlay(img, mask, _parse_color(args.color), args.alpha)
    PILImage.fromarray(data_io.to_uint8(over), "RGB").save(args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ops = [o.strip() for o in args.ops.split(",")] if args.ops else None
    try:
        results = gradcheck.run_suite(ops, seeds=args.seeds)
    except KeyError as exc:
        raise ParameterError(str(exc.args[0])) from exc
    print(gradcheck.format_table(results))
    if not all(r.passed for r in results):
        raise VerificationError("gradient check failed for: " + ", ".join(r.op for r in results if not r.passed))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pucare", description="Wound segmentation with a residual attention U-Net.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic wound dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--domain", choices=("source", "target"), default="source")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="resize a dataset to a square input size")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=224)
    s.add_argument("--no-antialias", action="store_true")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("augment", help="expand a dataset with rotations, reflections and watershed copies")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--rotations", type=int, default=2)
    s.add_argument("--reflect", action="store_true")
    s.add_argument("--watershed", action="store_true")
    s.add_argument("--threshold", type=float, default=None)
    s.add_argument("--config", default=None)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("train", help="train a model (splits the data 70/10/20 unless --val is given)")
    s.add_argument("--data", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--init", default=None)
    s.add_argument("--val", default=None)
    s.add_argument("--no-attention", action="store_true")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--report", default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("pretrain", help="pretrain on a source dataset, then fine-tune on a target dataset")
    s.add_argument("--source", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--report", default=None)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("eval", help="evaluate a checkpoint and write a JSON report")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="segment one image")
    s.add_argument("--image", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out-mask", required=True)
    s.add_argument("--overlay", default=None)
    s.add_argument("--alpha", type=float, default=0.5)
    s.add_argument("--color", default="255,0,0")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("overlay", help="blend a mask onto an image")
    s.add_argument("--image", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--alpha", type=float, default=0.5)
    s.add_argument("--color", default="255,0,0")
    s.set_defaults(func=cmd_overlay)

    s = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    s.add_argument("--ops", default=None, help="comma-separated subset of: " + ", ".join(gradcheck.CASES))
    s.add_argument("--seeds", type=int, default=20)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except VerificationError as exc:
        print(f"pucare: verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except ParameterError as exc:
        print(f"pucare: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"pucare: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PucareError as exc:
        print(f"pucare: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
