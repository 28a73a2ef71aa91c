"""``eggloc`` command-line entry point.

Subcommands: split, train, infer, eval, compare, crop. Every command writes a
run manifest (JSON) recording its fully resolved configuration next to its
primary output.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from eggloc import __version__
from eggloc.dataset_io import (
    load_annotations,
    read_split_manifest,
    split_dataset,
    write_split_manifest,
)
from eggloc.errors import BackendUnavailableError, EgglocError
from eggloc.evaluation import DEFAULT_BINS, compare, evaluate
from eggloc.loc_codec import build_prompt
from eggloc.pipeline import (
    BACKENDS,
    InferenceFailure,
    TrainConfig,
    get_backend,
    run_inference,
    run_training,
    crop_regions,
)
from eggloc.predictions import read_predictions, write_predictions
from eggloc.preprocess import PreprocessConfig, load_image
from eggloc.report import render_report

logger = logging.getLogger("eggloc")

IMAGE_SUFFIXES = {".bmp", ".jpeg", ".jpg", ".png", ".tif", ".tiff"}
RUN_MANIFEST = "run_manifest.json"

EPILOG = """\
environment:
  EGGLOC_MODEL_DIR   local directory holding Florence-2 weights for the
                     'florence2' backend (default: fetch microsoft/Florence-2-large)
"""


class CommandError(Exception):
    """Fatal, user-facing failure; message goes to stderr and exit code is nonzero."""

    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict
    outputs: dict
    seed: Optional[int]
    tool_version: str = __version__
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def write(self, path: Path) -> Path:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


# --------------------------------------------------------------------------- config


def resolve_configs(args) -> tuple[TrainConfig, PreprocessConfig]:
    """Defaults, then the config file, then explicit flags."""
    train_keys = {f.name for f in fields(TrainConfig)}
    pre_keys = {f.name for f in fields(PreprocessConfig)}
    train: dict = {}
    pre: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise CommandError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise CommandError(f"{path}: invalid JSON ({exc.msg})") from None
        if not isinstance(data, dict):
            raise CommandError(f"{path}: config must be a JSON object")
        unknown = sorted(set(data) - train_keys - pre_keys)
        if unknown:
            raise CommandError(f"{path}: unknown config key(s) {unknown}")
        train = {k: v for k, v in data.items() if k in train_keys}
        pre = {k: v for k, v in data.items() if k in pre_keys}
    for name in train_keys:
        value = getattr(args, name, None)
        if value is not None:
            train[name] = value
    for name in pre_keys:
        value = getattr(args, name, None)
        if value is not None:
            pre[name] = value
    train_cfg = TrainConfig(**train)
    pre.setdefault("target_size", train_cfg.image_size)
    return train_cfg, PreprocessConfig(**pre)


def _backend_options(args) -> dict:
    if args.backend == "stub":
        opts = {}
        if getattr(args, "stub_script", None):
            try:
                opts["script"] = json.loads(Path(args.stub_script).read_text(encoding="utf-8"))
            except FileNotFoundError:
                raise CommandError(f"stub script not found: {args.stub_script}") from None
        if getattr(args, "stub_losses", None):
            opts["losses"] = args.stub_losses
        return opts
    return {}


def _make_backend(args):
    try:
        return get_backend(args.backend, **_backend_options(args))
    except BackendUnavailableError as exc:
        raise CommandError(str(exc)) from None


def _load_gt(path):
    try:
        return load_annotations(path)
    except FileNotFoundError as exc:
        raise CommandError(str(exc)) from None


def _list_images(images_dir: Path) -> list[Path]:
    if not images_dir.is_dir():
        raise CommandError(f"image directory not found: {images_dir}")
    return sorted(p for p in images_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _file_key(path: str) -> str:
    return path.replace("\\", "/").rsplit("/", 1)[-1]


# --------------------------------------------------------------------------- commands


def cmd_split(args) -> int:
    images, _, _ = _load_gt(args.annotations)
    split = split_dataset([im.image_id for im in images], seed=args.seed, ratios=args.ratios)
    out = Path(args.out)
    write_split_manifest(out, split)
    RunManifest(
        command="split",
        config={"ratios": list(split.ratios), "seed": args.seed},
        inputs={"annotations": str(args.annotations)},
        outputs={"split": str(out)},
        seed=args.seed,
    ).write(out.with_name(out.name + ".manifest.json"))
    print("train={} validation={} test={}".format(*split.sizes))
    return 0


def cmd_train(args) -> int:
    train_cfg, pre_cfg = resolve_configs(args)
    images, annotations, _ = _load_gt(args.annotations)
    split = read_split_manifest(args.split)
    images_dir = Path(args.images_dir) if args.images_dir else Path(args.annotations).parent
    records = {im.image_id: im for im in images}
    missing = [i for i in split.train if i not in records]
    if missing:
        raise CommandError(f"split lists image ids absent from the annotations: {missing[:5]}")
    backend = _make_backend(args)
    log = run_training(
        train_cfg,
        split.train,
        annotations,
        backend,
        records,
        prompt=build_prompt(args.prompt),
        preprocess=pre_cfg,
        image_loader=lambda p: load_image(images_dir / p),
        label_mode=args.label_mode,
    )

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_log.json").write_text(json.dumps(log.to_dict(), indent=2, sort_keys=True) + "\n")
    adapter = out / ("adapter.json" if backend.name == "stub" else "adapter")
    backend.save_adapter(adapter)
    checkpoint = {
        "backend": backend.name,
        "adapter_path": adapter.name,
        "config_hash": train_cfg.config_hash(),
        "total_optimizer_steps": log.total_optimizer_steps,
    }
    (out / "checkpoint.json").write_text(json.dumps(checkpoint, indent=2, sort_keys=True) + "\n")
    RunManifest(
        command="train",
        config={"train": train_cfg.to_dict(), "preprocess": asdict(pre_cfg), "backend": args.backend,
                "label_mode": args.label_mode, "prompt": build_prompt(args.prompt).task_text},
        inputs={"annotations": str(args.annotations), "split": str(args.split), "images_dir": str(images_dir)},
        outputs={"train_log": "train_log.json", "checkpoint": "checkpoint.json", "adapter": adapter.name},
        seed=train_cfg.seed,
    ).write(out / RUN_MANIFEST)
    print(f"total_optimizer_steps={log.total_optimizer_steps}")
    return 0


def cmd_infer(args) -> int:
    train_cfg, pre_cfg = resolve_configs(args)
    images_dir = Path(args.images_dir)
    files = _list_images(images_dir)
    if not files:
        raise CommandError(f"no images found in {images_dir}")

    by_name = {}
    if args.annotations:
        images, _, _ = _load_gt(args.annotations)
        by_name = {_file_key(im.file_path): im.image_id for im in images}
    items = [(by_name.get(p.name, p.stem), p) for p in files]

    backend = _make_backend(args)
    if args.adapter:
        backend.load_adapter(args.adapter)
    prompt = build_prompt(args.prompt)
    results = run_inference(items, backend, pre_cfg, prompt, jobs=args.jobs)

    predictions, failures = [], 0
    for res in results:
        if isinstance(res, InferenceFailure):
            failures += 1
            logger.warning("image %s: %s", res.image_id, res.error)
            continue
        for w in res.warnings:
            logger.warning("image %s: %s", res.image_id, w)
        predictions.extend(res.predictions())

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = write_predictions(out, predictions)
    RunManifest(
        command="infer",
        config={"preprocess": asdict(pre_cfg), "backend": args.backend, "prompt": prompt.task_text,
                "jobs": args.jobs, "adapter": args.adapter, "stub_script": args.stub_script},
        inputs={"images_dir": str(images_dir), "annotations": args.annotations},
        outputs={"predictions": str(out)},
        seed=train_cfg.seed,
    ).write(out.with_name(out.name + ".manifest.json"))
    print(f"images={len(items)} failed={failures} predictions={n}")
    if failures == len(items):
        raise CommandError("inference failed for every image", code=1)
    return 0


def _evaluate_file(pred_path, images, gts, args, name):
    try:
        preds = read_predictions(pred_path)
    except FileNotFoundError:
        raise CommandError(f"predictions file not found: {pred_path}") from None
    return evaluate(
        preds, gts, images=images, category_aware=args.category_aware, detector_name=name, n_bins=args.bins
    )


def cmd_eval(args) -> int:
    images, gts, _ = _load_gt(args.annotations)
    report = _evaluate_file(args.predictions, images, gts, args, args.name or Path(args.predictions).stem)
    out = Path(args.out_dir)
    written = render_report(report, out)
    RunManifest(
        command="eval",
        config={"category_aware": args.category_aware, "bins": args.bins, "name": report.detector_name},
        inputs={"predictions": str(args.predictions), "annotations": str(args.annotations)},
        outputs={"files": [p.name for p in written]},
        seed=None,
    ).write(out / RUN_MANIFEST)
    print(f"n_ground_truth={report.n_ground_truth}")
    print(f"n_missed={report.n_missed}")
    print(f"n_false_positive={report.n_false_positive}")
    print(f"mean_iou={report.mean_iou:.6f}")
    return 0


def cmd_compare(args) -> int:
    images, gts, _ = _load_gt(args.annotations)
    a = _evaluate_file(args.pred_a, images, gts, args, args.name_a or Path(args.pred_a).stem)
    b = _evaluate_file(args.pred_b, images, gts, args, args.name_b or Path(args.pred_b).stem)
    cmp = compare(a, b)
    out = Path(args.out_dir)
    written = render_report(cmp, out)
    RunManifest(
        command="compare",
        config={"category_aware": args.category_aware, "bins": args.bins,
                "name_a": a.detector_name, "name_b": b.detector_name},
        inputs={"pred_a": str(args.pred_a), "pred_b": str(args.pred_b), "annotations": str(args.annotations)},
        outputs={"files": [p.name for p in written]},
        seed=None,
    ).write(out / RUN_MANIFEST)
    for tag, r, s in (("a", a, cmp.spread_a), ("b", b, cmp.spread_b)):
        print(f"{tag}: {r.detector_name} mean_iou={r.mean_iou:.6f} std={s.std:.6f} "
              f"frac_0.80_0.95={s.frac_in_range:.6f} frac_zero_bin={s.frac_zero_bin:.6f}")
    print(f"better_localized={cmp.better_localized or 'tie'}")
    print(f"delta_mean={cmp.delta_mean:.6f}")
    return 0


def cmd_crop(args) -> int:
    preds = read_predictions(args.predictions)
    images_dir = Path(args.images_dir)
    files = {p.stem: p for p in _list_images(images_dir)}
    files.update({p.name: p for p in files.values()})
    if args.annotations:
        images, _, _ = _load_gt(args.annotations)
        for im in images:
            path = images_dir / _file_key(im.file_path)
            files[im.image_id] = path
            files[str(im.image_id)] = path

    grouped: dict = {}
    for p in preds:
        grouped.setdefault(p.image_id, []).append(p.box)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for image_id, boxes in grouped.items():
        source = files.get(image_id, files.get(str(image_id)))
        if source is None:
            logger.warning("image %s: no file in %s, skipped", image_id, images_dir)
            continue
        try:
            pixels = load_image(source)
        except Exception as exc:  # noqa: BLE001
            logger.warning("image %s: unreadable (%s), skipped", image_id, exc)
            continue
        for index, box in enumerate(boxes):
            crops = crop_regions(pixels, [box])
            if not crops:
                continue
            name = f"{image_id}_{index}.{args.ext}"
            Image.fromarray(np.ascontiguousarray(crops[0])).save(out / name)
            written.append(name)
    RunManifest(
        command="crop",
        config={"ext": args.ext},
        inputs={"predictions": str(args.predictions), "images_dir": str(images_dir),
                "annotations": args.annotations},
        outputs={"files": written},
        seed=None,
    ).write(out / RUN_MANIFEST)
    print(f"crops={len(written)}")
    return 0


# --------------------------------------------------------------------------- parser


def _ratios(values: Sequence[str]) -> tuple[float, float, float]:
    return tuple(float(v) for v in values)


def _add_train_flags(p):
    g = p.add_argument_group("configuration (flags override --config, which overrides defaults)")
    g.add_argument("--config", help="JSON file with TrainConfig / PreprocessConfig keys")
    g.add_argument("--epochs", type=int)
    g.add_argument("--learning-rate", dest="learning_rate", type=float)
    g.add_argument("--per-device-batch", dest="per_device_batch", type=int)
    g.add_argument("--grad-accum-steps", dest="grad_accum_steps", type=int)
    g.add_argument("--adapter-rank", dest="adapter_rank", type=int)
    g.add_argument("--image-size", dest="image_size", type=int)
    g.add_argument("--target-size", dest="target_size", type=int)
    g.add_argument("--pad-value", dest="pad_value", type=int)
    g.add_argument("--mode", choices=("letterbox", "stretch"))
    g.add_argument("--seed", type=int)
    g.add_argument("--prompt", help="detection instruction (default: the backend's <OD> task tag)")


def _add_backend_flags(p):
    p.add_argument("--backend", default="stub", help=f"one of: {', '.join(sorted(BACKENDS))}")
    p.add_argument("--stub-script", dest="stub_script", help="JSON object image_id -> output text (stub backend)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eggloc",
        description="Parasitic-egg localization with a prompt-driven vision-language model.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="seeded train/validation/test split manifest")
    p.add_argument("--annotations", required=True, help="COCO detection JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", nargs=3, type=float, default=(0.6, 0.2, 0.2), metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--out", required=True, help="split manifest (JSON lines)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="fine-tune a backend on the train split", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--annotations", required=True)
    p.add_argument("--split", required=True, help="manifest written by 'eggloc split'")
    p.add_argument("--images-dir", dest="images_dir", help="image root (default: annotation file's directory)")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--label-mode", dest="label_mode", choices=("category", "generic"), default="category")
    p.add_argument("--stub-losses", dest="stub_losses", type=float, nargs="+", help="scripted losses (stub backend)")
    _add_backend_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict boxes for every image in a directory", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--images-dir", dest="images_dir", required=True)
    p.add_argument("--out", required=True, help="predictions file (JSON lines)")
    p.add_argument("--annotations", help="COCO file used to map file names to image ids")
    p.add_argument("--adapter", help="adapter checkpoint to load before inference")
    p.add_argument("--jobs", type=int, default=1)
    _add_backend_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_infer)

    for name, helptext in (("eval", "IoU distribution report for one detector"),
                           ("compare", "compare two detectors on the same ground truth")):
        p = sub.add_parser(name, help=helptext)
        if name == "eval":
            p.add_argument("--predictions", required=True)
            p.add_argument("--name", help="detector name (default: predictions file stem)")
            p.set_defaults(func=cmd_eval)
        else:
            p.add_argument("--pred-a", dest="pred_a", required=True)
            p.add_argument("--pred-b", dest="pred_b", required=True)
            p.add_argument("--name-a", dest="name_a")
            p.add_argument("--name-b", dest="name_b")
            p.set_defaults(func=cmd_compare)
        p.add_argument("--annotations", required=True)
        p.add_argument("--out-dir", dest="out_dir", required=True)
        p.add_argument("--category-aware", dest="category_aware", action="store_true",
                       help="only match predictions to ground truth of the same category")
        p.add_argument("--bins", type=int, default=DEFAULT_BINS)

    p = sub.add_parser("crop", help="cut predicted egg regions out of the source images")
    p.add_argument("--predictions", required=True)
    p.add_argument("--images-dir", dest="images_dir", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--annotations", help="COCO file used to map image ids to file names")
    p.add_argument("--ext", default="png")
    p.set_defaults(func=cmd_crop)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"eggloc {args.command}: error: {exc}", file=sys.stderr)
        return exc.code
    except (EgglocError, FileNotFoundError) as exc:
        print(f"eggloc {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"eggloc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
