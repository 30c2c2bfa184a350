"""Command line: ``rdfabric train|eval|infer|bench|accept``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

from .config import ConfigError, RunConfig, load_config, write_resolved
from .data import (IMAGE_EXTENSIONS, DatasetError, build_dg_corpus, extract_patches, read_image,
                   scan_mvtec_layout)
from .metrics import benchmark_throughput, write_aggregate_csv
from .model import DOMAIN_GENERALIZED
from .pipeline import evaluate_records, train_from_records
from .scoring import Scorer, export_heatmap, image_score, score_whole_image
from .trainer import CheckpointError, TrainingError, load_checkpoint, load_teacher_for

LOGGER = logging.getLogger("rdfabric")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_EVAL = 4
EXIT_IMAGE = 5


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _overrides(args) -> dict:
    """Map explicit command-line flags onto ``section.key`` config entries."""
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}", item)
        key, value = item.split("=", 1)
        out[key.strip()] = value
    flag_map = {"root": "data.root", "classes": "data.classes", "mode": "model.mode",
                "epochs": "train.epochs", "seed": "train.seed", "device": "train.device",
                "weights": "teacher.weights", "out": "output.dir"}
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = str(value)
    if getattr(args, "overwrite", False):
        out["output.overwrite"] = "true"
    return out


def _prepare_output(directory: Path, overwrite: bool, produced=()) -> Path:
    """Refuse to clobber existing results unless ``overwrite`` is set."""
    clashes = [directory / p for p in produced if (directory / p).exists()]
    if clashes and not overwrite:
        raise CommandError(f"{clashes[0]} exists; pass --overwrite to replace it", EXIT_CONFIG)
    for path in clashes:
        shutil.rmtree(path) if path.is_dir() else path.unlink()
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def _class_records(cfg: RunConfig, name: str):
    return scan_mvtec_layout(cfg.data.root, name, cfg.data.mask_suffix)


def _require_classes(cfg: RunConfig):
    if not cfg.data.classes:
        raise ConfigError("no classes configured (data.classes)", "data.classes")
    return list(cfg.data.classes)


# --- train ---------------------------------------------------------------------

def cmd_train(cfg: RunConfig, args) -> int:
    classes = _require_classes(cfg)
    out = Path(cfg.output.dir)
    dg = cfg.model.mode == DOMAIN_GENERALIZED
    groups = {"pooled": classes} if dg else {c: [c] for c in classes}
    _prepare_output(out, cfg.output.overwrite, list(groups) + ["resolved_config.ini"])
    write_resolved(cfg, out)
    for group, members in groups.items():
        if dg:
            records = build_dg_corpus([(cfg.data.root, c) for c in members], cfg.data.mask_suffix)
        else:
            records = _class_records(cfg, group)
        LOGGER.info("training %s on %d images", group, sum(r.split == "train" for r in records))
        record = train_from_records(records, cfg.model_config(), cfg.backbone(),
                                    cfg.train_config(), cfg.loss_weights(), cfg.split_config(),
                                    out / group)
        LOGGER.info("%s: best epoch %d, val loss %.5f", group, record.epoch, record.val_loss)
    return EXIT_OK


# --- eval ----------------------------------------------------------------------

def _resolve_checkpoint(path: Path, class_name: str) -> Path:
    """A file is used as is; a training output directory maps to its per-class
    checkpoint, or to the pooled one."""
    if path.is_file():
        return path
    for candidate in (path / class_name / "checkpoint.pt", path / "pooled" / "checkpoint.pt"):
        if candidate.is_file():
            return candidate
    raise CheckpointError(f"no checkpoint for {class_name} under {path}")


def _scorer_for(ckpt_path: Path, cfg: RunConfig, cache: dict) -> Scorer:
    if ckpt_path not in cache:
        record = load_checkpoint(ckpt_path)
        cache[ckpt_path] = Scorer(load_teacher_for(record), record.build_model(),
                                  sigma=cfg.model.sigma, device=cfg.train.device)
    return cache[ckpt_path]


def cmd_eval(cfg: RunConfig, args) -> int:
    classes = _require_classes(cfg)
    out = Path(cfg.output.dir) / "eval"
    produced = [f"{c}.json" for c in classes] + ["aggregate.csv", "resolved_config.ini"]
    produced += [f"{c}_scores.csv" for c in classes] if cfg.eval.scores_csv else []
    _prepare_output(out, cfg.output.overwrite, produced)
    write_resolved(cfg, out)
    cache, reports = {}, []
    for name in classes:
        records = _class_records(cfg, name)
        scorer = _scorer_for(_resolve_checkpoint(Path(args.checkpoint), name), cfg, cache)
        try:
            report, scored = evaluate_records(scorer, records, name, pixel=cfg.eval.pixel,
                                              coverage=cfg.eval.coverage,
                                              batch_size=cfg.eval.batch_size)
        except ValueError as exc:
            raise CommandError(str(exc), EXIT_EVAL) from exc
        report.to_json(out / f"{name}.json")
        reports.append(report)
        LOGGER.info("%s: image AUROC %.4f", name, report.image_auroc)
        if cfg.eval.scores_csv:
            with open(out / f"{name}_scores.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["image", "label", "score"])
                for rec, score in zip(scored.records, scored.scores):
                    w.writerow([rec.image_path, int(rec.is_defective), float(score)])
    write_aggregate_csv(reports, out / "aggregate.csv")
    return EXIT_OK


# --- infer ---------------------------------------------------------------------

def _input_images(path: Path):
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise CommandError(f"no images in {path}", EXIT_IMAGE)
        return files
    if not path.exists():
        raise CommandError(f"input not found: {path}", EXIT_IMAGE)
    return [path]


def cmd_infer(cfg: RunConfig, args) -> int:
    record = load_checkpoint(args.checkpoint)
    scorer = Scorer(load_teacher_for(record), record.build_model(), sigma=cfg.model.sigma,
                    device=cfg.train.device)
    files = _input_images(Path(args.input))
    out = Path(cfg.output.dir) / "infer"
    produced = [f"{p.stem}{ext}" for p in files for ext in (".png", ".npy", ".json")]
    _prepare_output(out, cfg.output.overwrite, produced)
    size = scorer.input_size
    patch = cfg.eval.patch_size
    if patch != size:
        raise ConfigError(f"eval.patch_size {patch} must equal the model input size {size}",
                          "eval.patch_size")
    for path in files:
        try:
            image = read_image(path)
        except DatasetError as exc:
            raise CommandError(str(exc), EXIT_IMAGE) from exc
        h, w = image.shape[:2]
        if h < patch or w < patch:
            raise CommandError(f"{path} is {w}x{h}, smaller than the {patch} patch", EXIT_IMAGE)
        extra = {"image": str(path), "width": w, "height": h}
        if (h, w) == (size, size):
            amap = scorer.score_raw([image])[0].map
        else:
            grid = extract_patches(w, h, patch)
            result = score_whole_image(image, grid, scorer, batch_size=cfg.eval.batch_size)
            amap = result.stitched
            extra.update(patch_scores=result.patch_scores, patch_offsets=list(grid.offsets),
                         argmax_patch=result.argmax_patch)
        export_heatmap(amap, out / path.stem, extra)
        LOGGER.info("%s: score %.5f", path.name, image_score(amap).score)
    return EXIT_OK


# --- bench ---------------------------------------------------------------------

def cmd_bench(cfg: RunConfig, args) -> int:
    record = load_checkpoint(args.checkpoint)
    scorer = Scorer(load_teacher_for(record), record.build_model(), sigma=cfg.model.sigma,
                    device=cfg.train.device)
    out = Path(cfg.output.dir)
    _prepare_output(out, cfg.output.overwrite, ["bench.json"])
    batches = args.batch or list(cfg.eval.bench_batches)
    n_patches = args.patches or cfg.eval.bench_patches
    reports = [benchmark_throughput(scorer, n_patches=n_patches, batch_size=b,
                                    warmup_batches=cfg.eval.warmup_batches,
                                    lock_path=str(out / ".bench.lock"))
               for b in batches]
    (out / "bench.json").write_text(json.dumps([asdict(r) for r in reports], indent=2))
    for r in reports:
        LOGGER.info("batch %d: %.2f ms/patch, %d batches, %s", r.batch_size, r.ms_per_patch,
                    r.n_batches, r.hardware)
    return EXIT_OK


# --- accept --------------------------------------------------------------------

def cmd_accept(cfg: RunConfig, args) -> int:
    from .acceptance import builtin_scenarios, load_scenario, run_scenario

    names = builtin_scenarios() if args.scenario == "all" else [args.scenario]
    try:
        scenarios = [load_scenario(n) for n in names]
    except ValueError as exc:
        raise ConfigError(str(exc), "scenario") from exc
    out = Path(cfg.output.dir) / "accept"
    _prepare_output(out, cfg.output.overwrite, [s.name for s in scenarios])
    ok = True
    for scenario in scenarios:
        report = run_scenario(scenario, out / scenario.name)
        for line in report.lines():
            print(line)
        ok &= report.passed
    return EXIT_OK if ok else 1


# --- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdfabric",
                                     description="Residual reverse distillation for texture anomaly detection")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--out", help="output directory (output.dir)")
        p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
        p.add_argument("--device", help="torch device (train.device)")
        p.add_argument("--weights", help="teacher weights: auto, imagenet, random or a path")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = common(sub.add_parser("train", help="train one model per class, or one pooled model"))
    p.add_argument("--root", help="dataset root (data.root)")
    p.add_argument("--classes", help="comma-separated class names (data.classes)")
    p.add_argument("--mode", choices=["standard", DOMAIN_GENERALIZED])
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)

    p = common(sub.add_parser("eval", help="image/pixel AUROC and coverage on test splits"))
    p.add_argument("--checkpoint", required=True, help="checkpoint file or training output dir")
    p.add_argument("--root", help="dataset root (data.root)")
    p.add_argument("--classes", help="comma-separated class names (data.classes)")
    p.add_argument("--pixel", action="store_true", help="also compute pixel AUROC")
    p.add_argument("--coverage", action="store_true", help="also compute the coverage triple")
    p.add_argument("--scores-csv", action="store_true", help="write per-image scores")

    p = common(sub.add_parser("infer", help="score images or a folder and export heatmaps"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or folder")

    p = common(sub.add_parser("bench", help="patch throughput benchmark"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch", type=int, action="append", help="batch size (repeatable)")
    p.add_argument("--patches", type=int, help="patches per whole image")

    p = common(sub.add_parser("accept", help="run synthetic acceptance scenarios"))
    p.add_argument("--scenario", default="all", help="scenario name, .ini path, or 'all'")
    return parser


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "bench": cmd_bench,
            "accept": cmd_accept}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _overrides(args)
        for flag in ("pixel", "coverage", "scores_csv"):
            if getattr(args, flag, False):
                overrides[f"eval.{flag}"] = "true"
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        LOGGER.error("config error%s: %s", f" ({exc.key})" if exc.key else "", exc)
        return EXIT_CONFIG
    except DatasetError as exc:
        LOGGER.error("dataset error: %s", exc)
        return EXIT_DATASET
    except CommandError as exc:
        LOGGER.error("%s", exc)
        return exc.code
    except (CheckpointError, TrainingError) as exc:
        LOGGER.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
