"""Command-line entry point: ``gtaseg {run,ablate,eval,gen-data}``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O or
file-format error. Log verbosity comes from ``GTASEG_LOG_LEVEL`` (default INFO).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

from .. import __version__, synthdata, trainer
from ..errors import ConfigError, DataError, FormatError, NumericError, UsageError
from .config import dump_config, load_config, parse_axes
from .persist import load_checkpoint, load_dataset, save_checkpoint, save_dataset

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

METRICS_HEADER = ["epoch", "model", "miou", "loss_l", "loss_u", "lr", "kept_fraction", "mean_weight"]
SUMMARY_HEADER = ["variant", "method", "seeds", "final_miou", "gta_miou", "student_miou", "teacher_miou"]

log = logging.getLogger("gtaseg")


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _seeds(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("--seeds is empty")
    return seeds


def write_metrics(records, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow([r.epoch, r.model, repr(r.miou), repr(r.loss_l), repr(r.loss_u), repr(r.lr),
                        repr(r.kept_fraction), repr(r.mean_weight)])


def write_run_artifacts(report, out_dir: Path) -> dict:
    """metrics.csv, one checkpoint per live model, config.yaml; returns relative paths."""
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = {"metrics": "metrics.csv", "config": "config.yaml", "checkpoints": {}}
    write_metrics(report.records, out_dir / "metrics.csv")
    cfg = trainer.TrainConfig(**{**report.config, "hidden": tuple(report.config["hidden"])})
    (out_dir / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
    for name, params in report.models.live().items():
        fname = f"{name}.gtas"
        save_checkpoint(params, out_dir / fname)
        artifacts["checkpoints"][name] = fname
    return artifacts


def write_manifest(out_dir: Path, command, config, seeds, started, artifacts, summary=None):
    manifest = {
        "tool": "gtaseg",
        "version": __version__,
        "command": command,
        "config": config,
        "seeds": list(seeds),
        "started": started,
        "finished": _now(),
        "artifacts": artifacts,
    }
    if summary is not None:
        manifest["summary"] = summary
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _train_one(job):
    """Worker body: train one (variant, seed) and write its directory."""
    label, cfg, seed, data, out_dir = job
    started = _now()
    rep = trainer.train_run(data, cfg.replace(seed=seed))
    artifacts = write_run_artifacts(rep, out_dir)
    write_manifest(out_dir, "run", rep.config, [seed], started, artifacts, rep.summary)
    rep.models = None  # keep the result small across process boundaries
    return label, seed, rep


# ---------------------------------------------------------------- subcommands


def cmd_run(args) -> int:
    overrides = {"seed": args.seed} if args.seed is not None else None
    cfg = load_config(args.config, overrides)
    seeds = _seeds(args.seeds) if args.seeds else [cfg.seed]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    data = trainer.make_dataset(cfg)
    if len(seeds) == 1:
        rep = trainer.train_run(data, cfg.replace(seed=seeds[0]))
        artifacts = write_run_artifacts(rep, out)
        write_manifest(out, "run", rep.config, seeds, started, artifacts, rep.summary)
        log.info("final %s mIoU %.4f", rep.summary["final_model"], rep.final_miou())
        return EXIT_OK
    artifacts = {}
    for seed in seeds:
        _, _, rep = _train_one((None, cfg, seed, data, out / f"seed_{seed}"))
        artifacts[f"seed_{seed}"] = f"seed_{seed}/manifest.json"
        log.info("seed %d final %s mIoU %.4f", seed, rep.summary["final_model"], rep.final_miou())
    write_manifest(out, "run", cfg.as_dict(), seeds, started, artifacts)
    return EXIT_OK


def _slug(label):
    return re.sub(r"[^A-Za-z0-9.=+-]+", "_", label).strip("_") or "variant"


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    axes = parse_axes(args.axes)
    seeds = _seeds(args.seeds) if args.seeds else [0, 1, 2]
    if args.workers < 1:
        raise ConfigError("--workers must be at least 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()

    # validate every variant before training anything
    variants = []
    for label, overrides in trainer.expand_axes(axes):
        try:
            vcfg = cfg.replace(**overrides)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        trainer.check_applicable(vcfg, [k for k in overrides if k != "method"])
        variants.append((label, vcfg))
    slugs = [_slug(label) for label, _ in variants]
    if len(set(slugs)) != len(slugs):
        raise ConfigError("ablation variants map to clashing directory names")

    data = trainer.make_dataset(cfg)
    jobs = [(label, vcfg, seed, data, out / slug / f"seed_{seed}")
            for (label, vcfg), slug in zip(variants, slugs) for seed in seeds]
    if args.workers == 1:
        results = [_train_one(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_train_one, jobs))
    for label, seed, rep in results:
        log.info("%s seed %d final %.4f", label, seed, rep.final_miou())

    rows = trainer.summarize(results)
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, SUMMARY_HEADER, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if v is None else v) for k, v in row.items()})
    artifacts = {"summary": "summary.csv",
                 "runs": {label: f"{slug}" for (label, _), slug in zip(variants, slugs)}}
    write_manifest(out, "ablate", cfg.as_dict(), seeds, started, artifacts)
    for row in rows:
        print(f"{row['variant']:<32} {row['final_miou']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    if args.data:
        split = load_dataset(args.data)
    else:
        cfg = load_config(args.config) if args.config else trainer.TrainConfig(method="suponly")
        split = trainer.make_dataset(cfg)
    samples = getattr(split, args.split)
    if not samples:
        raise DataError(f"the {args.split} split is empty")
    images, masks = synthdata.stack(samples)
    try:
        from ..segmodel import predict

        report = synthdata.miou(predict(params, images), masks, split.classes)
    except ValueError as exc:  # architecture does not fit the data
        raise ConfigError(f"checkpoint does not fit the dataset: {exc}") from None
    result = {"checkpoint": str(args.checkpoint), "split": args.split, "samples": len(samples),
              "miou": report.miou, "per_class": report.per_class}
    text = json.dumps(result, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    overrides = {"data_seed": args.seed} if args.seed is not None else None
    if args.config:
        cfg = load_config(args.config, overrides)
    else:
        cfg = trainer.TrainConfig(method="suponly", **(overrides or {}))
    split = trainer.make_dataset(cfg.replace(dataset=None))
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(split, out)
    print(f"wrote {out}: {len(split.labeled)} labeled, {len(split.unlabeled)} unlabeled, "
          f"{len(split.heldout)} held-out, K={split.classes}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="gtaseg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"gtaseg {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one configuration")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    g = r.add_mutually_exclusive_group()
    g.add_argument("--seed", type=int)
    g.add_argument("--seeds", help="comma-separated; one sub-directory per seed")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("ablate", help="run an ablation grid over seeds")
    a.add_argument("--config", required=True)
    a.add_argument("--axes", required=True, help="preset name or field=v1,v2;field2=...")
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--workers", type=int, default=1)
    a.set_defaults(func=cmd_ablate)

    e = sub.add_parser("eval", help="score a checkpoint")
    e.add_argument("--checkpoint", required=True)
    src = e.add_mutually_exclusive_group()
    src.add_argument("--data", help="saved dataset file")
    src.add_argument("--config", help="config whose task is regenerated")
    e.add_argument("--split", choices=("heldout", "labeled", "unlabeled"), default="heldout")
    e.add_argument("--out", help="also write the JSON report here")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("gen-data", help="generate and save a dataset split")
    d.add_argument("--out", required=True)
    d.add_argument("--config")
    d.add_argument("--seed", type=int, help="data seed")
    d.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    level = os.environ.get("GTASEG_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
