"""Command-line entry point.

Every subcommand resolves an :class:`ExperimentConfig` (file plus ``--seed``
/ ``--out`` overrides), writes it to ``config.yaml`` in the output directory,
then writes its CSV / JSON artifacts next to it. Exit codes: 0 success,
1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import _seeding as S
from .config import ExperimentConfig
from .evaluate import csv_table, iou_histogram
from .experiment import (
    LADDER,
    MODEL_NAMES,
    build_world,
    make_scenes,
    rpn_for_scene,
    run_experiment,
    run_nms_compare,
    train_models,
    uniform_for_scene,
)
from .rpn_sim import RPN_BIN_EDGES, cls_scores, scene_record, write_scenes_jsonl
from .sampler import SampleBatch
from .toyhead import HeadModel

log = logging.getLogger("iou_uniform")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def _resolve(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, output_dir=str(args.out))
    return cfg


def _prepare_out(cfg: ExperimentConfig, overwrite: bool) -> Path:
    out = Path(cfg.output_dir)
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not overwrite:
        raise UsageError(f"output directory {out} is not empty (pass --overwrite to replace its files)")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml(), encoding="utf-8")
    return out


def _write(out: Path, name: str, text: str) -> None:
    path = out / name
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _write_tables(out: Path, tables: dict[str, str]) -> None:
    for name, text in sorted(tables.items()):
        _write(out, name, text)


def _write_models(out: Path, models: dict[str, HeadModel]) -> None:
    for name, m in sorted(models.items()):
        _write(out, f"models/{name}.json", m.to_json())


def _load_models(directory, names) -> dict[str, HeadModel]:
    models = {}
    for name in names:
        path = Path(directory) / f"{name}.json"
        if not path.is_file():
            raise FileNotFoundError(f"missing model file: {path}")
        models[name] = HeadModel.load(path)
    return models


def _rows(text: str | None) -> tuple[str, ...]:
    if not text:
        return LADDER
    rows = tuple(r.strip() for r in text.split(",") if r.strip())
    bad = [r for r in rows if r not in LADDER]
    if bad or not rows:
        raise UsageError(f"--rows must be a comma list drawn from {', '.join(LADDER)}; got {text!r}")
    # keep ladder order
    return tuple(r for r in LADDER if r in rows)


def _summary(res) -> str:
    doc = {
        "seed": res.seed,
        "ladder_mean_ap": res.ladder,
        "high_iou_post_refinement": res.high_iou_post,
        "iou_predictor_mae_high": res.iou_mae_high,
        "correlation": {m: {"pearson_r": r, "mae": e} for m, (r, e) in res.corr.items()},
        "recall": res.recall,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _detections_jsonl(kept: dict[str, list]) -> str:
    lines = []
    for row, dets in kept.items():
        for d in dets:
            lines.append(json.dumps({"row": row, **d.to_dict()}, separators=(",", ":")))
    return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: ExperimentConfig, args) -> None:
    out = _prepare_out(cfg, args.overwrite)
    n = cfg.scenes.train
    if n == 0:
        log.warning("scene count is 0; writing empty outputs")
    scenes = make_scenes(cfg, n, S.SCENES_TRAIN, args.jobs)
    records, positives = [], []
    for scene in scenes:
        props = rpn_for_scene((cfg, cfg.rpn, scene, S.RPN_TRAIN))
        allp = props.all()
        scores = cls_scores(allp.iou, cfg.rpn, S.derive_rng(cfg.seed, S.RPN_TRAIN, 10_000 + scene.scene_id))
        records.append(scene_record(scene, allp, scores))
        positives.append(props.positives.iou)
    write_scenes_jsonl(out / "scenes.jsonl", records)
    if n == 0:
        _write(out, "fig1a_rpn_histogram.csv", csv_table(["bin_lo", "bin_hi", "count"], []))
        return
    hist = iou_histogram(np.concatenate(positives), RPN_BIN_EDGES)
    _write(out, "fig1a_rpn_histogram.csv", csv_table(
        ["bin_lo", "bin_hi", "count"],
        [(RPN_BIN_EDGES[k], RPN_BIN_EDGES[k + 1], int(c)) for k, c in enumerate(hist)],
    ))


def cmd_sample(cfg: ExperimentConfig, args) -> None:
    out = _prepare_out(cfg, args.overwrite)
    scenes = make_scenes(cfg, cfg.scenes.train, S.SCENES_TRAIN, args.jobs)
    if not scenes:
        log.warning("scene count is 0; writing empty outputs")
    parts = [uniform_for_scene((cfg, s, S.UNIFORM)) for s in scenes]
    batch = SampleBatch.concat([p for p, _ in parts])
    lines = []
    for i in range(len(batch)):
        lines.append(json.dumps({
            "scene_id": int(batch.scene_index[i]),
            "gt_index": int(batch.gt_index[i]),
            "box": [float(v) for v in batch.boxes[i]],
            "iou": float(batch.iou[i]),
            "interval": int(batch.interval[i]),
        }, separators=(",", ":")))
    _write(out, "samples.jsonl", "".join(line + "\n" for line in lines))
    b = cfg.sampler.intervals.boundaries
    hist = iou_histogram(batch.iou, b)
    _write(out, "sample_histogram.csv", csv_table(
        ["iou_lo", "iou_hi", "count"], [(b[j], b[j + 1], int(c)) for j, c in enumerate(hist)]
    ))
    shortfalls = sum(n for _, n in parts)
    if shortfalls:
        log.warning("%d (GT, interval) cells fell short of their quota", shortfalls)


def cmd_train(cfg: ExperimentConfig, args) -> None:
    out = _prepare_out(cfg, args.overwrite)
    world = build_world(cfg, args.jobs)
    trained = train_models(cfg, world, MODEL_NAMES, args.jobs)
    _write_models(out, {k: v.model for k, v in trained.items()})
    _write(out, "training_trace.csv", csv_table(
        ["model", "epoch", "loss"],
        [(k, i, float(x)) for k, v in trained.items() for i, x in enumerate(v.trace)],
    ))


def _run_full(cfg, args, models) -> None:
    rows = _rows(args.rows)
    out = _prepare_out(cfg, args.overwrite)
    res = run_experiment(cfg, rows=rows, jobs=args.jobs, models=models)
    _write_tables(out, res.tables)
    if models is None:
        _write_models(out, res.models)
    _write(out, "summary.json", _summary(res))
    _write(out, "detections.jsonl", _detections_jsonl(res.kept))
    for row in rows:
        log.info("%-10s mean AP %.4f", row, res.ladder[row])


def cmd_eval(cfg: ExperimentConfig, args) -> None:
    if not args.models:
        raise UsageError("eval needs --models DIR holding trained model files")
    _run_full(cfg, args, _load_models(args.models, MODEL_NAMES))


def cmd_reproduce(cfg: ExperimentConfig, args) -> None:
    models = _load_models(args.models, MODEL_NAMES) if args.models else None
    _run_full(cfg, args, models)


def cmd_nms_compare(cfg: ExperimentConfig, args) -> None:
    models = _load_models(args.models, ("reg_weighted", "iou_uniform")) if args.models else None
    out = _prepare_out(cfg, args.overwrite)
    res = run_nms_compare(cfg, models, args.jobs)
    _write_tables(out, res.tables)


COMMANDS = {
    "simulate": (cmd_simulate, "simulate scenes and RPN-style proposals"),
    "sample": (cmd_sample, "generate IoU-uniform training samples"),
    "train": (cmd_train, "train the regressor and IoU heads"),
    "eval": (cmd_eval, "evaluate saved models: ablation ladder and figure tables"),
    "nms-compare": (cmd_nms_compare, "recall curves for cls / fused one-pass / fused two-pass NMS"),
    "reproduce": (cmd_reproduce, "train and evaluate everything end to end"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iou-uniform", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
        p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        p.add_argument("--overwrite", action="store_true",
                       help="allow writing into a non-empty output directory")
        if name in ("eval", "reproduce"):
            p.add_argument("--rows", help=f"comma list of ladder rows ({','.join(LADDER)})")
        if name in ("eval", "reproduce", "nms-compare"):
            p.add_argument("--models", type=Path, help="directory of saved model JSON files")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    fn, _ = COMMANDS[args.command]
    try:
        cfg = _resolve(args)
        fn(cfg, args)
    except UsageError as exc:
        print(f"iou-uniform: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"iou-uniform: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
