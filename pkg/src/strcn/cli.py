"""Command-line front end.

Every subcommand resolves one run configuration (defaults, then ``--config``,
then ``--set key=value`` and ``--seed``) and works inside the output
directory. Stage artifacts live in content-addressed subdirectories named
``<stage>-<hash>``, where the hash covers only the configuration sections the
stage depends on, so a sweep over a model setting reuses one set of aligned,
magnified and encoded clips.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
failure (including a missing upstream stage).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import ConfigError, RunConfig, load_config, parse_assignments
from .dataset import SyntheticSpec, generate_synthetic_dataset, load_dataset, load_manifest, read_report, write_dataset, write_report
from .evaluation import MetricsReport, evaluate, split_loso, split_lovo, sweep, sweep_key
from .pipeline import ArtifactStore, Pipeline
from .training import write_loss_curve

log = logging.getLogger("strcn")

STAGES = ("preprocess", "magnify", "encode")
# configuration keys (or whole sections) each stage depends on, cumulatively
_STAGE_KEYS = {
    "preprocess": ["variant", "data.manifest", "data.fps", "crop"],
    "magnify": ["magnify"],
    "encode": ["flow", "augment"],
}


class StageMissing(RuntimeError):
    pass


def stage_keys(stage: str) -> List[str]:
    keys: List[str] = []
    for s in STAGES:
        keys += _STAGE_KEYS[s]
        if s == stage:
            return keys
    raise KeyError(stage)


def stage_dir(cfg: RunConfig, stage: str) -> Path:
    keys = stage_keys(stage) if stage in STAGES else None
    return cfg.output_dir() / f"{stage}-{cfg.hash(keys)}"


def _stage_done(cfg: RunConfig, stage: str) -> bool:
    return (stage_dir(cfg, stage) / "stage.json").is_file()


def _mark_done(cfg: RunConfig, stage: str, **info) -> Path:
    d = stage_dir(cfg, stage)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.cfg").write_text(cfg.dumps())
    payload = {"stage": stage, "config_hash": cfg.hash(), **info}
    (d / "stage.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return d


def _require(cfg: RunConfig, stage: str, by: str) -> None:
    if not _stage_done(cfg, stage):
        raise StageMissing(
            f"{by}: missing upstream stage '{stage}' (expected {stage_dir(cfg, stage)}); "
            f"run `strcn {stage}` with the same configuration first"
        )


def _stores(cfg: RunConfig) -> Dict[str, ArtifactStore]:
    return {s: ArtifactStore(stage_dir(cfg, s) / "items") for s in STAGES}


def _load_data(cfg: RunConfig):
    if not cfg.data.manifest:
        raise ConfigError("data.manifest: no dataset manifest configured (run `strcn synth` or set it)")
    path = Path(cfg.data.manifest)
    if not path.is_file():
        raise ConfigError(f"data.manifest: file not found: {path}")
    manifest = load_manifest(path)
    sequences, tracks = load_dataset(manifest, cfg.data.fps)
    return manifest, sequences, tracks


def _pipeline(cfg: RunConfig, keep_models: bool = False):
    manifest, sequences, tracks = _load_data(cfg)
    pl = Pipeline(sequences, tracks, cfg, _stores(cfg), n_classes=manifest.n_classes,
                  keep_models=keep_models)
    return manifest, pl


# subcommands ------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args) -> int:
    spec = SyntheticSpec(args.subjects, args.per_subject, args.frames, args.size, args.size,
                         args.classes, args.motion, args.dataset_seed, cfg.data.fps)
    dest = Path(args.dest) if args.dest else cfg.output_dir() / "synthetic"
    manifest, sequences, tracks = generate_synthetic_dataset(spec)
    path = write_dataset(dest, manifest, sequences, tracks)
    print(f"wrote {len(sequences)} sequences to {path}")
    print(f"use: --set data.manifest={path}")
    return 0


def cmd_preprocess(cfg: RunConfig, args) -> int:
    _, pl = _pipeline(cfg)
    for i in range(len(pl)):
        pl.aligned(i)
    d = _mark_done(cfg, "preprocess", sequences=len(pl))
    print(f"preprocess: {len(pl)} sequences aligned -> {d}")
    return 0


def cmd_magnify(cfg: RunConfig, args) -> int:
    _require(cfg, "preprocess", "magnify")
    _, pl = _pipeline(cfg)
    for i in range(len(pl)):
        pl.magnified(i)
    d = _mark_done(cfg, "magnify", sequences=len(pl), alpha=pl.test_alpha)
    print(f"magnify: {len(pl)} sequences magnified -> {d}")
    return 0


def cmd_encode(cfg: RunConfig, args) -> int:
    _require(cfg, "magnify", "encode")
    _, pl = _pipeline(cfg)
    pl.prepare()
    d = _mark_done(cfg, "encode", sequences=len(pl), variant=cfg.variant)
    print(f"encode: {len(pl)} sequences encoded for STRCN-{cfg.variant} -> {d}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    _require(cfg, "encode", "train")
    _, pl = _pipeline(cfg)
    d = stage_dir(cfg, "train")
    d.mkdir(parents=True, exist_ok=True)
    net, data, res = pl.fit(np.arange(len(pl)))
    net.save(d / "model.npz")
    write_loss_curve(res, d / "loss.csv")
    stats = {k: v for k, v in data.stats.items() if k != "mask"}
    _mark_done(cfg, "train", epochs=res.epochs, final_loss=res.losses[-1], converged=res.converged,
               model=net.cfg.to_dict(), **{k: float(v) for k, v in stats.items()})
    print(f"train: {res.epochs} epochs, final loss {res.losses[-1]:.6f} -> {d}")
    return 0


def _plan(cfg: RunConfig, manifest, n: int):
    if cfg.protocol.name == "loso":
        plan = split_loso(manifest)
    else:
        plan = split_lovo(n, cfg.protocol.test_fraction, cfg.seed, cfg.protocol.literal_lovo)
    plan.validate(manifest.subjects)
    return plan


def run_eval(cfg: RunConfig, jobs: int = 1, write: bool = True) -> MetricsReport:
    _require(cfg, "encode", "eval")
    manifest, pl = _pipeline(cfg)
    plan = _plan(cfg, manifest, len(pl))
    report = evaluate(plan, pl.labels, pl.fit_predict, manifest.n_classes, cfg.hash(), jobs=jobs)
    if write:
        d = stage_dir(cfg, "eval")
        d.mkdir(parents=True, exist_ok=True)
        write_report(report, d / "report.json")
        report.write_fold_csv(d / "folds.csv")
        _mark_done(cfg, "eval", protocol=plan.protocol, folds=len(plan))
    return report


def cmd_eval(cfg: RunConfig, args) -> int:
    report = run_eval(cfg, args.jobs)
    d = stage_dir(cfg, "eval")
    print(_summary(report.to_dict()))
    print(f"report -> {d / 'report.json'}")
    return 0 if not report.failed_folds else 2


def _parse_values(text: str) -> List[str]:
    values = [v.strip() for v in text.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values: at least one value is required")
    return values


def cmd_sweep(cfg: RunConfig, args) -> int:
    values = _parse_values(args.values)
    key = sweep_key(args.param)
    for v in values:  # validate every point before any work starts
        cfg.with_overrides({key: v})

    def run(k, v):
        point = cfg.with_overrides({k: v})
        for stage in STAGES:
            if not _stage_done(point, stage):
                {"preprocess": cmd_preprocess, "magnify": cmd_magnify, "encode": cmd_encode}[stage](point, args)
        return run_eval(point, args.jobs)

    out = cfg.output_dir() / f"sweep-{args.param}-{cfg.hash()}.csv"
    rows = sweep(args.param, values, run, out)
    for v, rep in rows:
        print(f"{args.param}={v}: accuracy {rep.accuracy:.4f} f1 {rep.f1:.4f}")
    print(f"sweep -> {out}")
    return 0


def _summary(d: Dict) -> str:
    lines = [
        f"protocol {d['protocol']}  folds {len(d['folds'])}  failed {len(d.get('failed_folds', []))}",
        f"accuracy {d['accuracy']:.4f}  precision {d.get('precision', float('nan')):.4f}  "
        f"recall {d.get('recall', float('nan')):.4f}  f1 {d['f1']:.4f}",
        "confusion (rows true, columns predicted):",
    ]
    lines += ["  " + " ".join(f"{v:4d}" for v in row) for row in d["confusion_matrix"]]
    lines.append(f"config {d.get('config_hash', '')}")
    return "\n".join(lines)


def cmd_report(cfg: RunConfig, args) -> int:
    path = Path(args.report) if args.report else stage_dir(cfg, "eval") / "report.json"
    if not path.is_file():
        raise StageMissing(f"report: missing upstream stage 'eval' (no report at {path})")
    print(_summary(read_report(path)))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "magnify": cmd_magnify,
    "encode": cmd_encode,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--seed", type=int, help="global seed (same as --set seed=N)")
    common.add_argument("--out", help="output directory (same as --set data.output_dir=DIR)")
    common.add_argument("--jobs", type=int, default=1, help="folds evaluated in parallel")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="strcn", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    p = sub.add_parser("synth", parents=[common], help="generate the synthetic dataset")
    p.add_argument("--dest", help="dataset directory (default: <out>/synthetic)")
    p.add_argument("--subjects", type=int, default=6)
    p.add_argument("--per-subject", type=int, default=10)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--motion", type=float, default=2.0)
    p.add_argument("--dataset-seed", type=int, default=0)
    sub.add_parser("preprocess", parents=[common], help="crop and align every sequence")
    sub.add_parser("magnify", parents=[common], help="motion-magnify the aligned clips")
    sub.add_parser("encode", parents=[common], help="compute fold-independent encodings")
    sub.add_parser("train", parents=[common], help="train one network on the whole dataset")
    sub.add_parser("eval", parents=[common], help="cross-validate and write the report")
    p = sub.add_parser("sweep", parents=[common], help="evaluate once per parameter value")
    p.add_argument("--param", required=True, help="p, M, rcl_depth, rcl_count or any config key")
    p.add_argument("--values", required=True, help="comma-separated values")
    p = sub.add_parser("report", parents=[common], help="print the summary of an evaluation report")
    p.add_argument("report", nargs="?", help="report.json (default: the one for this configuration)")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = parse_assignments(args.overrides)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["data.output_dir"] = args.out
    if args.jobs < 1:
        raise ConfigError("--jobs: must be >= 1")
    return load_config(args.config, overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits with 2 on usage errors; usage is a validation error
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 -- reported as a runtime failure
        print(f"error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
