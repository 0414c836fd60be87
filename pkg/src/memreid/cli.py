"""Command line entry point: ``memreid {gen-data,train,eval,ablate,report}``.

Every subcommand takes ``--config FILE`` (JSON object, see README) and
repeated ``--set key=value`` overrides. Outputs go under ``--out``, which
defaults to ``$MEMREID_OUTPUT_DIR`` or ``./runs``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import pickle
import sys
from dataclasses import fields, replace
from pathlib import Path

from .data import DatasetSpec, DetectionNoise, gen_dataset, load_dataset, save_dataset
from .evalproto import EvalConfig, write_report
from .harness import (PROFILES, Checkpoint, TrainConfig, TrainingAborted, evaluate_checkpoint,
                      record_to_dict, report, run_ablation, save_record, train)

log = logging.getLogger("memreid")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5

SECTIONS = {"dataset": DatasetSpec, "train": TrainConfig, "detection": DetectionNoise, "eval": EvalConfig}


class ConfigError(ValueError):
    pass


def _coerce(value: str):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def load_config(path, overrides) -> dict:
    """Merge the JSON config file with ``section.key=value`` overrides."""
    cfg = {name: {} for name in SECTIONS}
    cfg["profile"] = "desk"
    if path:
        doc = json.loads(Path(path).read_text())
        for key, val in doc.items():
            if key == "profile":
                cfg["profile"] = val
            elif key in SECTIONS:
                cfg[key].update(val)
            else:
                raise ConfigError(f"unknown config section {key!r}")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, val = item.split("=", 1)
        if key == "profile":
            cfg["profile"] = val
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"override {key!r} must look like section.field")
        cfg[section][name] = _coerce(val)
    return cfg


def _build(section: str, values: dict, base=None):
    cls = SECTIONS[section]
    known = {f.name for f in fields(cls)}
    bad = set(values) - known
    if bad:
        raise ConfigError(f"unknown {section} keys: {sorted(bad)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return replace(base, **values) if base is not None else cls(**values)


def train_config(cfg) -> TrainConfig:
    if cfg["profile"] not in PROFILES:
        raise ConfigError(f"unknown profile {cfg['profile']!r}; choose from {sorted(PROFILES)}")
    return _build("train", cfg["train"], PROFILES[cfg["profile"]])


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get("MEMREID_OUTPUT_DIR", "runs"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(args, cfg):
    if args.data:
        return load_dataset(args.data)
    return gen_dataset(_build("dataset", cfg["dataset"]))


def cmd_gen_data(args, cfg):
    ds = gen_dataset(_build("dataset", cfg["dataset"]))
    path = save_dataset(ds, _out_dir(args) / "dataset")
    print(f"wrote {len(ds.train)} train, {len(ds.gallery)} gallery, {len(ds.queries)} query scenes -> {path.parent}")


def cmd_train(args, cfg):
    out = _out_dir(args)
    config = train_config(cfg)
    ds = _dataset(args, cfg)
    try:
        ckpt, record = train(config, ds, log_every=args.log_every)
    except TrainingAborted as exc:
        save_record(exc.record, out / "record.json")
        raise
    ckpt.save(out / "checkpoint.npz")
    save_record(record, out / "record.json")
    print(f"trained {ckpt.iteration} iterations in {record.wall_time:.1f}s -> {out / 'checkpoint.npz'}")


def cmd_eval(args, cfg):
    out = _out_dir(args)
    ckpt = Checkpoint.load(args.checkpoint)
    ds = _dataset(args, cfg)
    reports = evaluate_checkpoint(ckpt, ds, _build("detection", cfg["detection"]),
                                  _build("eval", cfg["eval"]), use_average=args.use_average)
    rows = [reports["full"]] + reports.get("sweep", [])
    path = write_report(rows, out / "eval.csv")
    full = reports["full"]
    print(f"mAP {100 * full.mAP:.2f}  " + "  ".join(f"CMC@{k} {100 * v:.2f}" for k, v in full.cmc.items()))
    for rep in reports.get("sweep", []):
        print(f"  gallery {rep.gallery_size:>5}: mAP {100 * rep.mAP:.2f}")
    print(f"-> {path}")


def cmd_ablate(args, cfg):
    out = _out_dir(args)
    grid = json.loads(args.grid)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = run_ablation(grid, train_config(cfg), _dataset(args, cfg), seeds,
                        _build("detection", cfg["detection"]), _build("eval", cfg["eval"]),
                        n_jobs=args.jobs)
    with (out / "ablation.pkl").open("wb") as fh:
        pickle.dump(rows, fh)
    (out / "records.json").write_text(json.dumps(
        [{"key": r.key, "error": r.error, "record": record_to_dict(r.record) if r.record else None}
         for r in rows], indent=1))
    paths = report(rows, out)
    print((paths["summary"]).read_text(), end="")
    failed = [r for r in rows if r.error]
    if failed:
        log.warning("%d of %d cells failed", len(failed), len(rows))


def cmd_report(args, cfg):
    with Path(args.ablation).open("rb") as fh:
        rows = pickle.load(fh)
    paths = report(rows, _out_dir(args))
    print(paths["summary"].read_text(), end="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memreid", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("--out", help="output directory (default $MEMREID_OUTPUT_DIR or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate and save a synthetic dataset")

    p = sub.add_parser("train", parents=[common], help="train an encoder")
    p.add_argument("--data", help="dataset directory (default: generate from config)")
    p.add_argument("--log-every", type=int, default=0)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data")
    p.add_argument("--use-average", action="store_true", help="evaluate the averaged parameters")

    p = sub.add_parser("ablate", parents=[common], help="run an ablation grid")
    p.add_argument("--grid", required=True, help='JSON, e.g. \'{"U": [0, 256], "m": [0, 0.999]}\'')
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--data")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("report", parents=[common], help="rebuild tables from an ablation run")
    p.add_argument("ablation", help="ablation.pkl written by 'ablate'")
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        COMMANDS[args.command](args, cfg)
    except (ConfigError, json.JSONDecodeError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, PermissionError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
