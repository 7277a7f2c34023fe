"""Command-line pipeline: build, label, train, finetune, eval, report.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import __version__
from .audio_io import AudioError
from .dataeval.build import VAL_FRACTION, DatasetError, build_dataset
from .dataeval.evaluate import AggregationError, EvalReport, aggregate_runs, evaluate, render_table
from .dataeval.manifest import ManifestError, read_manifest, write_manifest
from .models import ModelConfig, ModelConfigError, build_model
from .rater import (
    DEFAULT_TOKEN_ENV, LLM_REMOTE, ORACLE, ORACLE_VARIANTS, LabelingError, RaterConfig,
    RaterConfigError, label_manifest,
)
from .synth import write_clean_corpus
from .training import Checkpoint, ModelKindMismatch, TrainConfig, TrainConfigError, finetune, train

log = logging.getLogger("pseudomos")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

DEFAULTS = {
    "dataset": {"clean_dir": None, "out": None, "n": 1000, "seed": 0,
                "val_fraction": VAL_FRACTION, "noise_dir": None, "workers": 1},
    "rater": {"kind": "oracle", "endpoint": None, "token_env": DEFAULT_TOKEN_ENV,
              "timeout_s": 60.0, "max_retries": 3, "concurrency": 4, "oracle_variant": "default"},
    "model": {"model_kind": "dnsmos_pro", "widths": None, "dropout_rate": 0.3,
              "head_hidden": 64, "lstm_hidden": 128},
    "train": {"lr": 1e-4, "batch_size": 64, "epochs": None, "seed": 0, "crop_frames": 624,
              "runs": 1},
    "eval": {"tests": {}},
}


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    """Read a JSON run config; unknown sections or keys are rejected."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for section, values in doc.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        unknown = set(values) - set(DEFAULTS[section])
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return doc


def resolve(args) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = {s: dict(v) for s, v in DEFAULTS.items()}
    if getattr(args, "config", None):
        for section, values in load_config(args.config).items():
            cfg[section].update(values)
    for dest, value in vars(args).items():
        if "__" in dest and value is not None:
            section, key = dest.split("__", 1)
            cfg[section][key] = value
    return cfg


def _opt(p, flag, section, key, help, **kw):
    default = DEFAULTS[section][key]
    shown = "" if default is None or default == {} else f" (default: {default})"
    p.add_argument(flag, dest=f"{section}__{key}", default=None, help=help + shown, **kw)


def _widths(text):
    return tuple(int(w) for w in text.split(","))


def _add_model_opts(p):
    _opt(p, "--model-kind", "model", "model_kind", "architecture", choices=["dnsmos_pro", "deepmos"])
    _opt(p, "--widths", "model", "widths", "comma-separated conv channel widths "
         "(default: the full-size architecture)", type=_widths)
    _opt(p, "--dropout-rate", "model", "dropout_rate", "dropout rate", type=float)
    _opt(p, "--head-hidden", "model", "head_hidden", "DNSMOS Pro head width", type=int)
    _opt(p, "--lstm-hidden", "model", "lstm_hidden", "DeePMOS BiLSTM hidden size", type=int)


def _add_train_opts(p, epochs_help):
    _opt(p, "--lr", "train", "lr", "Adam learning rate", type=float)
    _opt(p, "--batch-size", "train", "batch_size", "clips per batch", type=int)
    _opt(p, "--epochs", "train", "epochs", epochs_help, type=int)
    _opt(p, "--seed", "train", "seed", "seed of the first run; run i uses seed+i", type=int)
    _opt(p, "--crop-frames", "train", "crop_frames", "training crop length in frames", type=int)
    _opt(p, "--runs", "train", "runs", "number of independent runs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pseudomos", description=__doc__.splitlines()[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="write a degraded corpus and unlabeled train/val manifests")
    p.add_argument("--config", help="JSON run config")
    _opt(p, "--clean-dir", "dataset", "clean_dir", "directory of clean WAV sources")
    _opt(p, "--out", "dataset", "out", "output directory")
    _opt(p, "--n", "dataset", "n", "number of clips to generate", type=int)
    _opt(p, "--seed", "dataset", "seed", "dataset seed", type=int)
    _opt(p, "--val-fraction", "dataset", "val_fraction", "fraction of clips in the val split", type=float)
    _opt(p, "--noise-dir", "dataset", "noise_dir", "optional directory of noise WAVs")
    _opt(p, "--workers", "dataset", "workers", "parallel workers", type=int)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("synth-clean", help="write synthetic speech-like clean clips")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=100, help="number of clips (default: 100)")
    p.add_argument("--duration", type=float, default=4.0, help="seconds per clip (default: 4.0)")
    p.add_argument("--seed", type=int, default=0, help="seed (default: 0)")
    p.set_defaults(func=cmd_synth_clean)

    p = sub.add_parser("label", help="attach pseudo-labels to a manifest")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--manifest", required=True, help="manifest to label")
    p.add_argument("--out", help="output manifest (default: overwrite --manifest)")
    _opt(p, "--rater", "rater", "kind", "rater", choices=["llm", "oracle"])
    _opt(p, "--endpoint", "rater", "endpoint", "remote LLM endpoint URL")
    _opt(p, "--token-env", "rater", "token_env", "environment variable holding the bearer token")
    _opt(p, "--timeout", "rater", "timeout_s", "request timeout in seconds", type=float)
    _opt(p, "--max-retries", "rater", "max_retries", "retries per clip", type=int)
    _opt(p, "--concurrency", "rater", "concurrency", "simultaneous requests", type=int)
    _opt(p, "--oracle-variant", "rater", "oracle_variant", "oracle weighting",
         choices=sorted(ORACLE_VARIANTS))
    p.add_argument("--force", action="store_true", help="relabel rows that already have labels")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", help="train one or more models")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--train-manifest", required=True, help="labeled training manifest")
    p.add_argument("--val-manifest", required=True, help="labeled validation manifest")
    p.add_argument("--out", required=True, help="directory receiving run_XX subdirectories")
    _add_model_opts(p)
    _add_train_opts(p, "epochs (default: 500 for dnsmos_pro, 60 for deepmos)")
    p.add_argument("--no-dropout", action="store_true", help="disable dropout")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="continue training checkpoints with dropout off")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--checkpoint", required=True, help="checkpoint dir, run dir or directory of runs")
    p.add_argument("--train-manifest", required=True, help="labeled training manifest")
    p.add_argument("--val-manifest", required=True, help="labeled validation manifest")
    p.add_argument("--out", required=True, help="directory receiving run_XX subdirectories")
    p.add_argument("--model-kind", dest="expect_kind", choices=["dnsmos_pro", "deepmos"],
                   help="fail unless the checkpoint holds this architecture")
    _add_train_opts(p, "epochs (default: 10)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate checkpoints on test manifests")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--checkpoint", required=True, help="checkpoint dir, run dir or directory of runs")
    p.add_argument("--test", action="append", default=[], metavar="NAME=MANIFEST",
                   help="test manifest (repeatable)")
    p.add_argument("--strategy", default="", help="row label for the report")
    p.add_argument("--out", help="aggregated report JSON (default: <checkpoint>/eval.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render evaluation reports as a results table")
    p.add_argument("--row", action="append", required=True, metavar="STRATEGY=REPORT",
                   help="eval report JSON, one per table row (repeatable)")
    p.add_argument("--metric", choices=["pcc", "srcc"], default="pcc", help="metric (default: pcc)")
    p.add_argument("--title", help="table title")
    p.add_argument("--out", help="also write the table to this file")
    p.set_defaults(func=cmd_report)
    return parser


# ---------------------------------------------------------------- commands

def cmd_build(args, parser):
    cfg = resolve(args)["dataset"]
    if not cfg["clean_dir"] or not cfg["out"]:
        parser.error("build needs --clean-dir and --out")
    train, val = build_dataset(cfg["clean_dir"], cfg["out"], cfg["n"], cfg["val_fraction"],
                               cfg["seed"], cfg["noise_dir"], workers=cfg["workers"])
    print(f"wrote {len(train)} train and {len(val)} val clips to {cfg['out']}")
    return EXIT_OK


def cmd_synth_clean(args, parser):
    paths = write_clean_corpus(args.out, args.n, args.duration, args.seed)
    print(f"wrote {len(paths)} clean clips to {args.out}")
    return EXIT_OK


def cmd_label(args, parser):
    cfg = resolve(args)["rater"]
    rater_cfg = RaterConfig(kind=LLM_REMOTE if cfg["kind"] == "llm" else ORACLE,
                            endpoint_url=cfg["endpoint"], auth_token_env_name=cfg["token_env"],
                            timeout_s=cfg["timeout_s"], max_retries=cfg["max_retries"],
                            oracle_variant=cfg["oracle_variant"])
    manifest = read_manifest(args.manifest)
    out = args.out or args.manifest
    try:
        labeled, stats = label_manifest(manifest, rater_cfg, cfg["concurrency"], force=args.force)
    except LabelingError as exc:
        write_manifest(exc.manifest, out)
        raise
    write_manifest(labeled, out)
    print(f"labeled {stats.labeled}, skipped {stats.skipped}, failed {stats.failed} of {stats.total}")
    if stats.failed:
        log.warning("%d clips left unlabeled", stats.failed)
    return EXIT_OK


def _train_config(cfg, seed, dropout_enabled) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(lr=t["lr"], batch_size=t["batch_size"], epochs=t["epochs"],
                       dropout_enabled=dropout_enabled, seed=seed, crop_frames=t["crop_frames"])


def _echo(out_dir, cfg, command):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as fh:
        json.dump({"command": command, **cfg}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _completed(run_dir, expected: dict) -> bool:
    try:
        with open(os.path.join(run_dir, "config.json")) as fh:
            done = json.load(fh)
    except (OSError, json.JSONDecodeError):
        return False
    same = all(done.get(k) == v for k, v in expected.items())
    return same and os.path.exists(os.path.join(run_dir, "best", "model.json"))


def cmd_train(args, parser):
    cfg = resolve(args)
    if args.no_dropout:
        cfg["model"]["dropout_rate"] = 0.0
    train_m, val_m = read_manifest(args.train_manifest), read_manifest(args.val_manifest)
    _echo(args.out, cfg, "train")
    for i in range(cfg["train"]["runs"]):
        seed = cfg["train"]["seed"] + i
        m = cfg["model"]
        model_cfg = ModelConfig(m["model_kind"], m["widths"] or (), m["dropout_rate"],
                                m["head_hidden"], m["lstm_hidden"], seed=seed)
        tcfg = _train_config(cfg, seed, not args.no_dropout)
        run_dir = os.path.join(args.out, f"run_{i:02d}")
        if _completed(run_dir, {"stage": "train", "train": tcfg.to_dict(), "model": model_cfg.to_dict(),
                                "train_manifest_hash": train_m.content_hash()}):
            print(f"{run_dir}: already complete, skipping")
            continue
        ckpt = train(build_model(model_cfg), train_m, val_m, tcfg, run_dir=run_dir)
        print(f"{run_dir}: best epoch {ckpt.best_epoch}, val PCC {ckpt.best_val_pcc}")
    return EXIT_OK


def find_checkpoints(path) -> list[str]:
    """Checkpoint directories under ``path``: itself, its best/, or each run_XX/best."""
    if os.path.exists(os.path.join(path, "model.json")):
        return [path]
    if os.path.exists(os.path.join(path, "best", "model.json")):
        return [os.path.join(path, "best")]
    runs = sorted(d for d in (os.listdir(path) if os.path.isdir(path) else [])
                  if d.startswith("run_") and os.path.exists(os.path.join(path, d, "best", "model.json")))
    if not runs:
        raise FileNotFoundError(f"no checkpoint found at {path}")
    return [os.path.join(path, d, "best") for d in runs]


def cmd_finetune(args, parser):
    cfg = resolve(args)
    if args.train__epochs is None:
        cfg["train"]["epochs"] = 10
    ckpts = find_checkpoints(args.checkpoint)
    train_m, val_m = read_manifest(args.train_manifest), read_manifest(args.val_manifest)
    _echo(args.out, cfg, "finetune")
    for i, path in enumerate(ckpts):
        tcfg = _train_config(cfg, cfg["train"]["seed"] + i, False)
        run_dir = os.path.join(args.out, f"run_{i:02d}")
        ckpt = finetune(Checkpoint.load(path), train_m, val_m, tcfg, model_kind=args.expect_kind,
                        run_dir=run_dir)
        print(f"{run_dir}: best epoch {ckpt.best_epoch}, val PCC {ckpt.best_val_pcc}")
    return EXIT_OK


def _parse_pairs(items, what):
    out = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise ConfigError(f"{what} must look like NAME=PATH, got {item!r}")
        out[name] = path
    return out


def cmd_eval(args, parser):
    cfg = resolve(args)
    tests = dict(cfg["eval"]["tests"])
    tests.update(_parse_pairs(args.test, "--test"))
    if not tests:
        raise ConfigError("eval needs at least one --test NAME=MANIFEST")
    ckpts = find_checkpoints(args.checkpoint)
    manifests = {name: read_manifest(path) for name, path in tests.items()}
    reports = []
    for path in ckpts:
        report = evaluate(Checkpoint.load(path), manifests, strict=False, strategy=args.strategy)
        report.save(os.path.join(os.path.dirname(os.path.abspath(path)), "eval.json"))
        reports.append(report)
    failed = {n: r.error for rep in reports for n, r in rep.datasets.items() if r.error}
    for name, err in failed.items():
        log.error("%s: %s", name, err)
    if failed:
        return EXIT_RUNTIME
    agg = aggregate_runs(reports)
    out = args.out or os.path.join(args.checkpoint, "eval.json")
    agg.save(out)
    print(render_table([agg]), end="")
    return EXIT_OK


def cmd_report(args, parser):
    rows = []
    for strategy, path in _parse_pairs(args.row, "--row").items():
        report = EvalReport.load(path)
        report.strategy = strategy
        rows.append(report)
    text = render_table(rows, metric=args.metric, title=args.title)
    print(text, end="")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    return EXIT_OK


CONFIG_ERRORS = (ConfigError, RaterConfigError, TrainConfigError, ModelConfigError, ManifestError)
RUNTIME_ERRORS = (OSError, AudioError, DatasetError, LabelingError, AggregationError, RuntimeError,
                  ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, parser)
    except ModelKindMismatch as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except CONFIG_ERRORS as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except RUNTIME_ERRORS as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
