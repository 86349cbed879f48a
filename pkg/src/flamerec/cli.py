"""Command-line entry point: ``python -m flamerec <command> [flags] [--key=value ...]``.

Runs are driven by a flat ``key = value`` config file.  Any key can also be
given on the command line as ``--key=value`` (or ``--key value``); the
command line wins.  Exit codes: 0 ok, 1 usage or config, 2 data, 3 numeric.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import build_sequences, is_dataset_cache, load_dataset, parse_interactions, save_dataset
from .ensemble import EnsembleState
from .errors import ConfigError, ContractError, DataError, FormatError, NumericError
from .evaluation import evaluate, per_matrix, write_per_csv, write_report_csv
from .training import (
    MODES,
    TrainConfig,
    load_checkpoint,
    pretrain_frozen,
    save_checkpoint,
    set_deterministic,
    train,
    write_metrics_csv,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

_TRAIN_TYPES = {f.name: f.type for f in fields(TrainConfig)}
# keys outside TrainConfig, with their types and defaults
_RUN_KEYS = {
    "data": (str, None),
    "out": (str, "run"),
    "frozen_checkpoint": (str, None),
    "checkpoint": (str, None),
    "pretrain_first": (bool, False),
    "modes": (str, "single,ensemble_scratch,ensemble_guide"),
    "split": (str, "test"),
    "source": (str, "lrn"),
    "min_count": (int, 5),
}
_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _coerce(key: str, raw: str):
    kind = _RUN_KEYS[key][0] if key in _RUN_KEYS else _TYPES.get(_TRAIN_TYPES[key], str)
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"key {key!r}: expected a boolean, got {raw!r}")
    try:
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r} as {kind.__name__}") from None


def _check_key(key: str) -> str:
    key = key.strip().replace("-", "_")
    if key not in _TRAIN_TYPES and key not in _RUN_KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    return key


def read_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key = value")
        key, value = line.split("=", 1)
        out[_check_key(key)] = value.strip()
    return out


def parse_overrides(tokens: list[str]) -> dict[str, str]:
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            key, value = body.split("=", 1)
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"missing value for {tok}")
            key, value = body, tokens[i + 1]
            i += 1
        out[_check_key(key)] = value
        i += 1
    return out


class RunConfig:
    """Resolved settings: a TrainConfig plus run-level keys."""

    def __init__(self, raw: dict[str, str]):
        values = {k: _coerce(k, v) for k, v in raw.items()}
        train_kw = {k: v for k, v in values.items() if k in _TRAIN_TYPES}
        self.train = TrainConfig(**train_kw)
        for key, (_, default) in _RUN_KEYS.items():
            setattr(self, key, values.get(key, default))
        self.raw = dict(raw)

    def as_text(self) -> str:
        lines = [f"{k} = {v}" for k, v in asdict(self.train).items()]
        for key in _RUN_KEYS:
            v = getattr(self, key)
            if v is not None:
                lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"


def _build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded BLAS; metrics CSVs omit wall-clock time")
    parser = _Parser(prog="flamerec", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    ing = sub.add_parser("ingest", parents=[common], help="parse a TSV log into a dataset cache")
    ing.add_argument("input")
    ing.add_argument("output", nargs="?")
    for name, desc in (("pretrain", "train the frozen network"),
                       ("train", "train in the configured mode"),
                       ("eval", "evaluate a checkpoint"),
                       ("diagnose", "baseline traces and PER matrices")):
        sub.add_parser(name, parents=[common], help=desc)
    return parser


def _resolve(args, extra: list[str]) -> RunConfig:
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw.update(read_config_text(path.read_text(encoding="utf-8")))
    raw.update(parse_overrides(extra))
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    if args.out is not None:
        raw["out"] = args.out
    return RunConfig(raw)


def _load_data(run: RunConfig):
    if not run.data:
        raise ConfigError("missing required key 'data'")
    path = Path(run.data)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    if is_dataset_cache(path):
        return load_dataset(path)
    return build_sequences(parse_interactions(path), run.train.max_len, run.min_count)


def _out_dir(run: RunConfig) -> Path:
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, run: RunConfig, command: str, artifacts: dict) -> None:
    """Config snapshot plus versions; ``eval`` writes its own file so it never clobbers a training run's."""
    stem = "eval_" if command == "eval" else ""
    (out / f"{stem}config.txt").write_text(run.as_text(), encoding="utf-8")
    manifest = {
        "command": command,
        "seed": run.train.seed,
        "config": {**asdict(run.train), **{k: getattr(run, k) for k in _RUN_KEYS}},
        "versions": {"flamerec": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "artifacts": artifacts,
    }
    (out / f"{stem}manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")


def _load_ckpt(path):
    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _frozen_for(run: RunConfig, dataset, out: Path, timing: bool, artifacts: dict):
    if run.frozen_checkpoint:
        return _load_ckpt(run.frozen_checkpoint)
    if not run.pretrain_first:
        raise ConfigError("this mode needs 'frozen_checkpoint' (or pretrain_first = true)")
    # a different seed, so the anchor is not a copy of the single-mode baseline
    result = pretrain_frozen(run.train.replace(seed=run.train.seed + 1), dataset)
    save_checkpoint(result.checkpoint, out / "frozen.ckpt")
    write_metrics_csv(result.trace, out / "metrics_frozen_pretrain.csv", timing)
    artifacts["frozen_checkpoint"] = "frozen.ckpt"
    return result.checkpoint


def _print_report(label: str, report) -> None:
    cells = [f"HR@{k}={v:.4f}" for k, v in report.hr.items()]
    cells += [f"NDCG@{k}={v:.4f}" for k, v in report.ndcg.items()]
    print(f"{label}: " + " ".join(cells))


def cmd_ingest(args, run: RunConfig) -> int:
    src = Path(args.input)
    if not src.is_file():
        raise DataError(f"input file not found: {src}")
    ds = build_sequences(parse_interactions(src), run.train.max_len, run.min_count)
    dest = Path(args.output) if args.output else _out_dir(run) / "dataset.flamedata"
    dest.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, dest)
    s = ds.stats()
    print("users\titems\tinteractions\tavg_seq_len\tsparsity")
    print(f"{s['users']}\t{s['items']}\t{s['interactions']}\t{s['avg_seq_len']:.2f}\t{s['sparsity'] * 100:.2f}%")
    print(f"wrote {dest}")
    return EXIT_OK


def cmd_pretrain(args, run: RunConfig) -> int:
    ds = _load_data(run)
    out = _out_dir(run)
    timing = not args.deterministic
    result = pretrain_frozen(run.train, ds)
    save_checkpoint(result.checkpoint, out / "frozen.ckpt")
    write_metrics_csv(result.trace, out / "metrics.csv", timing)
    _write_manifest(out, run, "pretrain", {"checkpoint": "frozen.ckpt", "metrics": "metrics.csv",
                                           "best_epoch": result.best_epoch})
    print(f"best epoch {result.best_epoch}, val NDCG@20 {result.checkpoint.meta['best_val_ndcg20']:.4f}")
    return EXIT_OK


def _run_mode(run: RunConfig, mode: str, ds, out: Path, timing: bool, artifacts: dict, prefix: str):
    cfg = run.train.replace(mode=mode)
    frozen = _frozen_for(run, ds, out, timing, artifacts) if mode in ("flame", "ensemble_guide") else None
    result = train(cfg, ds, frozen)
    for name, ckpt in result.checkpoints.items():
        suffix = "" if name in ("learnable", "a") else f"_{name}"
        fname = f"{prefix}{suffix}.ckpt"
        save_checkpoint(ckpt, out / fname)
        artifacts.setdefault("checkpoints", []).append(fname)
    return result, frozen


def cmd_train(args, run: RunConfig) -> int:
    ds = _load_data(run)
    out = _out_dir(run)
    timing = not args.deterministic
    artifacts: dict = {}
    result, _ = _run_mode(run, run.train.mode, ds, out, timing, artifacts, "model")
    for name, records in result.history.items():
        fname = "metrics.csv" if name in ("learnable", "a") else f"metrics_{name}.csv"
        write_metrics_csv(records, out / fname, timing)
        artifacts.setdefault("metrics", []).append(fname)
    artifacts["best_epoch"] = result.best_epoch
    _write_manifest(out, run, "train", artifacts)
    print(f"mode {run.train.mode}: best epoch {result.best_epoch} of {result.epochs_run}, "
          f"val NDCG@20 {result.checkpoint.meta['best_val_ndcg20']:.4f}")
    return EXIT_OK


def cmd_eval(args, run: RunConfig) -> int:
    ds = _load_data(run)
    out = _out_dir(run)
    ckpt_path = run.checkpoint or out / "model.ckpt"
    params = _load_ckpt(ckpt_path).to_params(run.train.network_config(ds.n_items), requires_grad=False)
    if run.split not in ("valid", "test"):
        raise ConfigError(f"split must be valid or test, got {run.split!r}")
    artifacts = {"checkpoint": str(ckpt_path)}
    if run.source == "lrn":
        report = evaluate(params, ds, run.split, mask_history=run.train.mask_history)
        write_report_csv(report, out / f"report_{run.split}.csv")
        artifacts["report"] = f"report_{run.split}.csv"
        _print_report(run.split, report)
    elif run.source == "all-paths":
        if not run.frozen_checkpoint:
            raise ConfigError("source = all-paths needs 'frozen_checkpoint'")
        frozen = _load_ckpt(run.frozen_checkpoint).to_params(run.train.network_config(ds.n_items),
                                                               requires_grad=False)
        state = EnsembleState.build(frozen, params, run.train.n_submodules)
        paths = evaluate(state, ds, run.split, source="all-paths", mask_history=run.train.mask_history)
        for path, label in zip(paths.reports, paths.labels):
            write_report_csv(paths.reports[path], out / f"report_{run.split}_{label}.csv")
            _print_report(label, paths.reports[path])
        write_per_csv(paths.per, paths.labels, out / f"per_{run.split}.csv")
        artifacts["per"] = f"per_{run.split}.csv"
    else:
        raise ConfigError(f"source must be lrn or all-paths, got {run.source!r}")
    _write_manifest(out, run, "eval", artifacts)
    return EXIT_OK


def cmd_diagnose(args, run: RunConfig) -> int:
    modes = [m.strip() for m in run.modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in MODES]
    if bad or not modes:
        raise ConfigError(f"unknown modes {bad}; expected a subset of {MODES}")
    ds = _load_data(run)
    out = _out_dir(run)
    timing = not args.deterministic
    artifacts: dict = {}
    net_cfg = run.train.network_config(ds.n_items)
    for mode in modes:
        result, frozen = _run_mode(run, mode, ds, out, timing, artifacts, f"model_{mode}")
        first = next(iter(result.history))
        write_metrics_csv(result.history[first], out / f"trace_{mode}.csv", timing)
        artifacts.setdefault("traces", []).append(f"trace_{mode}.csv")
        for name, records in result.history.items():
            if name != first:
                write_metrics_csv(records, out / f"trace_{mode}_{name}.csv", timing)
        if mode == "single":
            continue
        # PER between the members of the ensemble, on the test split
        if mode == "flame":
            state = EnsembleState.build(frozen.to_params(net_cfg, False),
                                        result.checkpoint.to_params(net_cfg, False), run.train.n_submodules)
            paths = evaluate(state, ds, "test", source="all-paths")
            labels, matrix = paths.labels, paths.per
        else:
            members = ({"frozen": frozen} if mode == "ensemble_guide" else {}) | result.checkpoints
            reports = {n: evaluate(c.to_params(net_cfg, False), ds, "test") for n, c in members.items()}
            labels = list(reports)
            matrix = per_matrix([r.hits() for r in reports.values()])
        write_per_csv(matrix, labels, out / f"per_{mode}.csv")
        artifacts.setdefault("per", []).append(f"per_{mode}.csv")
    _write_manifest(out, run, "diagnose", artifacts)
    print("wrote " + ", ".join(artifacts.get("traces", [])))
    return EXIT_OK


COMMANDS = {"ingest": cmd_ingest, "pretrain": cmd_pretrain, "train": cmd_train,
            "eval": cmd_eval, "diagnose": cmd_diagnose}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        run = _resolve(args, extra)
        if args.deterministic:
            set_deterministic()
        return COMMANDS[args.command](args, run)
    except (UsageError, ConfigError) as exc:
        print(f"flamerec: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError) as exc:
        print(f"flamerec: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError, ContractError) as exc:
        print(f"flamerec: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
