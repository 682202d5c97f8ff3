"""Single entry point dispatching to train, eval, bench, gradcheck, and
synth workflows.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  Every output
lands under the --out directory.  GSA_LOG in {quiet, info, debug} controls
verbosity.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .benchmark import (
    MECHANISMS,
    BenchConfig,
    emit_csv_report,
    run_scaling_benchmark,
)
from .data import DataError, load_csv, make_windows, synthetic_series, write_csv
from .gsa import ConfigError
from .model import (
    ForecasterModel,
    ModelConfig,
    model_config_from_mapping,
    model_config_to_text,
)
from .tensor import Tensor
from .training import TrainConfig, evaluate, grad_check, mse_loss, train

log = logging.getLogger("gsaformer")

_MODEL_FIELDS = {f.name for f in fields(ModelConfig)}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
_DATA_FIELDS = {"target", "split_train", "split_val", "split_test",
                "window_stride", "synth_kind", "synth_rows", "synth_features"}
_KNOWN_FIELDS = _MODEL_FIELDS | _TRAIN_FIELDS | _DATA_FIELDS

_DATA_DEFAULTS = {
    "target": "OT",
    "split_train": "0.7",
    "split_val": "0.1",
    "split_test": "0.2",
    "window_stride": "1",
    "synth_kind": "sine_mix",
    "synth_rows": "2000",
    "synth_features": "2",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _setup_logging() -> None:
    level = {"quiet": logging.WARNING, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("GSA_LOG", "info"), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def read_config_file(path: str) -> dict[str, str]:
    mapping: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            mapping[key.strip()] = value.strip()
    return mapping


def build_settings(args) -> dict[str, str]:
    """Merge config file and --set overrides; reject unknown keys."""
    mapping: dict[str, str] = {}
    if args.config:
        if not Path(args.config).exists():
            raise UsageError(f"config file not found: {args.config}")
        mapping.update(read_config_file(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        mapping[key.strip()] = value.strip()
    for key in mapping:
        if key not in _KNOWN_FIELDS:
            raise ConfigError(
                f"unknown config key {key!r}; known keys: {sorted(_KNOWN_FIELDS)}")
    return mapping


def _coerce(value: str, template) -> object:
    if isinstance(template, bool):
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected boolean, got {value!r}")
    if isinstance(template, float):
        return float(value)
    if isinstance(template, int):
        return int(value)
    if template is None:   # optional numeric fields (patience, clip, ...)
        try:
            return int(value)
        except ValueError:
            return float(value)
    return value


def split_settings(mapping: dict[str, str], seed: int,
                   ) -> tuple[dict, TrainConfig, dict[str, str]]:
    model_kwargs = {k: v for k, v in mapping.items() if k in _MODEL_FIELDS}
    train_kwargs = {}
    defaults = TrainConfig()
    for key, raw in mapping.items():
        if key in _TRAIN_FIELDS:
            train_kwargs[key] = _coerce(raw, getattr(defaults, key))
    train_kwargs.setdefault("seed", seed)
    data_settings = dict(_DATA_DEFAULTS)
    data_settings.update({k: v for k, v in mapping.items() if k in _DATA_FIELDS})
    return model_kwargs, TrainConfig(**train_kwargs), data_settings


def _model_config(model_kwargs: dict[str, str], **required) -> ModelConfig:
    merged = {k: str(v) for k, v in required.items()}
    merged.update(model_kwargs)
    return model_config_from_mapping(merged)


def _load_series(args, data_settings, train_cfg):
    if args.csv:
        if not Path(args.csv).exists():
            raise UsageError(f"csv file not found: {args.csv}")
        return load_csv(args.csv, data_settings["target"])
    log.info("no --csv given; using synthetic %s series", data_settings["synth_kind"])
    return synthetic_series(data_settings["synth_kind"],
                            int(data_settings["synth_rows"]),
                            int(data_settings["synth_features"]),
                            train_cfg.seed)


def cmd_train(args) -> int:
    mapping = build_settings(args)
    model_kwargs, train_cfg, data_settings = split_settings(mapping, args.seed)
    series = _load_series(args, data_settings, train_cfg)
    model_kwargs.setdefault("seq_len", "96")
    model_kwargs.setdefault("pred_len", "24")
    model_kwargs.setdefault("n_features_in", str(series.values.shape[1]))
    model_kwargs.setdefault("n_features_out", str(series.values.shape[1]))
    cfg = _model_config(model_kwargs)
    ratios = (float(data_settings["split_train"]), float(data_settings["split_val"]),
              float(data_settings["split_test"]))
    train_set, val_set, _ = make_windows(series, cfg.seq_len, cfg.pred_len,
                                         split_ratios=ratios,
                                         stride=int(data_settings["window_stride"]))
    log.info("training on %d windows, validating on %d", len(train_set), len(val_set))
    model = ForecasterModel(cfg, seed=train_cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    history = train(model, train_set, train_cfg, val_set=val_set,
                    checkpoint_path=out / "best.ckpt")
    history.write_csv(out / "history.csv")
    model.save(out / "final.ckpt")
    (out / "model.cfg").write_text(model_config_to_text(cfg), encoding="utf-8")
    last = history.epochs[-1] if history.epochs else (0, math.nan, math.nan)
    print(f"trained {len(history.iteration_losses)} iterations; "
          f"final train_mse={last[1]:.6f} val_mse={last[2]:.6f}")
    return 0


def cmd_eval(args) -> int:
    mapping = build_settings(args)
    _, train_cfg, data_settings = split_settings(mapping, args.seed)
    ckpt_dir = Path(args.checkpoint).parent
    cfg_path = Path(args.model_config) if args.model_config else ckpt_dir / "model.cfg"
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    if not cfg_path.exists():
        raise UsageError(f"model config not found: {cfg_path}")
    cfg = model_config_from_mapping(read_config_file(cfg_path))
    model = ForecasterModel(cfg, seed=train_cfg.seed)
    model.load(args.checkpoint)
    series = _load_series(args, data_settings, train_cfg)
    ratios = (float(data_settings["split_train"]), float(data_settings["split_val"]),
              float(data_settings["split_test"]))
    _, _, test_set = make_windows(series, cfg.seq_len, cfg.pred_len,
                                  split_ratios=ratios,
                                  stride=int(data_settings["window_stride"]))
    test_mse = evaluate(model, test_set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "mse", "windows"])
        writer.writerow(["test", repr(test_mse), len(test_set)])
    print(f"test_mse={test_mse:.6f} over {len(test_set)} windows")
    return 0


def cmd_bench(args) -> int:
    mapping = build_settings(args)
    lengths = sorted(int(x) for x in args.lengths.split(","))
    mechanisms = [m.strip() for m in args.mechanisms.split(",")]
    for m in mechanisms:
        if m not in MECHANISMS:
            raise UsageError(f"unknown mechanism {m!r}; choose from {MECHANISMS}")
    bench_cfg = BenchConfig(seed=args.seed, timing=not args.no_timing,
                            min_cell_seconds=args.min_cell_seconds)
    for key in ("d", "heads", "ffn_hidden", "e_l", "d_l", "l_g", "l_s", "l_comp"):
        if key in mapping:
            setattr(bench_cfg, key, int(mapping[key]))
    report = run_scaling_benchmark(lengths, mechanisms, bench_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    emit_csv_report(report, out / "bench.csv")
    for row in report.rows:
        print(f"{row.mechanism:20s} l={row.seq_len:6d} "
              f"score_elements={row.score_elements:12d} "
              f"peak_buffer={row.peak_score_buffer:10d}")
    return 0


GRADCHECK_PRESETS = {
    "tiny": dict(seq_len=24, pred_len=8, n_features_in=2, n_features_out=2,
                 d=16, heads=2, e_l=1, d_l=1, l_g=8, l_s=2, l_comp=256,
                 ffn_hidden=16),
    "small": dict(seq_len=48, pred_len=16, n_features_in=3, n_features_out=3,
                  d=32, heads=4, e_l=2, d_l=2, l_g=16, l_s=4, l_comp=24,
                  ffn_hidden=32),
}


def cmd_gradcheck(args) -> int:
    mapping = build_settings(args)
    if args.preset not in GRADCHECK_PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; "
                         f"choose from {sorted(GRADCHECK_PRESETS)}")
    preset = dict(GRADCHECK_PRESETS[args.preset])
    preset.update({k: int(v) for k, v in mapping.items()
                   if k in _MODEL_FIELDS and k in preset})
    cfg = ModelConfig(**preset)
    model = ForecasterModel(cfg, seed=args.seed)
    # wake the global summary path so its parameters carry real gradients
    for name, p in model.parameters().items():
        if name.endswith(".beta"):
            p.data[:] = 0.37
    rng = np.random.default_rng(args.seed)
    x = Tensor(rng.normal(size=(cfg.seq_len, cfg.n_features_in)))
    y = Tensor(rng.normal(size=(cfg.pred_len, cfg.n_features_out)))
    report = grad_check(lambda: mse_loss(model.forward(x), y),
                        model.parameters(), epsilon=args.epsilon,
                        tolerance=args.tolerance, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_text = "\n".join(report.lines()) + "\n"
    (out / "gradcheck_report.txt").write_text(report_text, encoding="utf-8")
    print(report_text, end="")
    if not report.ok:
        print(f"gradcheck FAILED: {len(report.failures)} tensors over "
              f"tolerance {report.tolerance}")
        return 2
    print(f"gradcheck ok: {len(report.entries)} tensors, "
          f"worst rel err {report.worst:.3e}")
    return 0


def cmd_synth(args) -> int:
    mapping = build_settings(args)
    _, train_cfg, data_settings = split_settings(mapping, args.seed)
    series = synthetic_series(args.kind or data_settings["synth_kind"],
                              args.rows, args.features, train_cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "synth.csv"
    write_csv(series, path)
    print(f"wrote {series.length} rows x {len(series.feature_names)} features "
          f"to {path}")
    return 0


def _add_common(sub) -> None:
    sub.add_argument("--config", default=None,
                     help="flat key=value config file (default: none)")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override a config field (repeatable)")
    sub.add_argument("--out", default="out",
                     help="output directory (default: ./out)")
    sub.add_argument("--seed", type=int, default=0,
                     help="global random seed (default: 0)")


def build_parser() -> _Parser:
    parser = _Parser(prog="gsaformer",
                     description="grouped-attention forecaster workflows")
    subs = parser.add_subparsers(dest="verb", metavar="{train,eval,bench,gradcheck,synth}")
    p_train = subs.add_parser("train", help="fit a forecaster", add_help=True)
    _add_common(p_train)
    p_train.add_argument("--csv", default=None,
                         help="ETT-style CSV (default: synthetic data)")
    p_eval = subs.add_parser("eval", help="score a checkpoint on the test split")
    _add_common(p_eval)
    p_eval.add_argument("--csv", default=None)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--model-config", default=None,
                        help="model.cfg path (default: next to the checkpoint)")
    p_bench = subs.add_parser("bench", help="run the scaling benchmark")
    _add_common(p_bench)
    p_bench.add_argument("--lengths", default="180,360,720,1440,2880",
                         help="comma-separated sequence lengths (default: %(default)s)")
    p_bench.add_argument("--mechanisms", default="grouped,canonical",
                         help="comma-separated subset of "
                              "grouped,grouped_local_only,canonical")
    p_bench.add_argument("--no-timing", action="store_true",
                         help="skip wall-clock timing for reproducible output")
    p_bench.add_argument("--min-cell-seconds", type=float, default=0.5,
                         help="minimum time spent per benchmark cell (default: 0.5)")
    p_grad = subs.add_parser("gradcheck", help="finite-difference gradient check")
    _add_common(p_grad)
    p_grad.add_argument("--preset", default="tiny",
                        help="model preset: tiny or small (default: tiny)")
    p_grad.add_argument("--epsilon", type=float, default=1e-6)
    p_grad.add_argument("--tolerance", type=float, default=1e-5)
    p_synth = subs.add_parser("synth", help="write a synthetic CSV")
    _add_common(p_synth)
    p_synth.add_argument("--kind", default=None,
                         help="sine_mix, trend_plus_season, or white_noise")
    p_synth.add_argument("--rows", type=int, default=2000)
    p_synth.add_argument("--features", type=int, default=2)
    return parser


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.verb:
            raise UsageError(f"missing verb; choose from {sorted(_COMMANDS)}\n"
                             f"{parser.format_usage()}")
        return _COMMANDS[args.verb](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, DataError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
