"""Command-line entry point.

Every subcommand that touches data reads an optional JSON run config::

    {"version": 1,
     "data": {"path": "series.csv"} | {"synth": {"periods": [24], ...}},
     "split": {"protocol": "ett"},
     "model": {...ModelConfig fields...},
     "train": {...TrainConfig fields...},
     "horizons": [96], "train_stride": 1, "seed": 0, "workers": 1, "out": "runs/x"}

Precedence, lowest to highest: built-in defaults, ``TMOE_SEED`` (seed only),
the config file, command-line flags. Relative data paths resolve against the
config file's directory; ``fixture:<name>`` selects a bundled CSV.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__, fixtures
from .data import ANOMALY_KINDS, AnomalySpec, Dataset, Series, SplitSpec, load_csv, save_csv, synth_series
from .errors import (
    ConfigError,
    ConfigMismatch,
    CorruptCheckpoint,
    EmptySplit,
    InvalidArgument,
    InvalidShape,
    MissingFile,
    ParseError,
    UnsupportedVersion,
)
from .evalbench import (
    BenchConfig,
    ablate_attention,
    ablate_share,
    anomaly_harness,
    config_digest,
    evaluate,
    lag_correlation_map,
    robustness_csv,
    sweep_topk,
    write_report,
)
from .model import Model, ModelConfig
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("timeexpert")

CONFIG_VERSION = 1
RUN_KEYS = {"version", "data", "split", "model", "train", "horizons", "train_stride", "seed", "workers", "out"}
SYNTH_KEYS = {"periods", "amplitudes", "noise", "length", "channels", "seed", "name"}

VALIDATION_ERRORS = (ConfigError, ConfigMismatch, CorruptCheckpoint, EmptySplit, InvalidArgument, InvalidShape,
                     MissingFile, ParseError, UnsupportedVersion)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---- run config -----------------------------------------------------------------

@dataclass
class RunConfig:
    data: dict | None = None
    split: SplitSpec = field(default_factory=SplitSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    horizons: tuple[int, ...] | None = None
    train_stride: int = 1
    seed: int = 0
    workers: int = 1
    out: str = "runs/latest"
    base_dir: str = "."

    def to_dict(self) -> dict:
        return {"version": CONFIG_VERSION, "data": self.data,
                "split": {"protocol": self.split.protocol,
                          "ratios": list(self.split.ratios) if self.split.ratios else None},
                "model": self.model.to_dict(), "train": self.train.to_dict(),
                "horizons": list(self.resolved_horizons()), "train_stride": self.train_stride,
                "seed": self.seed, "workers": self.workers, "out": self.out}

    def resolved_horizons(self) -> tuple[int, ...]:
        return tuple(self.horizons) if self.horizons else (self.model.horizon,)

    def bench(self) -> BenchConfig:
        return BenchConfig(self.model, replace(self.train, seed=self.seed), self.resolved_horizons(),
                           self.train_stride, self.workers)


def _env_seed() -> int:
    raw = os.environ.get("TMOE_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"TMOE_SEED must be an integer, got {raw!r}") from None


def load_run_config(path: str | None) -> RunConfig:
    cfg = RunConfig(seed=_env_seed())
    if path is None:
        return cfg
    if not os.path.exists(path):
        raise MissingFile(f"config file not found: {path}")
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(raw) - RUN_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    if raw.get("version") != CONFIG_VERSION:
        raise ConfigError(f"{path}: expected \"version\": {CONFIG_VERSION}, got {raw.get('version')!r}")
    cfg.base_dir = os.path.dirname(os.path.abspath(path))
    try:
        if "data" in raw:
            cfg.data = _check_data(raw["data"])
        if "split" in raw:
            extra = set(raw["split"]) - {"protocol", "ratios"}
            if extra:
                raise ConfigError(f"unknown split keys {sorted(extra)}")
            ratios = raw["split"].get("ratios")
            cfg.split = SplitSpec(raw["split"].get("protocol", "ett"), tuple(ratios) if ratios else None)
        if "model" in raw:
            cfg.model = ModelConfig.from_dict(raw["model"])
        if "train" in raw:
            cfg.train = TrainConfig.from_dict(raw["train"])
        if "horizons" in raw:
            cfg.horizons = tuple(int(h) for h in raw["horizons"])
        for key in ("train_stride", "seed", "workers"):
            if key in raw:
                setattr(cfg, key, int(raw[key]))
        if "out" in raw:
            cfg.out = str(raw["out"])
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return cfg


def _check_data(data) -> dict:
    if not isinstance(data, dict) or len(data) != 1 or not ({"path", "synth"} & set(data)):
        raise ConfigError('"data" must be {"path": ...} or {"synth": {...}}')
    if "synth" in data:
        extra = set(data["synth"]) - SYNTH_KEYS
        if extra:
            raise ConfigError(f"unknown synth keys {sorted(extra)}")
        if "periods" not in data["synth"]:
            raise ConfigError("synth data needs \"periods\"")
    return data


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "data", None):
        cfg.data = {"path": os.path.abspath(args.data) if not args.data.startswith("fixture:") else args.data}
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    if getattr(args, "split", None):
        cfg.split = SplitSpec(args.split)
    train_changes = {k: getattr(args, k) for k in ("epochs", "lr", "batch", "patience", "max_steps")
                     if getattr(args, k, None) is not None}
    if train_changes:
        cfg.train = replace(cfg.train, **train_changes)
    if getattr(args, "horizon", None) is not None:
        cfg.model = replace(cfg.model, horizon=args.horizon)
        cfg.horizons = (args.horizon,)
    if getattr(args, "train_stride", None) is not None:
        cfg.train_stride = args.train_stride
    return cfg


def _resolve_path(cfg: RunConfig, p: str) -> str:
    if p.startswith("fixture:"):
        name = p.split(":", 1)[1]
        return fixtures.path(name if name.endswith(".csv") else name + ".csv")
    if os.path.isabs(p):
        return p
    return os.path.join(cfg.base_dir, p)


def load_series(cfg: RunConfig) -> Series:
    if cfg.data is None:
        raise ConfigError("no data source: pass --data or set \"data\" in the config")
    if "path" in cfg.data:
        return load_csv(_resolve_path(cfg, cfg.data["path"]))
    spec = dict(cfg.data["synth"])
    return synth_series(spec.pop("periods"), **spec)


# ---- outputs ---------------------------------------------------------------------

def _versions() -> dict:
    import scipy

    return {"timeexpert": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(out: str, command: str, argv: list[str], cfg: RunConfig, outputs: list[str],
                   extra: dict | None = None) -> str:
    os.makedirs(out, exist_ok=True)
    resolved = cfg.to_dict()
    manifest = {"command": command, "argv": argv, "config": resolved, "config_digest": config_digest(resolved),
                "seed": cfg.seed, "versions": _versions(), "outputs": sorted(outputs)}
    if extra:
        manifest.update(extra)
    path = os.path.join(out, "run.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _model_windows(model_cfg: ModelConfig, horizon: int) -> tuple[int, int]:
    """(lookback, target length) used for training windows."""
    if model_cfg.variant == "timeexpert":
        return model_cfg.patch.lookback, horizon
    segments = max(1, model_cfg.patch.lookback // model_cfg.segment_len)
    return model_cfg.segment_len * segments, model_cfg.segment_len


# ---- subcommands -------------------------------------------------------------------

def cmd_train(args, argv) -> int:
    cfg = _apply_flags(load_run_config(args.config), args)
    ds = Dataset.prepare(load_series(cfg), cfg.split)
    model_cfg = cfg.model
    lookback, target_len = _model_windows(model_cfg, model_cfg.horizon)
    model = Model.create(model_cfg, cfg.seed)
    _, history = train(model,
                       ds.windows("train", lookback, target_len, cfg.train_stride),
                       ds.windows("val", lookback, target_len),
                       replace(cfg.train, seed=cfg.seed))
    os.makedirs(cfg.out, exist_ok=True)
    ckpt = os.path.join(cfg.out, "model.ckpt")
    save_checkpoint(ckpt, model.params, model_cfg)
    hist_path = os.path.join(cfg.out, "history.json")
    with open(hist_path, "w") as fh:
        json.dump(history.to_dict(), fh, indent=2)
    report = evaluate(model, ds.windows("test", lookback, model_cfg.horizon), ds.series.name, cfg.workers, cfg.seed)
    rep_json, _ = write_report(report, cfg.out, "test_report")
    write_manifest(cfg.out, "train", argv, cfg, [ckpt, hist_path, rep_json],
                   {"dataset_stats": {"mean": ds.mean.tolist(), "std": ds.std.tolist()}})
    print(f"trained {len(history.train_loss)} epochs (best {history.best_epoch}); "
          f"test mse {report.average['mse']:.4f} mae {report.average['mae']:.4f}; checkpoint {ckpt}")
    return 0


def _load_model(path: str) -> Model:
    if not os.path.exists(path):
        raise MissingFile(f"checkpoint not found: {path}")
    ck = load_checkpoint(path)
    return Model(ck.model_config(), ck.params)


def cmd_eval(args, argv) -> int:
    cfg = _apply_flags(load_run_config(args.config), args)
    model = _load_model(args.checkpoint)
    cfg.model = model.config
    ds = Dataset.prepare(load_series(cfg), cfg.split)
    windows = ds.windows(args.part, *_eval_geometry(model))
    report = evaluate(model, windows, ds.series.name, cfg.workers, cfg.seed)
    rep_json, _ = write_report(report, cfg.out, f"{args.part}_report")
    write_manifest(cfg.out, "eval", argv, cfg, [rep_json], {"checkpoint": os.path.abspath(args.checkpoint)})
    print(f"{args.part}: mse {report.average['mse']:.4f} mae {report.average['mae']:.4f} ({len(windows)} windows)")
    return 0


def _eval_geometry(model: Model) -> tuple[int, int]:
    lookback, _ = _model_windows(model.config, model.config.horizon)
    return lookback, model.config.horizon


def cmd_predict(args, argv) -> int:
    cfg = _apply_flags(load_run_config(args.config), args)
    model = _load_model(args.checkpoint)
    cfg.model = model.config
    ds = Dataset.prepare(load_series(cfg), cfg.split)
    windows = ds.windows(args.part, *_eval_geometry(model))
    if args.max_windows is not None:
        windows = windows[np.arange(min(args.max_windows, len(windows)))]
    preds = np.asarray(model.predict(windows.inputs, model.config.horizon))
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "forecast.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window_id", "channel", "step", "prediction", "truth"])
        for i in range(len(windows)):
            for c, name in enumerate(ds.series.channels):
                for step in range(preds.shape[1]):
                    w.writerow([i, name, step, repr(float(preds[i, step, c])),
                                repr(float(windows.targets[i, step, c]))])
    write_manifest(cfg.out, "predict", argv, cfg, [path], {"checkpoint": os.path.abspath(args.checkpoint)})
    print(f"wrote {len(windows)} forecasts to {path}")
    return 0


def cmd_ablate_attention(args, argv) -> int:
    cfg = _apply_flags(load_run_config(args.config), args)
    ds = Dataset.prepare(load_series(cfg), cfg.split)
    table = ablate_attention(ds, cfg.bench(), cfg.seed)
    return _finish_table(cfg, argv, "ablate-attention", table, "attention_ablation")


def cmd_ablate_share(args, argv) -> int:
    cfg = _apply_flags(load_run_config(args.config), args)
    ds = Dataset.prepare(load_series(cfg), cfg.split)
    table = ablate_share(ds, cfg.bench(), cfg.seed)
    return _finish_table(cfg, argv, "ablate-share", table, "share_ablation")


def _finish_table(cfg, argv, command, table, stem) -> int:
    jp, cp = write_report(table, cfg.out, stem)
    write_manifest(cfg.out, command, argv, cfg, [jp, cp])
    sys.stdout.write(table.to_csv())
    return 0


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_sweep_topk(args, argv) -> int:
    cfg = _apply_flags(load_run_config(args.config), args)
    ds = Dataset.prepare(load_series(cfg), cfg.split)
    result = sweep_topk(ds, cfg.bench(), args.k, cfg.seed, args.reference_seeds or ())
    jp, cp = write_report(result, cfg.out, "topk_sweep")
    write_manifest(cfg.out, "sweep-topk", argv, cfg, [jp, cp])
    sys.stdout.write(result.to_csv())
    return 0


def cmd_anomaly_bench(args, argv) -> int:
    cfg = _apply_flags(load_run_config(args.config), args)
    ds = Dataset.prepare(load_series(cfg), cfg.split)
    lookback, target_len = _model_windows(cfg.model, cfg.model.horizon)
    models = {}
    for variant in args.variants:
        m = Model.create(cfg.model.with_tmoe(attention_variant=variant), cfg.seed)
        if not args.untrained:
            train(m, ds.windows("train", lookback, target_len, cfg.train_stride),
                  ds.windows("val", lookback, target_len), replace(cfg.train, seed=cfg.seed))
        models[variant] = m
    specs = [AnomalySpec(kind, args.position, args.length, args.magnitude) for kind in args.kinds]
    reports = anomaly_harness(models, ds.windows("test", lookback, cfg.model.horizon), specs,
                              args.seeds, args.max_windows)
    os.makedirs(cfg.out, exist_ok=True)
    jp, _ = write_report({"kind": "anomaly_robustness", "rows": [r.to_dict() for r in reports]},
                         cfg.out, "anomaly_robustness")
    cp = os.path.join(cfg.out, "anomaly_robustness.csv")
    text = robustness_csv(reports)
    with open(cp, "w") as fh:
        fh.write(text)
    write_manifest(cfg.out, "anomaly-bench", argv, cfg, [jp, cp])
    sys.stdout.write(text)
    return 0


def cmd_synth(args, argv) -> int:
    amps = args.amplitudes
    if amps is not None and len(amps) != len(args.periods):
        raise InvalidArgument("--amplitudes needs one value per period")
    seed = args.seed if args.seed is not None else _env_seed()
    series = synth_series(args.periods, amps, args.noise, args.T, args.channels, seed,
                          name=os.path.splitext(os.path.basename(args.out))[0])
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    save_csv(series, args.out)
    cfg = RunConfig(data={"synth": {"periods": args.periods, "amplitudes": amps, "noise": args.noise,
                                    "length": args.T, "channels": args.channels, "seed": seed}},
                    seed=seed, out=parent)
    write_manifest(parent, "synth", argv, cfg, [os.path.abspath(args.out)])
    print(f"wrote {args.T} x {args.channels} series to {args.out}")
    return 0


def cmd_gradcheck(args, argv) -> int:
    from .gradsuite import TOLERANCE, run_suite

    results = run_suite(args.h)
    worst = max(r.max_rel_err for r in results)
    for r in results:
        print(f"{r.name:16s} params={r.num_params:5d} probe_seed={r.probe_seed:3d} "
              f"max_rel_err={r.max_rel_err:.3e} {'ok' if r.passed else 'FAIL'}")
    print(f"max rel. err {worst:.3e} (tolerance {TOLERANCE:g})")
    return 0 if worst <= TOLERANCE else 2


def cmd_lagmap(args, argv) -> int:
    cfg = _apply_flags(load_run_config(args.config), args)
    series = load_series(cfg)
    if args.standardize:
        series = Dataset.prepare(series, cfg.split).series
    m = lag_correlation_map(series, args.patch, args.lookback, args.horizon, args.stride, args.max_windows)
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "lag_correlation.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["input_patch"] + [f"out_{j}" for j in range(m.shape[1])])
        for i, row in enumerate(m):
            w.writerow([i] + [f"{v:.6f}" for v in row])
    write_manifest(cfg.out, "lagmap", argv, cfg, [path])
    print(f"wrote {m.shape[0]}x{m.shape[1]} lag map to {path}")
    return 0


# ---- parser ---------------------------------------------------------------------------

def _common(p, data=True, training=False):
    p.add_argument("--config", help="JSON run config")
    if data:
        p.add_argument("--data", help="CSV path or fixture:<name>")
        p.add_argument("--split", choices=["ett", "general"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int)
    if training:
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch", type=int)
        p.add_argument("--patience", type=int)
        p.add_argument("--max-steps", dest="max_steps", type=int)
        p.add_argument("--horizon", type=int)
        p.add_argument("--train-stride", dest="train_stride", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="timeexpert", description="TMOE attention forecasting toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _common(p, training=True)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a checkpoint"),
                                 ("predict", cmd_predict, "write forecasts for a checkpoint")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--part", choices=["train", "val", "test"], default="test")
        if name == "predict":
            p.add_argument("--max-windows", dest="max_windows", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("ablate-attention", help="full vs random vs tmoe attention")
    _common(p, training=True)
    p.set_defaults(func=cmd_ablate_attention)

    p = sub.add_parser("ablate-share", help="shared global expert on vs off")
    _common(p, training=True)
    p.set_defaults(func=cmd_ablate_share)

    p = sub.add_parser("sweep-topk", help="one run per top-k value")
    _common(p, training=True)
    p.add_argument("--k", type=_int_list, required=True, help="comma-separated k values")
    p.add_argument("--reference-seeds", dest="reference_seeds", type=_int_list,
                   help="seeds for a full-attention noise envelope")
    p.set_defaults(func=cmd_sweep_topk)

    p = sub.add_parser("anomaly-bench", help="forecast deviation under injected anomalies")
    _common(p, training=True)
    p.add_argument("--variants", type=lambda s: s.split(","), default=["full", "random", "tmoe"])
    p.add_argument("--kinds", type=lambda s: s.split(","), default=list(ANOMALY_KINDS))
    p.add_argument("--position", type=int, default=40, help="offset inside the lookback")
    p.add_argument("--length", type=int, default=16)
    p.add_argument("--magnitude", type=float, default=5.0)
    p.add_argument("--seeds", type=_int_list, default=[0])
    p.add_argument("--max-windows", dest="max_windows", type=int, default=64)
    p.add_argument("--untrained", action="store_true", help="skip training (smoke runs)")
    p.set_defaults(func=cmd_anomaly_bench)

    p = sub.add_parser("synth", help="write a synthetic sinusoid CSV")
    p.add_argument("--periods", type=_float_list, required=True)
    p.add_argument("--amplitudes", type=_float_list)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--T", type=int, default=2000)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="64-bit gradient suite")
    p.add_argument("--tiny", action="store_true", help="tiny configs (the only suite; kept for clarity)")
    p.add_argument("--h", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("lagmap", help="input/output patch correlation map")
    _common(p)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--lookback", type=int, default=96)
    p.add_argument("--horizon", type=int, default=96)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--max-windows", dest="max_windows", type=int, default=1000)
    p.add_argument("--standardize", action="store_true")
    p.set_defaults(func=cmd_lagmap)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
