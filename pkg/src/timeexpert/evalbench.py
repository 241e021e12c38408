"""Metrics, ablation harnesses, anomaly robustness and the lag-correlation diagnostic."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .attention import SelectionTrace
from .data import AnomalySpec, Dataset, Series, WindowSet, inject_anomaly, make_windows
from .errors import InvalidArgument
from .model import Model, ModelConfig
from .numerics import Rng
from .training import TrainConfig, train

REPORT_SCHEMA_VERSION = 1
EVAL_CHUNK = 256

# Published numbers, carried in reports for orientation only.
PUBLISHED_REFERENCE = {
    "timeexpert_avg": {
        "ETTh1": {"mse": 0.428, "mae": 0.432},
        "ETTh2": {"mse": 0.370, "mae": 0.399},
        "ETTm1": {"mse": 0.380, "mae": 0.396},
        "ETTm2": {"mse": 0.281, "mae": 0.326},
        "Exchange": {"mse": 0.344, "mae": 0.394},
        "Weather": {"mse": 0.251, "mae": 0.276},
        "Solar-Energy": {"mse": 0.229, "mae": 0.263},
    },
    "attention_ablation": {
        "ETTh1": {"full": {"mse": 0.438, "mae": 0.435}, "random": {"mse": 0.433, "mae": 0.433},
                  "tmoe": {"mse": 0.428, "mae": 0.432}},
        "ETTh2": {"full": {"mse": 0.374, "mae": 0.401}, "random": {"mse": 0.379, "mae": 0.407},
                  "tmoe": {"mse": 0.370, "mae": 0.399}},
        "ETTm1": {"full": {"mse": 0.390, "mae": 0.403}, "random": {"mse": 0.392, "mae": 0.405},
                  "tmoe": {"mse": 0.380, "mae": 0.396}},
        "ETTm2": {"full": {"mse": 0.284, "mae": 0.329}, "random": {"mse": 0.285, "mae": 0.331},
                  "tmoe": {"mse": 0.281, "mae": 0.326}},
        "Exchange": {"full": {"mse": 0.364, "mae": 0.404}, "random": {"mse": 0.369, "mae": 0.409},
                     "tmoe": {"mse": 0.344, "mae": 0.394}},
    },
    "share_ablation_avg": {
        "ETTm2": {"share": {"mse": 0.283, "mae": 0.330}, "no_share": {"mse": 0.282, "mae": 0.326}},
        "Solar-Energy": {"share": {"mse": 0.229, "mae": 0.263}, "no_share": {"mse": 0.232, "mae": 0.265}},
    },
}


def config_digest(*objs) -> str:
    payload = json.dumps([o.to_dict() if hasattr(o, "to_dict") else o for o in objs],
                         sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ---- evaluation ---------------------------------------------------------------

@dataclass
class EvalReport:
    dataset: str
    config_digest: str
    seed: int
    per_horizon: dict[int, dict[str, float]] = field(default_factory=dict)
    wall_clock: float = 0.0
    variant: str = ""
    published_reference: dict | None = None

    @property
    def average(self) -> dict[str, float]:
        if not self.per_horizon:
            return {"mse": float("nan"), "mae": float("nan")}
        rows = list(self.per_horizon.values())
        return {m: float(np.mean([r[m] for r in rows])) for m in ("mse", "mae")}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_horizon"] = {str(h): v for h, v in self.per_horizon.items()}
        d["average"] = self.average
        d["schema_version"] = REPORT_SCHEMA_VERSION
        return d

    def merge(self, other: "EvalReport") -> "EvalReport":
        merged = dict(self.per_horizon)
        merged.update(other.per_horizon)
        return replace(self, per_horizon=merged, wall_clock=self.wall_clock + other.wall_clock)


def _window_errors(model: Model, inputs: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(model.predict(inputs, targets.shape[1]), dtype=np.float64)
    diff = pred - targets
    return (diff ** 2).mean(axis=(1, 2)), np.abs(diff).mean(axis=(1, 2))


def evaluate(model: Model, windows: WindowSet, dataset: str = "", workers: int = 1,
             seed: int | None = None) -> EvalReport:
    """Average per-window MSE/MAE over ``windows``.

    Windows are processed in fixed chunks, so the result does not depend on
    ``workers``.
    """
    start = time.perf_counter()
    chunks = [(i, min(i + EVAL_CHUNK, len(windows))) for i in range(0, len(windows), EVAL_CHUNK)]

    def run(bounds):
        lo, hi = bounds
        return _window_errors(model, windows.inputs[lo:hi], windows.targets[lo:hi])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    sq = np.concatenate([p[0] for p in parts])
    ab = np.concatenate([p[1] for p in parts])
    horizon = windows.targets.shape[1]
    return EvalReport(
        dataset=dataset,
        config_digest=config_digest(model.config),
        seed=model.seed if seed is None else seed,
        per_horizon={horizon: {"mse": float(sq.mean()), "mae": float(ab.mean())}},
        wall_clock=time.perf_counter() - start,
        variant=model.config.tmoe.attention_variant,
    )


def baseline_report(windows: WindowSet, kind: str = "repeat_last", dataset: str = "") -> EvalReport:
    """Naive forecasts: ``repeat_last`` repeats the final lookback value,
    ``seasonal`` repeats the last ``H`` lookback steps (H <= L)."""
    h = windows.targets.shape[1]
    if kind == "repeat_last":
        pred = np.repeat(windows.inputs[:, -1:, :], h, axis=1)
    elif kind == "seasonal":
        if h > windows.inputs.shape[1]:
            raise InvalidArgument("seasonal baseline needs horizon <= lookback")
        pred = windows.inputs[:, -h:, :]
    elif kind == "zero":
        pred = np.zeros_like(windows.targets)
    else:
        raise InvalidArgument(f"unknown baseline {kind!r}")
    diff = pred - windows.targets
    return EvalReport(dataset, kind, 0, {h: {"mse": float(np.mean(diff ** 2)),
                                              "mae": float(np.mean(np.abs(diff)))}}, variant=kind)


# ---- experiments ------------------------------------------------------------------

@dataclass
class BenchConfig:
    """What every harness needs besides the dataset: model template, training, horizons."""

    model: ModelConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    horizons: tuple[int, ...] = (96,)
    train_stride: int = 1
    workers: int = 1

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(),
                "horizons": list(self.horizons), "train_stride": self.train_stride}


def run_experiment(dataset: Dataset, bench: BenchConfig, seed: int | None = None,
                   name: str = "", model_config: ModelConfig | None = None) -> EvalReport:
    """Train one model per horizon and evaluate it on the test split."""
    seed = bench.train.seed if seed is None else seed
    template = model_config or bench.model
    report = None
    for h in bench.horizons:
        cfg = replace(template, horizon=h)
        lookback = cfg.patch.lookback if cfg.variant == "timeexpert" else cfg.segment_len * _g_segments(cfg)
        target_len = h if cfg.variant == "timeexpert" else cfg.segment_len
        model = Model.create(cfg, seed)
        train(model,
              dataset.windows("train", lookback, target_len, bench.train_stride),
              dataset.windows("val", lookback, target_len),
              replace(bench.train, seed=seed))
        r = evaluate(model, dataset.windows("test", lookback, h), name or dataset.series.name,
                     bench.workers, seed)
        r.config_digest = config_digest(template, bench.train, list(bench.horizons))
        report = r if report is None else report.merge(r)
    return report


def _g_segments(cfg: ModelConfig) -> int:
    return max(1, cfg.patch.lookback // cfg.segment_len)


@dataclass
class ComparisonTable:
    kind: str
    dataset: str
    reports: dict[str, EvalReport]
    published_reference: dict | None = None
    extra: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for arm, rep in self.reports.items():
            for h in sorted(rep.per_horizon):
                out.append({"arm": arm, "horizon": str(h), **rep.per_horizon[h]})
            out.append({"arm": arm, "horizon": "avg", **rep.average})
        return out

    def to_dict(self) -> dict:
        return {"schema_version": REPORT_SCHEMA_VERSION, "kind": self.kind, "dataset": self.dataset,
                "rows": self.rows(), "reports": {k: v.to_dict() for k, v in self.reports.items()},
                "published_reference": self.published_reference, **self.extra}

    def to_csv(self) -> str:
        return rows_to_csv(self.rows(), ["arm", "horizon", "mse", "mae"])


def ablate_attention(dataset: Dataset, bench: BenchConfig, seed: int | None = None,
                     variants: Sequence[str] = ("full", "random", "tmoe")) -> ComparisonTable:
    reports = {}
    for variant in variants:
        cfg = bench.model.with_tmoe(attention_variant=variant)
        reports[variant] = run_experiment(dataset, bench, seed, model_config=cfg)
    return ComparisonTable("attention_ablation", dataset.series.name, reports,
                           PUBLISHED_REFERENCE["attention_ablation"])


def ablate_share(dataset: Dataset, bench: BenchConfig, seed: int | None = None) -> ComparisonTable:
    reports = {
        "share": run_experiment(dataset, bench, seed, model_config=bench.model.with_tmoe(share_global=True)),
        "no_share": run_experiment(dataset, bench, seed, model_config=bench.model.with_tmoe(share_global=False)),
    }
    return ComparisonTable("share_ablation", dataset.series.name, reports,
                           PUBLISHED_REFERENCE["share_ablation_avg"])


@dataclass
class SweepResult:
    dataset: str
    rows: list[dict]
    reference: dict | None = None

    def to_dict(self) -> dict:
        return {"schema_version": REPORT_SCHEMA_VERSION, "kind": "topk_sweep", "dataset": self.dataset,
                "rows": self.rows, "reference": self.reference}

    def to_csv(self) -> str:
        return rows_to_csv(self.rows, ["k", "horizon", "mse", "mae"])


def sweep_topk(dataset: Dataset, bench: BenchConfig, k_values: Sequence[int], seed: int | None = None,
               reference_seeds: Sequence[int] = ()) -> SweepResult:
    """One (k, horizon, mse, mae) row per k and horizon.

    With ``reference_seeds``, also trains the full-attention model once per
    seed and reports its mean and std per horizon as a noise envelope.
    """
    k_values = [int(k) for k in k_values]
    if not k_values:
        raise InvalidArgument("no k values given")
    if len(set(k_values)) != len(k_values):
        raise InvalidArgument(f"duplicate k values in {k_values}")
    if min(k_values) < 1:
        raise InvalidArgument("k must be >= 1")
    rows = []
    for k in k_values:
        rep = run_experiment(dataset, bench, seed, model_config=bench.model.with_tmoe(top_k=k))
        for h in sorted(rep.per_horizon):
            rows.append({"k": k, "horizon": h, **rep.per_horizon[h]})
    reference = None
    if reference_seeds:
        full = bench.model.with_tmoe(attention_variant="full")
        runs = [run_experiment(dataset, bench, s, model_config=full) for s in reference_seeds]
        reference = {"variant": "full", "seeds": list(reference_seeds), "per_horizon": {}}
        for h in bench.horizons:
            vals = np.array([r.per_horizon[h]["mse"] for r in runs])
            reference["per_horizon"][str(h)] = {"mse_mean": float(vals.mean()),
                                                "mse_std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}
    return SweepResult(dataset.series.name, rows, reference)


# ---- anomaly robustness -------------------------------------------------------------

@dataclass
class RobustnessReport:
    model: str
    anomaly: str
    seed: int
    clean_mse: float
    corrupted_mse: float
    deviation: float
    selection_fraction: float | None  # None: not applicable (no top-k routing)
    windows: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def token_mask(point_mask: np.ndarray, patch_len: int, stride: int) -> np.ndarray:
    """``[..., L]`` point mask -> ``[..., N]``: token i overlaps a masked point."""
    length = point_mask.shape[-1]
    n = (length - patch_len) // stride + 1
    idx = np.arange(n)[:, None] * stride + np.arange(patch_len)[None, :]
    return point_mask[..., idx].any(axis=-1)


def selection_fraction(traces: Iterable, masked_tokens: np.ndarray) -> float | None:
    """Share of local top-k slots that land on masked tokens.

    ``traces`` is a flat or per-layer nested list of SelectionTrace with batch
    axis matching ``masked_tokens [B, N]``. Only rows with at least one masked
    token count. Returns None for non-routing variants.
    """
    flat: list[SelectionTrace] = []
    for t in traces:
        flat.extend(t if isinstance(t, list) else [t])
    if not flat or any(t.variant != "tmoe" for t in flat):
        return None
    masked_tokens = np.asarray(masked_tokens, dtype=bool)
    if masked_tokens.ndim == 1:
        masked_tokens = masked_tokens[None]
    rows = masked_tokens.any(axis=-1)
    if not rows.any():
        return 0.0
    total, inside = 0, 0
    for t in flat:
        sel = t.selected if t.selected.ndim == 3 else t.selected[None]
        sel = sel[rows]
        total += int(sel.sum())
        inside += int((sel & masked_tokens[rows][:, None, :]).sum())
    return inside / total if total else 0.0


def anomaly_harness(models: Mapping[str, Model], windows: WindowSet, specs: Sequence[AnomalySpec],
                    seeds: Sequence[int] = (0,), max_windows: int = 64) -> list[RobustnessReport]:
    """Forecast clean and corrupted lookbacks; one report per (model, anomaly, seed).

    ``spec.position`` is relative to the start of the lookback. Each seed
    draws its own subset of windows.
    """
    out = []
    for seed in seeds:
        n = min(max_windows, len(windows))
        idx = np.sort(Rng(seed).choice(len(windows), n))
        clean_x, target = windows.inputs[idx], windows.targets[idx]
        for spec in specs:
            corrupt_x = np.empty_like(clean_x)
            for i, x in enumerate(clean_x):
                corrupt_x[i], mask = inject_anomaly(x, spec)
            for name, model in models.items():
                clean_pred = model.predict(clean_x, target.shape[1])
                out_pred, traces = _predict_traced(model, corrupt_x, target.shape[1])
                deviation = float(np.mean((out_pred - clean_pred) ** 2))
                frac = None
                if model.config.variant == "timeexpert":
                    # [L, C] point mask -> per (window, channel) series rows
                    per_row = np.broadcast_to(mask.T[None], (n, *mask.T.shape)).reshape(-1, mask.shape[0])
                    frac = selection_fraction(traces, token_mask(per_row, model.config.patch.patch_len,
                                                                 model.config.patch.stride))
                out.append(RobustnessReport(
                    model=name, anomaly=spec.kind, seed=seed,
                    clean_mse=float(np.mean((clean_pred - target) ** 2)),
                    corrupted_mse=float(np.mean((out_pred - target) ** 2)),
                    deviation=deviation, selection_fraction=frac, windows=n))
    return out


def _predict_traced(model: Model, x: np.ndarray, horizon: int):
    if model.config.variant == "timeexpert":
        pred, traces = model.predict_with_traces(x)
        return pred.data, traces
    return model.predict(x, horizon), []


# ---- lag correlation ------------------------------------------------------------------

def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, np.float64) - np.mean(a)
    b = np.asarray(b, np.float64) - np.mean(b)
    den = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / den) if den > 0 else float("nan")


def lag_correlation_map(series: Series | Dataset | np.ndarray, patch_len: int, lookback: int = 96,
                        horizon: int = 96, stride: int = 1, max_windows: int | None = None) -> np.ndarray:
    """Mean Pearson correlation between input patch i and output patch j.

    Patches tile the lookback and horizon without overlap; entry (i, j)
    averages over windows and channels, skipping constant patches.
    """
    if isinstance(series, Dataset):
        series = series.series
    values = series.values if isinstance(series, Series) else np.asarray(series, np.float64)
    if patch_len < 2 or patch_len > min(lookback, horizon):
        raise InvalidArgument(f"patch_len {patch_len} must be in [2, min(lookback, horizon)]")
    w = make_windows(values, None, lookback, horizon, stride)
    if max_windows is not None and len(w) > max_windows:
        w = w[np.linspace(0, len(w) - 1, max_windows).astype(int)]
    ni, nj = lookback // patch_len, horizon // patch_len
    # [W, C, n, P]
    xin = w.inputs[:, lookback - ni * patch_len:, :].transpose(0, 2, 1).reshape(len(w), -1, ni, patch_len)
    xout = w.targets[:, : nj * patch_len, :].transpose(0, 2, 1).reshape(len(w), -1, nj, patch_len)

    def unit(p):
        c = p - p.mean(axis=-1, keepdims=True)
        norm = np.sqrt((c * c).sum(axis=-1, keepdims=True))
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(norm > 1e-12, c / norm, np.nan)

    corr = np.einsum("wcip,wcjp->wcij", unit(xin), unit(xout))
    with np.errstate(invalid="ignore"):
        out = np.nanmean(corr.reshape(-1, ni, nj), axis=0)
    return np.clip(out, -1.0, 1.0)


# ---- serialization ---------------------------------------------------------------

def rows_to_csv(rows: Sequence[Mapping], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("N/A" if r.get(k) is None else r.get(k)) for k in columns})
    return buf.getvalue()


def robustness_csv(reports: Sequence[RobustnessReport]) -> str:
    cols = ["model", "anomaly", "seed", "clean_mse", "corrupted_mse", "deviation", "selection_fraction", "windows"]
    return rows_to_csv([r.to_dict() for r in reports], cols)


def write_report(obj, out_dir: str, stem: str) -> tuple[str, str | None]:
    """Write ``<stem>.json`` (and ``<stem>.csv`` when the object has rows)."""
    os.makedirs(out_dir, exist_ok=True)
    payload = obj.to_dict() if hasattr(obj, "to_dict") else obj
    if isinstance(payload, dict):
        payload.setdefault("schema_version", REPORT_SCHEMA_VERSION)
    json_path = os.path.join(out_dir, f"{stem}.json")
    with open(json_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    csv_path = None
    if hasattr(obj, "to_csv"):
        csv_path = os.path.join(out_dir, f"{stem}.csv")
        with open(csv_path, "w") as fh:
            fh.write(obj.to_csv())
    return json_path, csv_path
