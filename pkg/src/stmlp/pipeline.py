"""End-to-end runs: data preparation, training runs, ablation grid and timing bench."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import plotting
from .config import RunConfig, require_dataset
from .datapipe import Calendar, RawSeries, Splits, build_calendar, load_series, window_and_split
from .evaluation import (MetricsReport, TimingSummary, distribution_report, epoch_timer, evaluate_splits,
                         hi_baseline, normalize_timings, split_steps, write_reports, write_timing_csv)
from .graphprep import load_graph
from .model import ConfigError, STMLP, variant_name
from .training import FitResult, fit

log = logging.getLogger(__name__)


@dataclass
class Prepared:
    series: RawSeries
    calendar: Calendar
    splits: Splits
    graph: np.ndarray | None


def prepare(cfg: RunConfig, need_graph: bool = True) -> Prepared:
    """Load series and graph and cut the three window sets."""
    require_dataset(cfg, graph=need_graph)
    ds = cfg.dataset
    series = load_series(ds.data_path, ds.start_timestamp, ds.interval_minutes, ds.n_nodes or None)
    calendar = build_calendar(series)
    mc = cfg.model_config(series.n_nodes)
    splits = window_and_split(series, calendar, mc.T, mc.Q, ds.fractions)
    graph = None
    if need_graph and ds.graph_format != "none" and ds.graph_path:
        graph = load_graph(ds.graph_path, series.n_nodes, ds.graph_format, ds.graph_kappa)
    return Prepared(series, calendar, splits, graph)


def build_model(cfg: RunConfig, prep: Prepared, **model_overrides) -> STMLP:
    mc = cfg.model_config(prep.series.n_nodes)
    for k, v in model_overrides.items():
        setattr(mc, k, v)
    mc.validate()
    if mc.use_sp and prep.graph is None:
        raise ConfigError("the predefined-graph embedding needs dataset.graph_path (or set model.use_sp=false)")
    model = STMLP(mc, prep.graph, seed=cfg.seed)
    model.normalizer_mean = prep.splits.normalizer.mean
    model.normalizer_std = prep.splits.normalizer.std
    return model


def train_run(cfg: RunConfig, out_dir: str | Path, prep: Prepared | None = None,
              figures: bool = True, **model_overrides) -> tuple[FitResult, dict[str, MetricsReport]]:
    """Train one model and write its full run directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prep = prep or prepare(cfg)
    model = build_model(cfg, prep, **model_overrides)
    (out / "config.txt").write_text(cfg.to_text() + "".join(f"# override model.{k}={v}\n"
                                                           for k, v in model_overrides.items()))
    (out / "seed.txt").write_text(f"{cfg.seed}\n")
    (out / "model.txt").write_text(model.config.to_text())
    result = fit(model, prep.splits, cfg.train, out, progress=True)
    reports = evaluate_splits(result.model.predict, prep.splits, cfg.train.null_value)
    write_reports(reports, out / "metrics.json", out / "metrics.csv")
    if figures and result.history:
        plotting.plot_history(result.history, out / "history.png")
        plotting.plot_horizons(reports, out / "horizons.png")
    return result, reports


# ablation ------------------------------------------------------------------------

def ablation_grid() -> list[tuple[str, dict]]:
    """Embedding removals x {cascaded, parallel} plus the node-mixing variant."""
    grid = []
    for structure in ("cascaded", "parallel_concat"):
        for removed in ("none", "td", "dw", "sp", "su"):
            kw = {"structure": structure}
            if removed != "none":
                kw["use_" + removed] = False
            grid.append((removed, kw))
    grid.append(("none", {"structure": "cascaded", "channel": "cm"}))
    return grid


ABLATION_FIELDS = ["variant", "structure", "channel", "removed", "stage", "mae", "rmse", "mape"]


def run_ablation(cfg: RunConfig, out_dir: str | Path, prep: Prepared | None = None) -> list[dict]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prep = prep or prepare(cfg)
    rows, summary = [], []
    for removed, kw in ablation_grid():
        mc = cfg.model_config(prep.series.n_nodes)
        for k, v in kw.items():
            setattr(mc, k, v)
        name = variant_name(mc)
        run_dir = out / name.replace("/", "__")
        _, reports = train_run(cfg, run_dir, prep, figures=False, **kw)
        structure = "cascaded" if kw["structure"] == "cascaded" else "parallel"
        channel = kw.get("channel", "ci")
        for stage, rep in reports.items():
            a = rep.average
            rows.append({"variant": name, "structure": structure, "channel": channel, "removed": removed,
                         "stage": stage, "mae": a.mae, "rmse": a.rmse, "mape": a.mape})
        summary.append({"variant": name, "structure": structure, "channel": channel, "removed": removed,
                        **{f"{s}_mae": reports[s].average.mae if s in reports else float("nan")
                           for s in ("train", "val", "test")}})
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
        w.writeheader()
        w.writerows(rows)
    (out / "ablation_summary.json").write_text(json.dumps(summary, indent=2))
    plotting.plot_ablation(summary, out / "ablation.png")
    return summary


# timing --------------------------------------------------------------------------

BENCH_VARIANTS = {
    "st-mlp": {},
    "parallel": {"structure": "parallel_concat"},
    "cm": {"channel": "cm"},
}


def run_bench(cfg: RunConfig, out_dir: str | Path, epochs: int = 3, variants=("st-mlp",),
              prep: Prepared | None = None) -> dict[str, float]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prep = prep or prepare(cfg)
    cfg.train.num_epochs = epochs
    runs: list[TimingSummary] = []
    for name in variants:
        if name not in BENCH_VARIANTS:
            raise ConfigError(f"unknown bench variant {name!r}; choose from {sorted(BENCH_VARIANTS)}")
        model = build_model(cfg, prep, **BENCH_VARIANTS[name])
        result = fit(model, prep.splits, cfg.train)
        runs.append(epoch_timer(result, name))
    write_timing_csv(out / "timing.csv", runs)
    normalized = normalize_timings(runs)
    plotting.plot_timings(normalized, out / "timing.png")
    return normalized


# data report ---------------------------------------------------------------------

def run_report(cfg: RunConfig, out_dir: str | Path, bins: int = 50, run_dir: str | Path | None = None) -> dict:
    """Distribution-shift histograms, HI baseline metrics and (optionally) run figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prep = prepare(cfg, need_graph=False)
    normalized = prep.splits.normalizer.apply(prep.series.values)
    dist = distribution_report(normalized, split_steps(prep.series.n_steps, cfg.dataset.fractions), bins)
    dist.write_csv(out / "distribution.csv")
    dist.write_stats_csv(out / "distribution_stats.csv")
    plotting.plot_distribution(dist, out / "distribution.png")
    hi = evaluate_splits(hi_baseline, prep.splits, cfg.train.null_value)
    write_reports(hi, out / "hi_metrics.json", out / "hi_metrics.csv")
    plotting.plot_horizons(hi, out / "hi_horizons.png")
    if run_dir is not None:
        from .training import EpochRecord

        hist_path = Path(run_dir) / "history.csv"
        with open(hist_path) as fh:
            hist = [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_mae"]), float(r["lr"]),
                                float(r["seconds"]), 0) for r in csv.DictReader(fh)]
        if hist:
            plotting.plot_history(hist, out / "history.png")
    return {"hi": hi, "distribution": dist}
