"""Masked metrics, the historical-inertia baseline, channel-independence probe,
distribution-shift tables and epoch timing summaries."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datapipe import Batch, WindowSet, batch_iterator
from .training import null_mask

HORIZONS = (3, 6, 12)


@dataclass
class MetricRow:
    mae: float
    rmse: float
    mape: float  # percent
    count: int


@dataclass
class MetricsReport:
    split: str
    rows: dict[str, MetricRow]  # "horizon_3", ..., "average"
    n_samples: int
    n_masked: int

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_masked": self.n_masked,
            **{k: {"mae": r.mae, "rmse": r.rmse, "mape": r.mape, "count": r.count} for k, r in self.rows.items()},
        }

    @property
    def average(self) -> MetricRow:
        return self.rows["average"]


def _row(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> MetricRow:
    n = int(mask.sum())
    if n == 0:
        return MetricRow(0.0, 0.0, 0.0, 0)
    err = (pred - target)[mask]
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err * err).mean()))
    mape = float((np.abs(err) / np.abs(target[mask])).mean() * 100.0)
    return MetricRow(mae, rmse, mape, n)


def metrics(pred: np.ndarray, target: np.ndarray, null_value: float = 0.0, split: str = "",
            horizons=HORIZONS) -> MetricsReport:
    """MAE/RMSE/MAPE per horizon (step ``h - 1`` only) and pooled over all steps.

    Entries whose target equals ``null_value`` (within 1e-5) are excluded
    from all three metrics. Arrays are ``(samples, nodes, steps)``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"pred {pred.shape} vs target {target.shape}")
    mask = null_mask(target, null_value)
    rows = {}
    for h in horizons:
        if h <= pred.shape[-1]:
            rows[f"horizon_{h}"] = _row(pred[..., h - 1], target[..., h - 1], mask[..., h - 1])
    rows["average"] = _row(pred, target, mask)
    return MetricsReport(split, rows, pred.shape[0], int((~mask).sum()))


def hi_baseline(batch: Batch) -> np.ndarray:
    """Copy the last ``Q`` observed values (raw units) as the forecast."""
    T = batch.x_raw.shape[-1]
    Q = batch.y.shape[-1]
    if T < Q:
        raise ValueError(f"historical inertia needs T >= Q, got T={T}, Q={Q}")
    return batch.x_raw[..., T - Q:].copy()


def collect_predictions(predict, samples: WindowSet, batch_size: int = 256):
    preds, targets = [], []
    for batch in batch_iterator(samples, batch_size):
        preds.append(predict(batch))
        targets.append(batch.y)
    if not preds:
        return np.zeros((0,)), np.zeros((0,))
    return np.concatenate(preds), np.concatenate(targets)


def evaluate(predict, samples: WindowSet, split: str, null_value: float = 0.0,
             batch_size: int = 256) -> MetricsReport:
    pred, target = collect_predictions(predict, samples, batch_size)
    return metrics(pred, target, null_value, split)


def evaluate_splits(predict, splits, null_value: float = 0.0) -> dict[str, MetricsReport]:
    return {name: evaluate(predict, ws, name, null_value) for name, ws in splits.items() if len(ws)}


def write_reports(reports: dict[str, MetricsReport], json_path, csv_path=None) -> None:
    Path(json_path).write_text(json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=2, sort_keys=True))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["split", "horizon", "mae", "rmse", "mape", "count"])
            for split, rep in reports.items():
                for h, r in rep.rows.items():
                    w.writerow([split, h, repr(r.mae), repr(r.rmse), repr(r.mape), r.count])


# channel-independence probe ---------------------------------------------------

@dataclass
class ProbeResult:
    node: int
    seed: int
    independent: bool
    max_abs_deviation: float

    @property
    def verdict(self) -> str:
        return "independent" if self.independent else "dependent"


def ci_probe(model, batch: Batch, node_index: int, perturbation_seed: int) -> ProbeResult:
    """Replace every other node's history with noise and compare node ``node_index``'s forecast.

    The model runs in eval mode; ``independent`` means bitwise equality.
    """
    base = model.forward(batch.x, batch.td, batch.dw, "eval").data[:, node_index]
    rng = np.random.default_rng(perturbation_seed)
    x = np.array(batch.x, copy=True)
    others = np.arange(x.shape[1]) != node_index
    x[:, others] = rng.standard_normal(x[:, others].shape) * 3.0
    probe = model.forward(x, batch.td, batch.dw, "eval").data[:, node_index]
    same = np.array_equal(base, probe)
    dev = 0.0 if same else float(np.max(np.abs(base - probe)))
    return ProbeResult(node_index, perturbation_seed, same, dev)


# distribution shift -------------------------------------------------------------

@dataclass
class DistributionReport:
    edges: np.ndarray
    counts: dict[str, np.ndarray]
    stats: dict[str, dict[str, float]] = field(default_factory=dict)

    def mean_gap(self, a: str = "train", b: str = "test") -> float:
        return self.stats[b]["mean"] - self.stats[a]["mean"]

    def write_csv(self, path) -> None:
        names = list(self.counts)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left", "bin_right", *[f"count_{n}" for n in names]])
            for i in range(len(self.edges) - 1):
                w.writerow([repr(float(self.edges[i])), repr(float(self.edges[i + 1])),
                            *[int(self.counts[n][i]) for n in names]])

    def write_stats_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["split", "mean", "std", "mean_gap_vs_train"])
            for n, s in self.stats.items():
                w.writerow([n, repr(s["mean"]), repr(s["std"]), repr(s["mean"] - self.stats[next(iter(self.stats))]["mean"])])


def split_steps(n_steps: int, fractions=(0.7, 0.1, 0.2)) -> dict[str, slice]:
    a = int(round(n_steps * fractions[0]))
    b = a + int(round(n_steps * fractions[1]))
    return {"train": slice(0, a), "val": slice(a, b), "test": slice(b, n_steps)}


def distribution_report(normalized: np.ndarray, splits: dict[str, slice] | None = None,
                        bins: int = 50) -> DistributionReport:
    """Histograms of normalized values per chronological split over a shared range."""
    normalized = np.asarray(normalized, dtype=np.float64)
    splits = splits or split_steps(normalized.shape[0])
    parts = {k: normalized[s].ravel() for k, s in splits.items()}
    pooled = np.concatenate([p for p in parts.values() if p.size])
    lo, hi = float(pooled.min()), float(pooled.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    counts = {k: np.histogram(p, bins=edges)[0] for k, p in parts.items()}
    stats = {k: {"mean": float(p.mean()) if p.size else float("nan"),
                 "std": float(p.std()) if p.size else float("nan")} for k, p in parts.items()}
    return DistributionReport(edges, counts, stats)


# timing -----------------------------------------------------------------------------

@dataclass
class TimingSummary:
    name: str
    seconds: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.seconds)) if self.seconds else 0.0


def normalize_timings(runs: list[TimingSummary]) -> dict[str, float]:
    """Mean seconds/epoch of each run divided by the slowest run's mean."""
    if not runs:
        return {}
    top = max(r.mean for r in runs)
    return {r.name: (r.mean / top if top > 0 else 1.0) for r in runs}


def write_timing_csv(path, runs: list[TimingSummary]) -> None:
    norm = normalize_timings(runs)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "epoch", "seconds"])
        for r in runs:
            for e, s in enumerate(r.seconds):
                w.writerow([r.name, e, f"{s:.6f}"])
    with open(Path(path).with_name(Path(path).stem + "_summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "mean_seconds", "normalized"])
        for r in runs:
            w.writerow([r.name, f"{r.mean:.6f}", f"{norm[r.name]:.6f}"])


def epoch_timer(result, name: str = "run") -> TimingSummary:
    """Per-epoch wall-clock series of a finished fit."""
    return TimingSummary(name, list(result.seconds_per_epoch()))
