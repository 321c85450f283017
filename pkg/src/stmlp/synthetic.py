"""Synthetic traffic-like series for smoke tests and demos."""

from __future__ import annotations

from datetime import datetime
from pathlib import Path

import numpy as np

from .datapipe import RawSeries


def sinusoid_series(n_nodes: int = 8, n_steps: int = 2000, interval_minutes: int = 5,
                    start: str = "2016-07-04T00:00:00", noise: float = 0.0, seed: int = 0) -> RawSeries:
    """Daily sinusoid with a per-node phase and a per-node offset.

    Values stay strictly positive so none of them are masked as missing.
    """
    rng = np.random.default_rng(seed)
    k = 1440 // interval_minutes
    t = np.arange(n_steps)[:, None]
    node = np.arange(n_nodes)[None, :]
    phase = 2 * np.pi * node / max(n_nodes, 1)
    values = 2.0 + node + np.sin(2 * np.pi * t / k + phase)
    if noise:
        values = values + noise * rng.standard_normal(values.shape)
    return RawSeries(values.astype(np.float64), datetime.fromisoformat(start), interval_minutes)


def ring_edges(n_nodes: int, distance: float = 1.0) -> list[tuple[int, int, float]]:
    return [(i, (i + 1) % n_nodes, distance * (1 + 0.5 * (i % 3))) for i in range(n_nodes)]


def write_dataset(directory: str | Path, series: RawSeries, edges) -> dict[str, str]:
    """Write ``data.csv`` and ``edges.csv`` and return the matching config keys."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.savetxt(d / "data.csv", series.values, delimiter=",", fmt="%.17g")
    with open(d / "edges.csv", "w") as fh:
        fh.write("from,to,distance\n")
        for i, j, w in edges:
            fh.write(f"{i},{j},{w!r}\n")
    return {
        "dataset.data_path": str(d / "data.csv"),
        "dataset.graph_path": str(d / "edges.csv"),
        "dataset.start_timestamp": series.start_timestamp.isoformat(),
        "dataset.interval_minutes": str(series.interval_minutes),
        "dataset.n_nodes": str(series.n_nodes),
    }


def main(argv=None) -> int:
    import argparse

    p = argparse.ArgumentParser(prog="python -m stmlp.synthetic",
                                description="write a small synthetic dataset and a matching run config")
    p.add_argument("out_dir")
    p.add_argument("--nodes", type=int, default=8)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    out = Path(args.out_dir)
    keys = write_dataset(out, sinusoid_series(args.nodes, args.steps, noise=args.noise, seed=args.seed),
                         ring_edges(args.nodes))
    keys["out_dir"] = str(out / "run")
    (out / "run.conf").write_text("".join(f"{k} = {v}\n" for k, v in keys.items()))
    print(out / "run.conf")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
