"""Command-line entry point: ``stmlp {ingest,train,eval,ablate,probe-ci,bench,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .config import load_run_config
from .datapipe import DataError, write_stml
from .graphprep import GraphError, PowerIterationError
from .model import ConfigError, load_checkpoint
from .training import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("stmlp")


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="key=value run configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                   help="override a config key (repeatable)")
    p.add_argument("--out", help="output directory (default: out_dir from config)")
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--threads", type=int, help="BLAS threads; 0 = deterministic single-threaded")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stmlp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="convert the series to STML binary and summarize it")
    _common(p)

    p = sub.add_parser("train", help="train one model and write a run directory")
    _common(p)

    p = sub.add_parser("eval", help="recompute metrics from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("probe-ci", help="channel-independence probe on test samples")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--probes", type=int, default=100)

    p = sub.add_parser("ablate", help="train and evaluate the variant grid")
    _common(p)

    p = sub.add_parser("bench", help="per-epoch wall-clock timings")
    _common(p)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--variants", default="st-mlp", help="comma-separated: st-mlp,parallel,cm")

    p = sub.add_parser("report", help="distribution-shift histograms, HI baseline, run figures")
    _common(p)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--run", help="run directory whose history to plot")
    return parser


def _resolve(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    if args.out is not None:
        overrides.append(f"out_dir={args.out}")
    if args.config and not Path(args.config).exists():
        raise ConfigError(f"config file not found: {args.config}")
    return load_run_config(args.config, overrides)


def _thread_limit(threads: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=1 if threads == 0 else threads)


def _print_reports(reports) -> None:
    for split, rep in reports.items():
        a = rep.average
        print(f"{split:>5}  MAE {a.mae:.4f}  RMSE {a.rmse:.4f}  MAPE {a.mape:.2f}%")


def cmd_ingest(cfg) -> int:
    from .pipeline import prepare

    prep = prepare(cfg, need_graph=False)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_stml(out / "series.stml", prep.series.values)
    s = prep.splits
    summary = {"n_steps": prep.series.n_steps, "n_nodes": prep.series.n_nodes,
               "zero_entries": int((prep.series.values == 0).sum()),
               "windows": {k: len(v) for k, v in s.items()},
               "normalizer": {"mean": s.normalizer.mean, "std": s.normalizer.std}}
    (out / "ingest.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))
    return EXIT_OK


def cmd_train(cfg) -> int:
    from .pipeline import train_run

    out = Path(cfg.out_dir)
    result, reports = train_run(cfg, out)
    dims = result.model.dims()
    print(f"d_t={dims['d_t']} d_s={dims['d_s']} d_st={dims['d_st']} d={dims['d']} "
          f"head {dims['head_in']}->{dims['head_out']}  params={result.model.n_parameters()}")
    _print_reports(reports)
    print(f"best epoch {result.best_epoch}  val MAE {result.best_val_mae:.4f}  -> {out}")
    return EXIT_OK


def _load_for_checkpoint(cfg, checkpoint):
    from .pipeline import prepare

    model = load_checkpoint(checkpoint)
    prep = prepare(cfg, need_graph=False)
    if prep.series.n_nodes != model.config.n_nodes:
        raise DataError(f"checkpoint has {model.config.n_nodes} nodes, data has {prep.series.n_nodes}")
    return model, prep


def cmd_eval(cfg, checkpoint) -> int:
    from .evaluation import evaluate_splits, write_reports

    model, prep = _load_for_checkpoint(cfg, checkpoint)
    reports = evaluate_splits(model.predict, prep.splits, cfg.train.null_value)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_reports(reports, out / "eval_metrics.json", out / "eval_metrics.csv")
    _print_reports(reports)
    return EXIT_OK


def cmd_probe_ci(cfg, checkpoint, probes: int) -> int:
    from .evaluation import ci_probe

    model, prep = _load_for_checkpoint(cfg, checkpoint)
    test = prep.splits.test if len(prep.splits.test) else prep.splits.train
    rng = np.random.default_rng(cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_dep = 0
    with open(out / "probe_ci.csv", "w") as fh:
        fh.write("probe,sample,node,seed,verdict,max_abs_deviation\n")
        for k in range(probes):
            sample = int(rng.integers(len(test)))
            node = int(rng.integers(model.config.n_nodes))
            res = ci_probe(model, test.gather([sample]), node, perturbation_seed=cfg.seed * 100003 + k)
            n_dep += not res.independent
            fh.write(f"{k},{sample},{node},{res.seed},{res.verdict},{res.max_abs_deviation!r}\n")
            print(f"probe {k:3d} sample {sample} node {node}: {res.verdict} (deviation {res.max_abs_deviation:g})")
    print(f"{probes - n_dep}/{probes} independent")
    return EXIT_OK


def cmd_ablate(cfg) -> int:
    from .pipeline import run_ablation

    summary = run_ablation(cfg, cfg.out_dir)
    for row in summary:
        print(f"{row['variant']:<32} train {row['train_mae']:.4f}  val {row['val_mae']:.4f}  test {row['test_mae']:.4f}")
    return EXIT_OK


def cmd_bench(cfg, epochs: int, variants: str) -> int:
    from .pipeline import run_bench

    norm = run_bench(cfg, cfg.out_dir, epochs, [v.strip() for v in variants.split(",") if v.strip()])
    for name, v in norm.items():
        print(f"{name:<10} normalized {v:.3f}")
    return EXIT_OK


def cmd_report(cfg, bins: int, run_dir) -> int:
    from .pipeline import run_report

    res = run_report(cfg, cfg.out_dir, bins, run_dir)
    dist = res["distribution"]
    for split, s in dist.stats.items():
        print(f"{split:>5}  mean {s['mean']:+.4f}  std {s['std']:.4f}")
    print(f"train->test mean gap {dist.mean_gap():+.4f}")
    _print_reports(res["hi"])
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _resolve(args)
        with _thread_limit(cfg.threads):
            if args.command == "ingest":
                return cmd_ingest(cfg)
            if args.command == "train":
                return cmd_train(cfg)
            if args.command == "eval":
                return cmd_eval(cfg, args.checkpoint)
            if args.command == "probe-ci":
                return cmd_probe_ci(cfg, args.checkpoint, args.probes)
            if args.command == "ablate":
                return cmd_ablate(cfg)
            if args.command == "bench":
                return cmd_bench(cfg, args.epochs, args.variants)
            if args.command == "report":
                return cmd_report(cfg, args.bins, args.run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, GraphError, PowerIterationError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
