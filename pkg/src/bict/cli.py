"""Command-line experiment runner.

Subcommands map one-to-one onto the experiment suites: gen-data, run,
sweep-lambda, sweep-dim, sequential, hot-refresh. Every command writes a
fully resolved config snapshot next to its outputs; re-running from that
snapshot reproduces every output file bit-exactly. Exit code is 0 only
if all stages succeeded, otherwise a machine-readable error JSON goes to
stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
from pathlib import Path

import numpy as np

from . import experiments, store
from .config import ExperimentConfig, load_config, snapshot
from .data import split
from .retrieval import MetricReport

SNAPSHOT_NAME = "config_snapshot.cfg"


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    return str(v)


def write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_json(path, payload) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _prepare_out(args) -> Path:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise FileExistsError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_config(args) -> ExperimentConfig:
    overrides: dict[str, object] = {}
    if args.seed is not None:
        overrides["run.seeds"] = [args.seed]
    cfg = load_config(args.config, overrides=overrides)
    return cfg


def _write_snapshot(out: Path, cfg: ExperimentConfig) -> None:
    (out / SNAPSHOT_NAME).write_text(snapshot(cfg))


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> None:
    cfg = _resolve_config(args)
    out = _prepare_out(args)
    ds = experiments.build_dataset(cfg)
    eval_set = experiments.build_eval_set(cfg, ds)
    store.save_dataset(out, ds, eval_set)
    _write_snapshot(out, cfg)


def cmd_run(args) -> None:
    cfg = _resolve_config(args)
    out = _prepare_out(args)
    ds = experiments.build_dataset(cfg)
    eval_set = experiments.build_eval_set(cfg, ds)
    rows = []
    for seed in cfg.run.seeds:
        res = experiments.run_pipeline(cfg, seed, ds=ds, eval_set=eval_set, log_dir=out)
        report = res.report.to_dict()
        report["scenario"] = cfg.run.scenario
        write_json(out / f"report_seed{seed}.json", report)
        store.save_generation(out, res.old_gen, tag=f"old_seed{seed}")
        store.save_generation(out, res.new_gen, tag=f"new_seed{seed}")
        rows.append([cfg.run.scenario, seed, res.report.m_o2o, res.report.m_bct,
                     res.report.m_fct, res.report.m_n2n])
    med = [statistics.median(r[i] for r in rows) for i in range(2, 6)]
    rows.append([cfg.run.scenario, "median"] + med)
    write_csv(out / "summary.csv",
              ["scenario", "seed", "m_o2o", "m_bct", "m_fct", "m_n2n"], rows)
    _write_snapshot(out, cfg)


def cmd_sweep_lambda(args) -> None:
    cfg = _resolve_config(args)
    out = _prepare_out(args)
    rows, summary = experiments.lambda_sweep(cfg, jobs=args.jobs)
    write_csv(out / "sweep.csv",
              ["lambda", "seed", "psi_dim", "m_o2o", "m_bct", "m_fct", "m_n2n"],
              [[r["lambda"], r["seed"], r["psi_dim"], r["m_o2o"], r["m_bct"],
                r["m_fct"], r["m_n2n"]] for r in rows])
    med_rows = []
    for lam in cfg.sweep.lambdas:
        for d in cfg.sweep.psi_dims:
            med_rows.append([lam, d, summary["median_m_bct"][repr(lam)],
                             summary["median_m_fct"][str(d)][repr(lam)]])
    write_csv(out / "summary.csv",
              ["lambda", "psi_dim", "median_m_bct", "median_m_fct"], med_rows)
    write_json(out / "summary.json", summary)
    _write_snapshot(out, cfg)


def cmd_sweep_dim(args) -> None:
    cfg = _resolve_config(args)
    out = _prepare_out(args)
    rows, summary = experiments.dim_sweep(cfg, jobs=args.jobs)
    write_csv(out / "sweep.csv",
              ["dim", "seed", "m_o2o", "m_bct", "m_fct", "fct_gain", "m_n2n"],
              [[r["dim"], r["seed"], r["m_o2o"], r["m_bct"], r["m_fct"],
                r["fct_gain"], r["m_n2n"]] for r in rows])
    med_rows = [[d, summary["median_m_bct"], summary["median_m_fct"][str(d)],
                 summary["median_m_fct"][str(d)] - summary["median_m_bct"]]
                for d in cfg.sweep.dims]
    write_csv(out / "summary.csv",
              ["dim", "median_m_bct", "median_m_fct", "median_fct_gain"], med_rows)
    write_json(out / "summary.json", summary)
    _write_snapshot(out, cfg)


def cmd_sequential(args) -> None:
    cfg = _resolve_config(args)
    out = _prepare_out(args)
    rows = experiments.sequential_run(cfg, jobs=args.jobs)
    n_gens = len(cfg.sequential.fractions) - 1
    header = ["variant", "seed", "m_o2o"]
    for i in range(1, n_gens + 1):
        header += [f"gen{i}_m_bct", f"gen{i}_m_fct", f"gen{i}_m_n2n"]
    out_rows = []
    for r in rows:
        out_rows.append([r[h] if h in r else None for h in header])
        if r["variant"] == "bict-mom":
            for gen_idx, feats in enumerate(r["_gallery_history"]):
                store.write_embedding_store(
                    out / f"gallery_seed{r['seed']}_gen{gen_idx}.bict",
                    np.arange(feats.shape[0]), r["_gallery_labels"], feats,
                    generation=gen_idx)
    for variant in cfg.sequential.variants:
        med_row: list = [variant, "median"]
        vrows = [r for r in rows if r["variant"] == variant]
        for h in header[2:]:
            vals = [r[h] for r in vrows if r.get(h) is not None]
            med_row.append(statistics.median(vals) if vals else None)
        out_rows.append(med_row)
    write_csv(out / "results.csv", header, out_rows)
    _write_snapshot(out, cfg)


def cmd_hot_refresh(args) -> None:
    cfg = _resolve_config(args)
    out = _prepare_out(args)
    outcome = experiments.hot_refresh_run(cfg, log_dir=out)
    report: MetricReport = outcome["result"].report
    write_json(out / "report.json", report.to_dict())
    for order_seed, curve in outcome["curves"].items():
        rows = [[-1.0, report.m_o2o]] + [[f, m] for f, m in curve]
        write_csv(out / f"timeline_seed{order_seed}.csv", ["fraction", "map"], rows)
    _write_snapshot(out, cfg)


# -------------------------------------------------------------------- main

_COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic dataset and eval stores"),
    "run": (cmd_run, "run one upgrade occasion and report all notations"),
    "sweep-lambda": (cmd_sweep_lambda, "sweep the compatibility loss weight"),
    "sweep-dim": (cmd_sweep_dim, "ablate the upgrade module hidden dimension"),
    "sequential": (cmd_sequential, "sequential multi-generation upgrades"),
    "hot-refresh": (cmd_hot_refresh, "progressive gallery backfill timeline"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bict",
        description="Desk-scale bidirectional compatible training experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (fn, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="flat key-value config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override run.seeds with a single seed")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel worker processes for sweep points")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true",
                       help="overwrite an existing non-empty output directory")
        p.set_defaults(handler=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.handler(args)
    except Exception as exc:  # noqa: BLE001 - single reporting point
        error = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(error, sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
