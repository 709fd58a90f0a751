"""Experiment pipelines binding data, models, training and evaluation:
single upgrade occasions, lambda sweeps, hidden-dimension ablations,
sequential upgrades and hot-refresh timelines.

Sweep points run per-seed as independent worker tasks (processes when
jobs > 1); each task re-derives everything from the resolved config
snapshot, so results are identical at any parallelism level.
"""

from __future__ import annotations

import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config, snapshot
from .data import EvalSet, SyntheticDataset, generate, make_eval_set, split
from .losses import LossConfig
from .models import EncoderConfig, ModelGeneration, UpgradeConfig, UpgradeModule
from .retrieval import Gallery, MetricReport, evaluate_notations, hot_refresh, map_at_k
from .training import TrainConfig, derive_seed, run_sequence, train_bct, train_fct
from .training import GenerationSpec, SequentialConfig


# ------------------------------------------------------------- building

def build_dataset(cfg: ExperimentConfig) -> SyntheticDataset:
    d = cfg.data
    return generate(d.num_classes, d.samples_per_class, d.input_dim, d.noise_sigma, d.seed)


def build_eval_set(cfg: ExperimentConfig, ds: SyntheticDataset) -> EvalSet:
    e = cfg.eval
    return make_eval_set(ds.prototypes, e.num_queries, e.gallery_per_class,
                         e.noise_sigma, e.seed)


def encoder_config(cfg: ExperimentConfig, which: str) -> EncoderConfig:
    width = cfg.model.old_hidden_width if which == "old" else cfg.model.new_hidden_width
    return EncoderConfig(input_dim=cfg.data.input_dim,
                         embedding_dim=cfg.model.embedding_dim,
                         hidden_width=width, num_hidden=cfg.model.num_hidden)


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(epochs=t.epochs, warmup_epochs=t.warmup_epochs,
                       batch_size=t.batch_size, base_lr=t.base_lr,
                       momentum=t.momentum, weight_decay=t.weight_decay)


def psi_train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(epochs=t.epochs, warmup_epochs=t.warmup_epochs,
                       batch_size=t.batch_size, base_lr=t.psi_base_lr,
                       momentum=t.momentum, weight_decay=t.weight_decay)


def loss_config(cfg: ExperimentConfig, lam: float | None = None,
                old: bool = False) -> LossConfig:
    ls = cfg.loss
    return LossConfig(lambda_=0.0 if old else (ls.lambda_ if lam is None else lam),
                      comp_kind=ls.comp_kind, tau=ls.tau, s=ls.s,
                      m=ls.old_m if old else ls.m)


def psi_config(cfg: ExperimentConfig, hidden: int | None = None) -> UpgradeConfig:
    return UpgradeConfig(in_dim=cfg.model.embedding_dim, out_dim=cfg.model.embedding_dim,
                         hidden_dim=cfg.psi.hidden_dim if hidden is None else hidden,
                         depth=cfg.psi.depth)


# -------------------------------------------------------------- pipeline

@dataclass
class PipelineResult:
    old_gen: ModelGeneration
    new_gen: ModelGeneration
    psi: UpgradeModule | None
    report: MetricReport


def train_old_generation(cfg: ExperimentConfig, ds: SyntheticDataset, seed: int,
                         log_csv=None) -> ModelGeneration:
    old_alloc = split(ds, cfg.run.split_mode, cfg.run.old_fraction)
    return train_bct(old_alloc, None, encoder_config(cfg, "old"),
                     loss_config(cfg, old=True), train_config(cfg),
                     seed=derive_seed(seed, "old"), index=0, log_csv=log_csv)


def run_pipeline(cfg: ExperimentConfig, seed: int, *, lam: float | None = None,
                 psi_hidden: int | None = None, old_gen: ModelGeneration | None = None,
                 new_gen: ModelGeneration | None = None,
                 ds: SyntheticDataset | None = None, eval_set: EvalSet | None = None,
                 want_psi: bool = True, log_dir=None) -> PipelineResult:
    """One full upgrade occasion: old model, backward-compatible new
    model, upgrade module, and the four-notation report."""
    ds = build_dataset(cfg) if ds is None else ds
    eval_set = build_eval_set(cfg, ds) if eval_set is None else eval_set
    logs = {}
    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        logs = {name: log_dir / f"train_{name}_seed{seed}.csv"
                for name in ("old", "new", "psi")}
    if old_gen is None:
        old_gen = train_old_generation(cfg, ds, seed, log_csv=logs.get("old"))
    if new_gen is None:
        new_alloc = split(ds, cfg.run.split_mode, cfg.run.new_fraction)
        new_gen = train_bct(new_alloc, old_gen, encoder_config(cfg, "new"),
                            loss_config(cfg, lam=lam), train_config(cfg),
                            seed=derive_seed(seed, "new"), index=1,
                            log_csv=logs.get("new"))
    psi = None
    if want_psi:
        new_alloc = split(ds, cfg.run.split_mode, cfg.run.new_fraction)
        old_feats = old_gen.encoder.embed_np(new_alloc.inputs)
        psi = train_fct(new_alloc, old_feats, new_gen.encoder,
                        psi_config(cfg, psi_hidden), psi_train_config(cfg),
                        seed=derive_seed(seed, "psi"), log_csv=logs.get("psi"))
        new_gen.psi = psi
    report = evaluate_notations(old_gen.encoder, new_gen.encoder, psi, eval_set,
                                k=cfg.eval.k, seed=seed)
    return PipelineResult(old_gen=old_gen, new_gen=new_gen, psi=psi, report=report)


# --------------------------------------------------------------- workers

def _run_tasks(worker, arg_tuples, jobs: int) -> list:
    if jobs <= 1:
        return [worker(*args) for args in arg_tuples]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(worker, *zip(*arg_tuples)))


def _lambda_task(snapshot_text: str, seed: int) -> list[dict]:
    cfg = load_config(snapshot_text, is_text=True)
    ds = build_dataset(cfg)
    eval_set = build_eval_set(cfg, ds)
    old_gen = train_old_generation(cfg, ds, seed)
    rows = []
    for lam in cfg.sweep.lambdas:
        new_gen = None
        for psi_hidden in cfg.sweep.psi_dims:
            res = run_pipeline(cfg, seed, lam=lam, psi_hidden=psi_hidden,
                               old_gen=old_gen, new_gen=new_gen, ds=ds,
                               eval_set=eval_set)
            new_gen = res.new_gen  # reuse the BCT model across psi sizes
            rows.append({"lambda": lam, "seed": seed, "psi_dim": psi_hidden,
                         "m_o2o": res.report.m_o2o, "m_bct": res.report.m_bct,
                         "m_fct": res.report.m_fct, "m_n2n": res.report.m_n2n})
    return rows


def lambda_sweep(cfg: ExperimentConfig, jobs: int = 1) -> tuple[list[dict], dict]:
    """One BiCT run per (lambda, seed, psi size); medians summarized."""
    if not cfg.sweep.lambdas:
        raise ValueError("lambda sweep needs a nonempty lambda grid")
    if 0.0 not in cfg.sweep.lambdas:
        raise ValueError("lambda grid must contain 0")
    text = snapshot(cfg)
    per_seed = _run_tasks(_lambda_task, [(text, s) for s in cfg.run.seeds], jobs)
    rows = [row for task_rows in per_seed for row in task_rows]
    summary = summarize_lambda_rows(cfg, rows)
    return rows, summary


def summarize_lambda_rows(cfg: ExperimentConfig, rows: list[dict]) -> dict:
    lambdas = cfg.sweep.lambdas
    med_bct = {}
    med_fct = {d: {} for d in cfg.sweep.psi_dims}
    med_o2o = statistics.median(r["m_o2o"] for r in rows)
    for lam in lambdas:
        at_lam = [r for r in rows if r["lambda"] == lam]
        med_bct[lam] = statistics.median(
            r["m_bct"] for r in at_lam if r["psi_dim"] == cfg.sweep.psi_dims[0])
        for d in cfg.sweep.psi_dims:
            med_fct[d][lam] = statistics.median(
                r["m_fct"] for r in at_lam if r["psi_dim"] == d)
    lambda_b = max(med_bct, key=lambda lam: med_bct[lam])
    return {"median_m_o2o": med_o2o,
            "median_m_bct": {repr(k): v for k, v in med_bct.items()},
            "median_m_fct": {str(d): {repr(k): v for k, v in med_fct[d].items()}
                             for d in cfg.sweep.psi_dims},
            "lambda_b": lambda_b}


def _dim_task(snapshot_text: str, seed: int) -> list[dict]:
    cfg = load_config(snapshot_text, is_text=True)
    ds = build_dataset(cfg)
    eval_set = build_eval_set(cfg, ds)
    old_gen = train_old_generation(cfg, ds, seed)
    rows = []
    new_gen = None
    for dim in cfg.sweep.dims:
        res = run_pipeline(cfg, seed, psi_hidden=dim, old_gen=old_gen,
                           new_gen=new_gen, ds=ds, eval_set=eval_set)
        new_gen = res.new_gen  # one BCT model per seed, one psi per dim
        rows.append({"dim": dim, "seed": seed, "m_o2o": res.report.m_o2o,
                     "m_bct": res.report.m_bct, "m_fct": res.report.m_fct,
                     "fct_gain": res.report.m_fct - res.report.m_bct,
                     "m_n2n": res.report.m_n2n})
    return rows


def dim_sweep(cfg: ExperimentConfig, jobs: int = 1) -> tuple[list[dict], dict]:
    """Fix the BCT model per seed; train one upgrade module per width."""
    if not cfg.sweep.dims:
        raise ValueError("dimension sweep needs a nonempty dim grid")
    text = snapshot(cfg)
    per_seed = _run_tasks(_dim_task, [(text, s) for s in cfg.run.seeds], jobs)
    rows = [row for task_rows in per_seed for row in task_rows]
    summary = {"median_m_fct": {str(d): statistics.median(
        r["m_fct"] for r in rows if r["dim"] == d) for d in cfg.sweep.dims},
        "median_m_bct": statistics.median(r["m_bct"] for r in rows)}
    return rows, summary


# ------------------------------------------------------------ sequential

_VARIANT_FLAGS = {"bct": (False, False), "bict": (True, False), "bict-mom": (True, True)}


def sequential_config(cfg: ExperimentConfig, variant: str) -> SequentialConfig:
    use_fct, use_momentum = _VARIANT_FLAGS[variant]
    enc = encoder_config(cfg, "new")
    gens = [GenerationSpec(fraction=f, encoder=enc,
                           loss=loss_config(cfg, lam=cfg.sequential.lambda_))
            for f in cfg.sequential.fractions]
    return SequentialConfig(generations=gens, split_mode=cfg.sequential.split_mode,
                            psi_hidden_dim=cfg.psi.hidden_dim, psi_depth=cfg.psi.depth,
                            momentum_m=cfg.sequential.momentum_m,
                            use_momentum=use_momentum, use_fct=use_fct, k=cfg.eval.k)


def _sequential_task(snapshot_text: str, variant: str, seed: int) -> dict:
    cfg = load_config(snapshot_text, is_text=True)
    ds = build_dataset(cfg)
    eval_set = build_eval_set(cfg, ds)
    seq_cfg = sequential_config(cfg, variant)
    res = run_sequence(ds, eval_set, seq_cfg, train_config(cfg), psi_train_config(cfg),
                       seed=seed)
    row = {"variant": variant, "seed": seed, "m_o2o": res.m_o2o}
    for i, out in enumerate(res.outcomes, start=1):
        row[f"gen{i}_m_bct"] = out.m_bct
        row[f"gen{i}_m_fct"] = out.m_fct
        row[f"gen{i}_m_n2n"] = out.m_n2n
    row["_gallery_history"] = [g for g in res.gallery_history]
    row["_gallery_labels"] = eval_set.gallery_labels
    return row


def sequential_run(cfg: ExperimentConfig, jobs: int = 1) -> list[dict]:
    """Each configured variant for each seed, Table-shaped rows."""
    if len(cfg.sequential.fractions) < 2:
        raise ValueError("sequential runs need at least two generations")
    text = snapshot(cfg)
    tasks = [(text, variant, seed) for variant in cfg.sequential.variants
             for seed in cfg.run.seeds]
    return _run_tasks(_sequential_task, tasks, jobs)


# ------------------------------------------------------------ hot refresh

def hot_refresh_run(cfg: ExperimentConfig, log_dir=None) -> dict:
    """Full deployment timeline on the configured scenario: the
    pre-upgrade level, the step to the backfill-free level at deployment,
    then the refresh curve per backfill-order seed."""
    seed = cfg.run.seeds[0]
    ds = build_dataset(cfg)
    eval_set = build_eval_set(cfg, ds)
    res = run_pipeline(cfg, seed, ds=ds, eval_set=eval_set, log_dir=log_dir)
    g_old = res.old_gen.encoder.embed_np(eval_set.gallery_inputs)
    gallery = Gallery(ids=np.arange(eval_set.gallery_labels.size),
                      labels=eval_set.gallery_labels, embeddings=g_old)
    q_new = res.new_gen.encoder.embed_np(eval_set.query_inputs)
    curves = {}
    for order_seed in cfg.refresh.order_seeds:
        curves[order_seed] = hot_refresh(gallery, res.psi, q_new,
                                         eval_set.query_labels, cfg.refresh.fractions,
                                         order_seed, k=cfg.eval.k)
    return {"result": res, "curves": curves}
