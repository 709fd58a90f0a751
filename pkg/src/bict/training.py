"""Two-stage compatible training: SGD with momentum and cosine LR,
backward-compatible training of a new encoder, forward-compatible
training of the upgrade module, and sequential multi-generation
orchestration with momentum-mixed inputs.

Old models are never touched by an optimizer here; their features are
computed outside any tape, so frozen-parameter guarantees hold by
construction.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor, backward
from .data import EvalSet, SyntheticDataset, split
from .losses import LossConfig, OldReference, bct_terms, combine_bct, fct_loss
from .models import (
    ArcFaceHead,
    EncoderConfig,
    EncoderModel,
    ModelGeneration,
    UpgradeConfig,
    UpgradeModule,
)
from .retrieval import map_at_k


class DivergenceError(RuntimeError):
    """Raised when training hits a non-finite loss or gradient."""


def derive_seed(*parts) -> int:
    """Stable child seed from mixed int/str parts."""
    ints = []
    for p in parts:
        if isinstance(p, str):
            ints.append(int.from_bytes(hashlib.sha256(p.encode()).digest()[:4], "little"))
        else:
            ints.append(int(p))
    return int(np.random.SeedSequence(entropy=ints).generate_state(1)[0])


# ------------------------------------------------------------- optimizer

@dataclass
class ScheduleConfig:
    base_lr: float
    total_epochs: int = 30
    warmup_epochs: int = 1
    warmup_factor: float = 1e-3
    floor_factor: float = 1e-2

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("warmup must be shorter than the schedule")


def lr_at(sched: ScheduleConfig, epoch_fraction: float) -> float:
    """Linear warmup from base*warmup_factor to base, then cosine decay
    down to base*floor_factor at the end of training."""
    t = float(epoch_fraction)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"epoch fraction {t} outside [0, 1]")
    w = sched.warmup_epochs / sched.total_epochs
    base = sched.base_lr
    if w > 0.0 and t < w:
        start = base * sched.warmup_factor
        return start + (base - start) * (t / w)
    floor = base * sched.floor_factor
    u = (t - w) / (1.0 - w)
    return floor + (base - floor) * 0.5 * (1.0 + math.cos(math.pi * u))


class SGD:
    """Classical SGD with momentum and coupled weight decay.

    v <- momentum * v + (g + wd * p);  p <- p - lr * v
    """

    def __init__(self, named_params, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.named_params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.values) for _, p in self.named_params]

    def step(self, lr: float, context: str = "") -> None:
        for (name, p), v in zip(self.named_params, self.velocities):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.values
            if not np.all(np.isfinite(g)):
                norm = float(np.linalg.norm(p.grad))
                raise DivergenceError(
                    f"non-finite gradient for {name} ({context}), grad norm {norm}")
            v *= self.momentum
            v += g
            p.values -= lr * v

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None


@dataclass
class TrainConfig:
    epochs: int = 30
    warmup_epochs: int = 1
    batch_size: int = 128
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(base_lr=self.base_lr, total_epochs=self.epochs,
                              warmup_epochs=self.warmup_epochs)


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    """Seeded shuffle into fixed-size batches; singletons are dropped
    (train-mode batchnorm needs at least two rows)."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if idx.size >= 2:
            yield idx


def _write_log(log_csv, header: list[str], rows: list[list]) -> None:
    if log_csv is None:
        return
    with open(Path(log_csv), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


# -------------------------------------------------------------- old space

@dataclass
class OldSpace:
    """Frozen embedding function of the current serving gallery space,
    plus the classifier head paired with it (for classification comp)."""

    embed: Callable[[np.ndarray], np.ndarray]
    head: ArcFaceHead | None = None

    @classmethod
    def from_generation(cls, gen: ModelGeneration) -> "OldSpace":
        return cls(embed=gen.encoder.embed_np, head=gen.head)


def _coerce_old(old) -> OldSpace | None:
    if old is None:
        return None
    if isinstance(old, OldSpace):
        return old
    if isinstance(old, ModelGeneration):
        return OldSpace.from_generation(old)
    raise TypeError(f"old reference must be OldSpace or ModelGeneration, got {type(old)}")


# ------------------------------------------------------------- BCT stage

def train_bct(dataset: SyntheticDataset, old, encoder_cfg: EncoderConfig,
              loss_cfg: LossConfig, train_cfg: TrainConfig, seed: int,
              index: int | None = None, log_csv=None) -> ModelGeneration:
    """Train a fresh encoder and head, optionally tied to the old space.

    With ``old`` None (or lambda 0) this is plain base-loss training; the
    rng streams are identical either way, so a lambda-0 run is
    bit-identical to a no-compatibility run under the same seed.
    """
    old = _coerce_old(old)
    needs_old_embs = loss_cfg.lambda_ > 0 and old is not None and \
        loss_cfg.comp_kind in ("regression", "contrastive")
    encoder = EncoderModel(encoder_cfg, seed=derive_seed(seed, "encoder"))
    head = ArcFaceHead(np.unique(dataset.labels), encoder_cfg.embedding_dim,
                       seed=derive_seed(seed, "head"), s=loss_cfg.s, m=loss_cfg.m)
    if old is None and loss_cfg.lambda_ > 0:
        loss_cfg = LossConfig(lambda_=0.0, comp_kind=loss_cfg.comp_kind,
                              tau=loss_cfg.tau, s=loss_cfg.s, m=loss_cfg.m)
    opt = SGD(encoder.params() + head.params(), momentum=train_cfg.momentum,
              weight_decay=train_cfg.weight_decay)
    sched = train_cfg.schedule()
    order_rng = np.random.default_rng(derive_seed(seed, "batches"))
    n = dataset.num_samples
    rows = []
    for epoch in range(train_cfg.epochs):
        lr = lr_at(sched, epoch / train_cfg.epochs)
        sums = np.zeros(3)
        count = 0
        for idx in _batches(order_rng, n, train_cfg.batch_size):
            x = dataset.inputs[idx]
            y = dataset.labels[idx]
            old_ref = None
            if old is not None and loss_cfg.lambda_ > 0:
                old_embs = old.embed(x) if needs_old_embs else None
                old_ref = OldReference(embeddings=old_embs, head=old.head)
            with Tape():
                emb = encoder.embed(x, train=True)
                base, comp = bct_terms(emb, y, head, old_ref, loss_cfg)
                total = combine_bct(base, comp, loss_cfg.lambda_)
                loss_value = total.item()
                if not math.isfinite(loss_value):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}")
                backward(total)
            opt.step(lr, context=f"epoch {epoch}")
            opt.zero_grad()
            comp_value = comp.item() if comp is not None else 0.0
            sums += idx.size * np.array([base.item(), comp_value, loss_value])
            count += idx.size
        rows.append([epoch, repr(float(lr))] +
                    [repr(float(v / count)) for v in sums])
    _write_log(log_csv, ["epoch", "lr", "loss_base", "loss_comp", "loss_total"], rows)
    return ModelGeneration(index=index if index is not None else (0 if old is None else 1),
                           encoder=encoder, head=head)


# ------------------------------------------------------------- FCT stage

def train_fct(dataset: SyntheticDataset, old_features: np.ndarray, new_encoder,
              psi_cfg: UpgradeConfig, train_cfg: TrainConfig, seed: int,
              log_csv=None) -> UpgradeModule:
    """Train the upgrade module to map old-space features of the training
    set onto frozen new-model embeddings of the same inputs."""
    old_features = np.asarray(old_features, dtype=np.float64)
    if old_features.shape != (dataset.num_samples, psi_cfg.in_dim):
        raise ValueError(
            f"old features shape {old_features.shape} does not match "
            f"({dataset.num_samples}, {psi_cfg.in_dim})")
    targets = new_encoder.embed_np(dataset.inputs)
    if targets.shape[1] != psi_cfg.out_dim:
        raise ValueError(f"upgrade output dim {psi_cfg.out_dim} does not match "
                         f"encoder embedding dim {targets.shape[1]}")
    psi = UpgradeModule(psi_cfg, seed=derive_seed(seed, "psi"))
    opt = SGD(psi.params(), momentum=train_cfg.momentum,
              weight_decay=train_cfg.weight_decay)
    sched = train_cfg.schedule()
    order_rng = np.random.default_rng(derive_seed(seed, "psi-batches"))
    n = dataset.num_samples
    rows = []
    for epoch in range(train_cfg.epochs):
        lr = lr_at(sched, epoch / train_cfg.epochs)
        total = 0.0
        count = 0
        for idx in _batches(order_rng, n, train_cfg.batch_size):
            with Tape():
                up = psi.upgrade(Tensor(old_features[idx]), train=True)
                loss = fct_loss(up, targets[idx])
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(f"non-finite FCT loss at epoch {epoch}")
                backward(loss)
            opt.step(lr, context=f"epoch {epoch}")
            opt.zero_grad()
            total += value * idx.size
            count += idx.size
        rows.append([epoch, repr(float(lr)), repr(float(total / count))])
    _write_log(log_csv, ["epoch", "lr", "loss_fct"], rows)
    return psi


# --------------------------------------------------------- momentum input

def momentum_input(f_prev: np.ndarray, f_prev2: np.ndarray | None,
                   gen_index: int, m: float) -> np.ndarray:
    """Input features for the generation's upgrade module.

    Generation 1 consumes the original old features; later generations
    mix the previous two feature generations, (1-m)*F_{i-1} + m*F_{i-2},
    renormalized row-wise. The m=0 and m=1 limits return the stored
    features verbatim so the exact-identity contracts hold.
    """
    if gen_index < 1:
        raise ValueError("momentum input is defined for generation index >= 1")
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum m must be in [0, 1], got {m}")
    if gen_index == 1 or m == 0.0:
        return f_prev
    if f_prev2 is None:
        raise ValueError("momentum at generation >= 2 needs the previous-generation "
                         "features as well; retain one more set of gallery embeddings")
    if m == 1.0:
        return f_prev2
    mixed = (1.0 - m) * f_prev + m * f_prev2
    norms = np.linalg.norm(mixed, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise ValueError("momentum mixing produced a degenerate (near-zero) row")
    return mixed / norms


# ------------------------------------------------------------- sequences

@dataclass
class GenerationSpec:
    fraction: float
    encoder: EncoderConfig
    loss: LossConfig


@dataclass
class SequentialConfig:
    generations: list[GenerationSpec]
    split_mode: str = "data"
    psi_hidden_dim: int = 64
    psi_depth: int = 3
    momentum_m: float = 0.5
    use_momentum: bool = False
    use_fct: bool = True
    k: int = 20

    def __post_init__(self):
        if len(self.generations) < 2:
            raise ValueError("a sequence needs at least two generations")
        if not 0.0 <= self.momentum_m <= 1.0:
            raise ValueError("momentum_m must be in [0, 1]")


@dataclass
class GenerationOutcome:
    generation: ModelGeneration
    psi: UpgradeModule | None
    m_bct: float
    m_fct: float | None
    m_n2n: float


@dataclass
class SequenceResult:
    m_o2o: float
    outcomes: list[GenerationOutcome]
    gallery_history: list[np.ndarray] = field(repr=False, default_factory=list)


def run_sequence(dataset: SyntheticDataset, eval_set: EvalSet,
                 seq_cfg: SequentialConfig, train_cfg: TrainConfig,
                 psi_train_cfg: TrainConfig, seed: int,
                 on_stage: Callable[[str, dict], None] | None = None) -> SequenceResult:
    """Run generation 0 plus every configured upgrade generation.

    Each upgrade trains backward-compatible against the space of the
    current serving gallery (the stacked upgrade pipeline under BiCT,
    the original encoder under BCT-only), evaluates M_BCT, then trains
    the upgrade module on momentum-mixed features and refreshes the
    gallery to measure M_FCT.
    """
    specs = seq_cfg.generations
    allocs = [split(dataset, seq_cfg.split_mode, s.fraction) for s in specs]
    q_inputs, q_labels = eval_set.query_inputs, eval_set.query_labels
    g_inputs, g_labels = eval_set.gallery_inputs, eval_set.gallery_labels
    g_ids = np.arange(g_labels.size, dtype=np.int64)
    k = seq_cfg.k

    def emit(stage: str, payload: dict) -> None:
        if on_stage is not None:
            on_stage(stage, payload)

    gen0 = train_bct(allocs[0], None, specs[0].encoder, specs[0].loss, train_cfg,
                     seed=derive_seed(seed, 0, "bct"), index=0)
    spaces: list[Callable[[np.ndarray], np.ndarray]] = [gen0.encoder.embed_np]
    heads = [gen0.head]
    serving = gen0.encoder.embed_np(g_inputs)
    prev_serving: np.ndarray | None = None
    gallery_history = [serving]
    m_o2o, _, _ = map_at_k(gen0.encoder.embed_np(q_inputs), q_labels,
                           serving, g_labels, g_ids, k)

    serving_idx = 0  # which space produced the current serving gallery
    outcomes: list[GenerationOutcome] = []
    for i in range(1, len(specs)):
        spec = specs[i]
        old_space = OldSpace(embed=spaces[serving_idx], head=heads[serving_idx])
        gen_i = train_bct(allocs[i], old_space, spec.encoder, spec.loss, train_cfg,
                          seed=derive_seed(seed, i, "bct"), index=i)
        q_new = gen_i.encoder.embed_np(q_inputs)
        m_bct, _, _ = map_at_k(q_new, q_labels, serving, g_labels, g_ids, k)
        m_n2n, _, _ = map_at_k(q_new, q_labels, gen_i.encoder.embed_np(g_inputs),
                               g_labels, g_ids, k)
        psi_i = None
        m_fct = None
        if seq_cfg.use_fct:
            m = seq_cfg.momentum_m if seq_cfg.use_momentum else 0.0
            x_i = allocs[i].inputs
            f_prev = spaces[i - 1](x_i)
            f_prev2 = spaces[i - 2](x_i) if (i >= 2 and m > 0.0) else None
            psi_train_in = momentum_input(f_prev, f_prev2, i, m)
            emit("fct_train_inputs", {"generation": i, "features": psi_train_in,
                                      "f_prev": f_prev, "f_prev2": f_prev2, "m": m})
            psi_cfg = UpgradeConfig(in_dim=psi_train_in.shape[1],
                                    out_dim=spec.encoder.embedding_dim,
                                    hidden_dim=seq_cfg.psi_hidden_dim,
                                    depth=seq_cfg.psi_depth)
            psi_i = train_fct(allocs[i], psi_train_in, gen_i.encoder, psi_cfg,
                              psi_train_cfg, seed=derive_seed(seed, i, "fct"))
            gallery_in = momentum_input(serving, prev_serving, i, m)
            emit("backfill_inputs", {"generation": i, "features": gallery_in,
                                     "serving": serving, "prev_serving": prev_serving,
                                     "m": m})
            new_serving = psi_i.upgrade(Tensor(gallery_in), train=False).values
            m_fct, _, _ = map_at_k(q_new, q_labels, new_serving, g_labels, g_ids, k)
            prev_serving = serving
            serving = new_serving
            gallery_history.append(serving)

            def make_space(prev_fn, prev2_fn, psi, gen_idx, mom):
                def space(x: np.ndarray) -> np.ndarray:
                    f1 = prev_fn(x)
                    f2 = prev2_fn(x) if prev2_fn is not None else None
                    return psi.upgrade(Tensor(momentum_input(f1, f2, gen_idx, mom)),
                                       train=False).values
                return space

            prev2_fn = spaces[i - 2] if (i >= 2 and m > 0.0) else None
            spaces.append(make_space(spaces[i - 1], prev2_fn, psi_i, i, m))
            serving_idx = i
        else:
            spaces.append(gen_i.encoder.embed_np)  # unused as serving space
        heads.append(gen_i.head)
        gen_i.psi = psi_i
        outcomes.append(GenerationOutcome(generation=gen_i, psi=psi_i,
                                          m_bct=m_bct, m_fct=m_fct, m_n2n=m_n2n))
    return SequenceResult(m_o2o=m_o2o, outcomes=outcomes,
                          gallery_history=gallery_history)
