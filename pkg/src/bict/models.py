"""Trainable components: embedding encoders, ArcFace heads, upgrade modules.

Encoders are plain relu MLPs with an L2-normalized output; the feature
upgrade module stacks [fc-bn-relu] blocks with a final fc and likewise
normalizes its output so every stored embedding lives on the unit sphere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    RunningStats,
    Tensor,
    add,
    as_tensor,
    batchnorm,
    l2_normalize,
    matmul,
    relu,
)


class Linear:
    """Fully-connected layer, He-normal weights and zero biases."""

    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int):
        std = math.sqrt(2.0 / in_dim)
        self.weight = Tensor(rng.normal(0.0, std, size=(in_dim, out_dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)

    def state_entries(self, prefix: str):
        return [(f"{prefix}.weight", self.weight.values), (f"{prefix}.bias", self.bias.values)]

    def params(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


class BatchNorm:
    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.stats = RunningStats.fresh(dim)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return batchnorm(x, self.gamma, self.beta, self.stats, train=train)

    def state_entries(self, prefix: str):
        return [(f"{prefix}.gamma", self.gamma.values), (f"{prefix}.beta", self.beta.values),
                (f"{prefix}.running_mean", self.stats.mean), (f"{prefix}.running_var", self.stats.var)]

    def params(self, prefix: str):
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    embedding_dim: int
    hidden_width: int = 64
    num_hidden: int = 2
    normalize_output: bool = True

    @property
    def widths(self) -> list[int]:
        return [self.input_dim] + [self.hidden_width] * self.num_hidden + [self.embedding_dim]


class EncoderModel:
    """Relu MLP mapping raw input vectors to unit-norm embeddings."""

    def __init__(self, cfg: EncoderConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        widths = cfg.widths
        self.layers = [Linear(rng, widths[i], widths[i + 1]) for i in range(len(widths) - 1)]

    def embed(self, batch, train: bool = False) -> Tensor:
        x = as_tensor(batch)
        if x.values.ndim != 2 or x.shape[1] != self.cfg.input_dim:
            raise ValueError(f"encoder expects (B, {self.cfg.input_dim}) input, got {x.shape}")
        for layer in self.layers[:-1]:
            x = relu(layer(x))
        x = self.layers[-1](x)
        if self.cfg.normalize_output:
            x = l2_normalize(x)
        return x

    def embed_np(self, batch) -> np.ndarray:
        """Eval-mode embedding as a plain array (no tape participation)."""
        return self.embed(batch, train=False).values

    def params(self):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.params(f"layer{i}"))
        return out

    def state_entries(self):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.state_entries(f"layer{i}"))
        return out


class ArcFaceHead:
    """Class-weight matrix with angular-margin scoring parameters.

    Rows correspond to ``class_ids`` (sorted original label ids); the
    weight rows are renormalized to unit norm inside every loss
    evaluation rather than stored normalized.
    """

    def __init__(self, class_ids, embedding_dim: int, seed: int,
                 s: float = 30.0, m: float = 0.3):
        if s <= 0:
            raise ValueError(f"arcface scale must be positive, got {s}")
        if not 0.0 <= m < math.pi / 2:
            raise ValueError(f"arcface margin must be in [0, pi/2), got {m}")
        ids = np.unique(np.asarray(class_ids, dtype=np.int64))
        if ids.size < 1:
            raise ValueError("head needs at least one class")
        self.class_ids = ids
        self.embedding_dim = embedding_dim
        self.seed = seed
        self.s = float(s)
        self.m = float(m)
        rng = np.random.default_rng(seed)
        std = 1.0 / math.sqrt(embedding_dim)
        self.weights = Tensor(rng.normal(0.0, std, size=(ids.size, embedding_dim)),
                              requires_grad=True)

    @property
    def num_classes(self) -> int:
        return self.class_ids.size

    def rows_for(self, labels) -> tuple[np.ndarray, np.ndarray]:
        """Map label ids to weight rows; returns (rows, known_mask).

        Unknown labels get row 0 with known_mask False.
        """
        labels = np.asarray(labels, dtype=np.int64)
        pos = np.searchsorted(self.class_ids, labels)
        pos_clipped = np.minimum(pos, self.class_ids.size - 1)
        known = self.class_ids[pos_clipped] == labels
        rows = np.where(known, pos_clipped, 0)
        return rows, known

    def params(self):
        return [("head.weights", self.weights)]

    def state_entries(self):
        return [("head.weights", self.weights.values)]


@dataclass(frozen=True)
class UpgradeConfig:
    in_dim: int
    out_dim: int
    hidden_dim: int = 64
    depth: int = 3  # number of [fc-bn-relu] blocks before the final fc

    def __post_init__(self):
        if self.hidden_dim < 1:
            raise ValueError(f"upgrade hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.depth < 1:
            raise ValueError(f"upgrade depth must be >= 1, got {self.depth}")


def upgrade_param_count(cfg: UpgradeConfig) -> int:
    """Learnable parameter count of an UpgradeModule (gamma/beta included)."""
    d_h, d_in, d_out = cfg.hidden_dim, cfg.in_dim, cfg.out_dim
    count = d_in * d_h + d_h + 2 * d_h           # first block
    count += (cfg.depth - 1) * (d_h * d_h + d_h + 2 * d_h)
    count += d_h * d_out + d_out                 # final fc
    return count


class UpgradeModule:
    """[fc-bn-relu] x depth followed by a final fc, output L2-normalized."""

    def __init__(self, cfg: UpgradeConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        dims = [cfg.in_dim] + [cfg.hidden_dim] * cfg.depth
        self.blocks = [(Linear(rng, dims[i], dims[i + 1]), BatchNorm(dims[i + 1]))
                       for i in range(cfg.depth)]
        self.final = Linear(rng, cfg.hidden_dim, cfg.out_dim)
        # at narrow hidden widths relu can zero an entire row; a nonzero
        # final bias keeps such rows normalizable instead of degenerate
        self.final.bias.values[...] = 0.01

    @property
    def in_dim(self) -> int:
        return self.cfg.in_dim

    @property
    def out_dim(self) -> int:
        return self.cfg.out_dim

    def upgrade(self, feats, train: bool = False) -> Tensor:
        x = as_tensor(feats)
        if x.values.ndim != 2 or x.shape[1] != self.cfg.in_dim:
            raise ValueError(f"upgrade module expects (B, {self.cfg.in_dim}) input, got {x.shape}")
        for lin, bn in self.blocks:
            x = relu(bn(lin(x), train))
        return l2_normalize(self.final(x))

    def params(self):
        out = []
        for i, (lin, bn) in enumerate(self.blocks):
            out.extend(lin.params(f"block{i}.fc"))
            out.extend(bn.params(f"block{i}.bn"))
        out.extend(self.final.params("final"))
        return out

    def state_entries(self):
        out = []
        for i, (lin, bn) in enumerate(self.blocks):
            out.extend(lin.state_entries(f"block{i}.fc"))
            out.extend(bn.state_entries(f"block{i}.bn"))
        out.extend(self.final.state_entries("final"))
        return out


class IdentityUpgrade:
    """Degenerate upgrade module, psi(x) = x exactly."""

    def __init__(self, dim: int):
        self.cfg = None
        self.dim = dim

    @property
    def in_dim(self) -> int:
        return self.dim

    @property
    def out_dim(self) -> int:
        return self.dim

    def upgrade(self, feats, train: bool = False) -> Tensor:
        x = as_tensor(feats)
        if x.values.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"identity upgrade expects (B, {self.dim}) input, got {x.shape}")
        return x

    def params(self):
        return []

    def state_entries(self):
        return []


def identity_upgrade(in_dim: int, out_dim: int) -> IdentityUpgrade:
    if in_dim != out_dim:
        raise ValueError(f"identity upgrade requires equal dims, got {in_dim} -> {out_dim}")
    return IdentityUpgrade(in_dim)


@dataclass
class ModelGeneration:
    """One generation of the upgrade sequence: encoder, head, optional psi."""

    index: int
    encoder: EncoderModel
    head: ArcFaceHead
    psi: UpgradeModule | IdentityUpgrade | None = None

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("generation index must be >= 0")
        if self.index == 0 and self.psi is not None:
            raise ValueError("generation 0 cannot carry an upgrade module")


def param_checksum(named_params) -> float:
    """Cheap order-sensitive digest of parameter values, for freeze checks."""
    total = 0.0
    for i, (_, p) in enumerate(named_params):
        total += float(np.sum(p.values * (i + 1)))
    return total
