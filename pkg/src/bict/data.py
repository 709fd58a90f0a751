"""Synthetic labeled feature data with class-prototype structure.

Samples are class prototypes on the unit hypersphere plus isotropic
Gaussian noise, which gives encoders a measurable quality gradient with
training-set size. Splits come in two flavours: data splits keep a
fraction of samples in every class, class splits keep a fraction of
whole classes. Subsets are selected by fixed per-sample / per-class
random keys so smaller fractions nest inside larger ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_ITEMS = 2_000_000


@dataclass
class SyntheticDataset:
    inputs: np.ndarray       # (N, D) float64, un-normalized
    labels: np.ndarray       # (N,) int64, ids into prototypes
    prototypes: np.ndarray   # (C, D) unit rows
    noise_sigma: float
    seed: int
    sample_keys: np.ndarray = field(repr=False, default=None)  # (N,) subset-selection keys
    class_keys: np.ndarray = field(repr=False, default=None)   # (C,)

    def __post_init__(self):
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) >= self.num_classes:
            raise ValueError("labels out of range for prototype count")

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def num_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def present_classes(self) -> np.ndarray:
        return np.unique(self.labels)


@dataclass
class EvalSet:
    query_inputs: np.ndarray
    query_labels: np.ndarray
    gallery_inputs: np.ndarray
    gallery_labels: np.ndarray

    def __post_init__(self):
        missing = np.setdiff1d(self.query_labels, self.gallery_labels)
        if missing.size:
            raise ValueError(f"query classes {missing.tolist()} have no gallery items")


def generate(num_classes: int, samples_per_class: int, input_dim: int,
             noise_sigma: float, seed: int) -> SyntheticDataset:
    """Build a dataset of ``num_classes * samples_per_class`` labeled vectors.

    Deterministic in ``seed``; with sigma 0 every sample equals its class
    prototype exactly.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if samples_per_class < 2:
        raise ValueError("need at least 2 samples per class")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    n_total = num_classes * samples_per_class
    if n_total > MAX_ITEMS:
        raise ValueError(f"dataset of {n_total} items exceeds the configured maximum {MAX_ITEMS}")

    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((num_classes, input_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), samples_per_class)
    inputs = protos[labels] + noise_sigma * rng.standard_normal((n_total, input_dim))
    sample_keys = rng.random(n_total)
    class_keys = rng.random(num_classes)
    return SyntheticDataset(inputs=inputs, labels=labels, prototypes=protos,
                            noise_sigma=noise_sigma, seed=seed,
                            sample_keys=sample_keys, class_keys=class_keys)


def split(ds: SyntheticDataset, mode: str, fraction: float) -> SyntheticDataset:
    """Take a deterministic sub-allocation of ``ds``.

    mode "data": floor(fraction * n) samples per class, all classes kept.
    mode "class": floor(fraction * C) whole classes with all their samples.
    Selection is by the smallest per-sample / per-class keys, so for any
    f1 <= f2 the f1 split is a subset of the f2 split.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if mode == "data":
        keep = np.zeros(ds.num_samples, dtype=bool)
        for c in ds.present_classes():
            idx = np.flatnonzero(ds.labels == c)
            k = int(fraction * idx.size)
            if k == 0:
                raise ValueError(f"data split fraction {fraction} leaves class {c} empty")
            order = idx[np.argsort(ds.sample_keys[idx], kind="stable")]
            keep[order[:k]] = True
    elif mode == "class":
        present = ds.present_classes()
        k = int(fraction * present.size)
        if k == 0:
            raise ValueError(f"class split fraction {fraction} keeps zero classes")
        order = present[np.argsort(ds.class_keys[present], kind="stable")]
        kept_classes = order[:k]
        keep = np.isin(ds.labels, kept_classes)
    else:
        raise ValueError(f"unknown split mode {mode!r}, expected 'data' or 'class'")
    return SyntheticDataset(inputs=ds.inputs[keep], labels=ds.labels[keep],
                            prototypes=ds.prototypes, noise_sigma=ds.noise_sigma,
                            seed=ds.seed, sample_keys=ds.sample_keys[keep],
                            class_keys=ds.class_keys)


def make_eval_set(prototypes: np.ndarray, num_queries: int, gallery_per_class: int,
                  noise_sigma: float, seed: int) -> EvalSet:
    """Sample disjoint query and gallery sets from the same prototype model.

    The gallery holds ``gallery_per_class`` items for every class, so each
    query has at least one positive.
    """
    if gallery_per_class < 1:
        raise ValueError("gallery_per_class must be at least 1")
    if num_queries < 1:
        raise ValueError("num_queries must be at least 1")
    rng = np.random.default_rng(seed)
    num_classes, dim = prototypes.shape
    g_labels = np.repeat(np.arange(num_classes, dtype=np.int64), gallery_per_class)
    g_inputs = prototypes[g_labels] + noise_sigma * rng.standard_normal((g_labels.size, dim))
    q_labels = rng.integers(0, num_classes, size=num_queries).astype(np.int64)
    q_inputs = prototypes[q_labels] + noise_sigma * rng.standard_normal((num_queries, dim))
    return EvalSet(query_inputs=q_inputs, query_labels=q_labels,
                   gallery_inputs=g_inputs, gallery_labels=g_labels)


def nearest_prototype_accuracy(ds: SyntheticDataset) -> float:
    """Fraction of samples whose nearest prototype (by cosine) is their class."""
    normed = ds.inputs / np.linalg.norm(ds.inputs, axis=1, keepdims=True)
    pred = np.argmax(normed @ ds.prototypes.T, axis=1)
    return float(np.mean(pred == ds.labels))
