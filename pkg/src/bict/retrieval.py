"""Gallery store, cosine ranking, mAP@k, the four cross-model
performance notations, and the progressive hot-refresh simulator.

Ranking is by descending inner product of unit vectors with ties broken
by ascending item id, so results are deterministic. mAP@k uses the
min(total positives, k) denominator; queries without any gallery
positive are excluded from the mean and counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

UNIT_TOL = 1e-6


class Gallery:
    """Embedding store with per-item generation tags.

    ``prev_embeddings`` optionally retains the previous generation of
    every item, which sequential upgrades with momentum inputs require.
    """

    def __init__(self, ids, labels, embeddings, generation: int = 0,
                 prev_embeddings=None):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise ValueError(f"gallery embeddings must be 2-d, got {self.embeddings.shape}")
        if not (self.ids.size == self.labels.size == self.embeddings.shape[0]):
            raise ValueError("gallery ids, labels and embeddings disagree in length")
        if np.unique(self.ids).size != self.ids.size:
            raise ValueError("gallery item ids must be unique")
        _check_unit(self.embeddings, "gallery embeddings")
        self.generations = np.full(self.ids.size, generation, dtype=np.int32)
        self.prev_embeddings = None if prev_embeddings is None \
            else np.asarray(prev_embeddings, dtype=np.float64)

    def __len__(self) -> int:
        return self.ids.size

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def backfill(self, indices, new_embeddings, generation: int,
                 keep_previous: bool = False) -> None:
        """Replace the embeddings at ``indices`` with a newer generation."""
        indices = np.asarray(indices, dtype=np.int64)
        new_embeddings = np.asarray(new_embeddings, dtype=np.float64)
        if np.any(self.generations[indices] > generation):
            raise ValueError("backfill would move items to an older generation")
        _check_unit(new_embeddings, "backfill embeddings")
        if keep_previous:
            if self.prev_embeddings is None:
                self.prev_embeddings = self.embeddings.copy()
            else:
                self.prev_embeddings[indices] = self.embeddings[indices]
        self.embeddings[indices] = new_embeddings
        self.generations[indices] = generation


def _check_unit(embs: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(embs, axis=1)
    worst = float(np.abs(norms - 1.0).max(initial=0.0))
    if worst > UNIT_TOL:
        raise ValueError(f"{what} must be unit-norm (worst deviation {worst:.2e})")


@dataclass
class MetricReport:
    """The four performance notations plus evaluation bookkeeping.

    m_n2n is an oracle quantity: it needs the raw gallery inputs, which a
    deployed privacy-preserving system does not have.
    """

    m_o2o: float | None
    m_bct: float | None
    m_fct: float | None
    m_n2n: float | None
    k: int
    num_queries: int
    num_excluded: int = 0
    seed: int | None = None
    refresh_curve: list[tuple[float, float]] | None = None

    def __post_init__(self):
        for name in ("m_o2o", "m_bct", "m_fct", "m_n2n"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.refresh_curve is not None:
            fracs = [f for f, _ in self.refresh_curve]
            if any(b <= a for a, b in zip(fracs, fracs[1:])):
                raise ValueError("refresh curve fractions must be strictly increasing")
            if fracs and (fracs[0] != 0.0 or fracs[-1] != 1.0):
                raise ValueError("refresh curve must span fractions 0 to 1")

    def to_dict(self) -> dict:
        out = {
            "m_o2o": self.m_o2o,
            "m_bct": self.m_bct,
            "m_fct": self.m_fct,
            "m_n2n": self.m_n2n,
            "m_n2n_oracle": True,
            "k": self.k,
            "num_queries": self.num_queries,
            "num_excluded": self.num_excluded,
        }
        if self.seed is not None:
            out["seed"] = self.seed
        if self.refresh_curve is not None:
            out["refresh_curve"] = [[f, m] for f, m in self.refresh_curve]
        return out


def _ranked_indices(scores: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Indices sorted by descending score, ties by ascending id."""
    return np.lexsort((ids, -scores))


def rank(query_emb: np.ndarray, gallery: Gallery, k: int) -> list[tuple[int, float]]:
    """Top-k gallery items for one query embedding."""
    query_emb = np.asarray(query_emb, dtype=np.float64).reshape(-1)
    if query_emb.size != gallery.dim:
        raise ValueError(f"query dim {query_emb.size} does not match gallery dim {gallery.dim}")
    if len(gallery) == 0:
        raise ValueError("cannot rank against an empty gallery")
    if not 1 <= k <= len(gallery):
        raise ValueError(f"k={k} must be in [1, {len(gallery)}]")
    scores = gallery.embeddings @ query_emb
    order = _ranked_indices(scores, gallery.ids)[:k]
    return [(int(gallery.ids[i]), float(scores[i])) for i in order]


def average_precision_at_k(relevances, num_positives: int, k: int) -> float:
    """AP@k with the min(num_positives, k) denominator."""
    if num_positives < 1:
        raise ValueError("average precision needs at least one positive")
    rel = np.asarray(relevances, dtype=np.float64)[:k]
    if rel.size == 0:
        raise ValueError("empty ranking")
    precision = np.cumsum(rel) / np.arange(1, rel.size + 1)
    return float((precision * rel).sum() / min(num_positives, k))


def map_at_k(query_embs: np.ndarray, query_labels: np.ndarray,
             gallery_embs: np.ndarray, gallery_labels: np.ndarray,
             gallery_ids: np.ndarray, k: int) -> tuple[float, int, int]:
    """Mean AP@k over queries; returns (map, used, excluded).

    Queries with no same-label gallery item are excluded from the mean.
    """
    n_gallery = gallery_embs.shape[0]
    if not 1 <= k <= n_gallery:
        raise ValueError(f"k={k} must be in [1, {n_gallery}]")
    scores = query_embs @ gallery_embs.T
    aps = []
    excluded = 0
    for qi in range(query_embs.shape[0]):
        num_pos = int((gallery_labels == query_labels[qi]).sum())
        if num_pos == 0:
            excluded += 1
            continue
        order = _ranked_indices(scores[qi], gallery_ids)[:k]
        rel = gallery_labels[order] == query_labels[qi]
        aps.append(average_precision_at_k(rel, num_pos, k))
    if not aps:
        raise ValueError("every query was excluded (no gallery positives)")
    return float(np.mean(aps)), len(aps), excluded


def evaluate_notations(old_enc, new_enc, psi, eval_set, k: int,
                       seed: int | None = None) -> MetricReport:
    """Compute M_o2o, M_BCT, M_FCT and the M_n2n oracle on an eval set.

    All models run in eval mode; with ``psi`` None the M_FCT entry is
    omitted. Pure given its inputs.
    """
    q_old = old_enc.embed_np(eval_set.query_inputs)
    g_old = old_enc.embed_np(eval_set.gallery_inputs)
    q_new = new_enc.embed_np(eval_set.query_inputs)
    g_new = new_enc.embed_np(eval_set.gallery_inputs)
    ids = np.arange(eval_set.gallery_labels.size, dtype=np.int64)
    labels = eval_set.gallery_labels

    m_o2o, used, excluded = map_at_k(q_old, eval_set.query_labels, g_old, labels, ids, k)
    m_bct, _, _ = map_at_k(q_new, eval_set.query_labels, g_old, labels, ids, k)
    m_fct = None
    if psi is not None:
        g_up = psi.upgrade(Tensor(g_old), train=False).values
        m_fct, _, _ = map_at_k(q_new, eval_set.query_labels, g_up, labels, ids, k)
    m_n2n, _, _ = map_at_k(q_new, eval_set.query_labels, g_new, labels, ids, k)
    return MetricReport(m_o2o=m_o2o, m_bct=m_bct, m_fct=m_fct, m_n2n=m_n2n, k=k,
                        num_queries=used, num_excluded=excluded, seed=seed)


def hot_refresh(gallery: Gallery, psi, query_embs: np.ndarray,
                query_labels: np.ndarray, fractions, order_seed: int,
                k: int) -> list[tuple[float, float]]:
    """Progressively backfill the gallery through ``psi`` and trace mAP.

    Items are upgraded in a seeded random order; at each fraction the
    queries are evaluated against the mixed-generation gallery. The
    passed gallery is not mutated. The first fraction must be 0 (all
    old, equal to M_BCT) and the last must be 1 (all upgraded, M_FCT).
    """
    fractions = [float(f) for f in fractions]
    if fractions[0] != 0.0 or fractions[-1] != 1.0:
        raise ValueError("refresh fractions must start at 0 and end at 1")
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise ValueError("refresh fractions must be strictly increasing")

    n = len(gallery)
    upgraded = psi.upgrade(Tensor(gallery.embeddings), train=False).values
    perm = np.random.default_rng(order_seed).permutation(n)
    current = gallery.embeddings.copy()
    curve = []
    done = 0
    for f in fractions:
        count = int(f * n)
        take = perm[done:count]
        current[take] = upgraded[take]
        done = count
        m, _, _ = map_at_k(query_embs, query_labels, current, gallery.labels,
                           gallery.ids, k)
        curve.append((f, m))
    return curve
