import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bict.data import make_eval_set
from bict.models import EncoderConfig, EncoderModel, UpgradeConfig, UpgradeModule, identity_upgrade
from bict.retrieval import (
    Gallery,
    MetricReport,
    average_precision_at_k,
    evaluate_notations,
    hot_refresh,
    map_at_k,
    rank,
)
from oracles import brute_force_map, brute_force_ranking


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def toy_gallery(rng, n=12, d=6, labels=None):
    embs = unit_rows(rng, n, d)
    labels = rng.integers(0, 4, size=n) if labels is None else np.asarray(labels)
    return Gallery(ids=np.arange(n), labels=labels, embeddings=embs)


# ------------------------------------------------------------------ rank

def test_rank_exact_match_first():
    embs = np.eye(4)
    g = Gallery(ids=np.arange(4), labels=np.arange(4), embeddings=embs)
    top = rank(embs[2], g, k=4)
    assert top[0] == (2, 1.0)


def test_rank_scale_invariant_ordering():
    rng = np.random.default_rng(0)
    g = toy_gallery(rng)
    q = rng.normal(size=6)
    ids1 = [i for i, _ in rank(q, g, k=12)]
    ids2 = [i for i, _ in rank(3.7 * q, g, k=12)]
    assert ids1 == ids2


def test_rank_matches_brute_force_oracle():
    rng = np.random.default_rng(1)
    for _ in range(25):
        g = toy_gallery(rng, n=5)
        q = unit_rows(rng, 1, 6)[0]
        ours = [i for i, _ in rank(q, g, k=5)]
        assert ours == brute_force_ranking(q, g.embeddings, g.ids)


def test_rank_breaks_ties_by_ascending_id():
    emb = np.array([[1.0, 0.0]] * 3 + [[0.0, 1.0]])
    g = Gallery(ids=[7, 3, 5, 1], labels=[0, 0, 0, 1], embeddings=emb)
    assert [i for i, _ in rank([1.0, 0.0], g, k=4)] == [3, 5, 7, 1]


def test_rank_is_a_permutation():
    rng = np.random.default_rng(2)
    g = toy_gallery(rng, n=20)
    ids = [i for i, _ in rank(unit_rows(rng, 1, 6)[0], g, k=20)]
    assert sorted(ids) == sorted(g.ids.tolist())


def test_rank_validations():
    rng = np.random.default_rng(3)
    g = toy_gallery(rng, n=4)
    with pytest.raises(ValueError, match="dim"):
        rank(np.ones(3), g, k=2)
    with pytest.raises(ValueError, match="k="):
        rank(np.ones(6), g, k=9)


# -------------------------------------------------------------------- AP

def test_ap_perfect_ranking():
    assert average_precision_at_k([1, 1, 1], num_positives=5, k=3) == 1.0


def test_ap_hand_checked_case():
    # [pos, neg, pos], R=2, k=3 -> (1/2) * (1/1 + 2/3)
    ap = average_precision_at_k([1, 0, 1], num_positives=2, k=3)
    assert abs(ap - 5.0 / 6.0) < 1e-12
    assert abs(ap - 0.83333) < 1e-5


def test_ap_no_relevant_items():
    assert average_precision_at_k([0, 0, 0], num_positives=2, k=3) == 0.0


def test_ap_requires_positive():
    with pytest.raises(ValueError, match="positive"):
        average_precision_at_k([0, 1], num_positives=0, k=2)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 50),
       nq=st.integers(1, 8), k=st.integers(1, 50))
def test_map_matches_brute_force(seed, n, nq, k):
    rng = np.random.default_rng(seed)
    k = min(k, n)
    g_embs = unit_rows(rng, n, 4)
    g_labels = rng.integers(0, 3, size=n)
    ids = rng.permutation(n).astype(np.int64)
    q_embs = unit_rows(rng, nq, 4)
    q_labels = rng.integers(0, 4, size=nq)  # label 3 may have no positives
    if not any(np.isin(q_labels, g_labels)):
        q_labels[0] = g_labels[0]
    ours = map_at_k(q_embs, q_labels, g_embs, g_labels, ids, k)
    ref = brute_force_map(q_embs, q_labels, g_embs, g_labels, ids, k)
    assert abs(ours[0] - ref[0]) < 1e-12
    assert ours[1:] == ref[1:]


def test_map_excludes_positive_free_queries():
    rng = np.random.default_rng(4)
    g_embs = unit_rows(rng, 6, 4)
    g_labels = np.array([0, 0, 1, 1, 1, 0])
    q_embs = unit_rows(rng, 3, 4)
    value, used, excluded = map_at_k(q_embs, np.array([0, 1, 9]), g_embs, g_labels,
                                     np.arange(6), k=4)
    assert used == 2 and excluded == 1


# --------------------------------------------------------------- gallery

def test_gallery_rejects_unnormalized_and_duplicate_ids():
    with pytest.raises(ValueError, match="unit-norm"):
        Gallery(ids=[0], labels=[0], embeddings=np.array([[2.0, 0.0]]))
    with pytest.raises(ValueError, match="unique"):
        Gallery(ids=[1, 1], labels=[0, 0], embeddings=np.eye(2))


def test_gallery_backfill_monotone_generations():
    g = Gallery(ids=[0, 1], labels=[0, 1], embeddings=np.eye(2), generation=2)
    with pytest.raises(ValueError, match="older generation"):
        g.backfill([0], np.array([[0.0, 1.0]]), generation=1)
    g.backfill([0], np.array([[0.0, 1.0]]), generation=3, keep_previous=True)
    assert g.generations[0] == 3 and g.generations[1] == 2
    np.testing.assert_array_equal(g.prev_embeddings[0], [1.0, 0.0])


# ------------------------------------------------------------- notations

def fixture_models(seed=0, d_in=8, d_emb=6):
    old = EncoderModel(EncoderConfig(input_dim=d_in, embedding_dim=d_emb), seed=seed)
    new = EncoderModel(EncoderConfig(input_dim=d_in, embedding_dim=d_emb), seed=seed + 1)
    ev = make_eval_set(unit_rows(np.random.default_rng(5), 5, d_in), num_queries=12,
                       gallery_per_class=3, noise_sigma=0.2, seed=6)
    return old, new, ev


def test_notations_degenerate_equality():
    old, _, ev = fixture_models()
    psi = identity_upgrade(6, 6)
    rep = evaluate_notations(old, old, psi, ev, k=5)
    assert rep.m_o2o == rep.m_bct == rep.m_fct == rep.m_n2n


def test_identity_psi_makes_fct_equal_bct():
    old, new, ev = fixture_models()
    rep = evaluate_notations(old, new, identity_upgrade(6, 6), ev, k=5)
    assert rep.m_fct == rep.m_bct
    assert rep.m_n2n != rep.m_bct  # different encoders, sanity


def test_notations_pure():
    old, new, ev = fixture_models()
    psi = UpgradeModule(UpgradeConfig(in_dim=6, out_dim=6, hidden_dim=8), seed=3)
    a = evaluate_notations(old, new, psi, ev, k=5)
    b = evaluate_notations(old, new, psi, ev, k=5)
    assert a.to_dict() == b.to_dict()


def test_notations_without_psi_omit_fct():
    old, new, ev = fixture_models()
    rep = evaluate_notations(old, new, None, ev, k=5)
    assert rep.m_fct is None
    assert rep.to_dict()["m_n2n_oracle"] is True


# ----------------------------------------------------------- hot refresh

def test_hot_refresh_endpoints_bit_exact():
    old, new, ev = fixture_models()
    psi = UpgradeModule(UpgradeConfig(in_dim=6, out_dim=6, hidden_dim=8), seed=3)
    rep = evaluate_notations(old, new, psi, ev, k=5)
    g_old = old.embed_np(ev.gallery_inputs)
    gallery = Gallery(ids=np.arange(len(ev.gallery_labels)), labels=ev.gallery_labels,
                      embeddings=g_old)
    q_new = new.embed_np(ev.query_inputs)
    curve = hot_refresh(gallery, psi, q_new, ev.query_labels,
                        fractions=[0.0, 0.25, 0.5, 0.75, 1.0], order_seed=1, k=5)
    assert curve[0][1] == rep.m_bct
    assert curve[-1][1] == rep.m_fct


def test_hot_refresh_does_not_mutate_gallery_and_respects_seed():
    rng = np.random.default_rng(7)
    gallery = toy_gallery(rng, n=10, d=6)
    before = gallery.embeddings.copy()
    psi = UpgradeModule(UpgradeConfig(in_dim=6, out_dim=6, hidden_dim=4), seed=0)
    q = unit_rows(rng, 4, 6)
    ql = gallery.labels[:4]
    c1 = hot_refresh(gallery, psi, q, ql, [0.0, 0.5, 1.0], order_seed=3, k=4)
    c2 = hot_refresh(gallery, psi, q, ql, [0.0, 0.5, 1.0], order_seed=3, k=4)
    np.testing.assert_array_equal(gallery.embeddings, before)
    assert c1 == c2
    assert c1[0][1] == c1[0][1]


def test_hot_refresh_fraction_validation():
    rng = np.random.default_rng(8)
    gallery = toy_gallery(rng, n=6)
    psi = identity_upgrade(6, 6)
    q = unit_rows(rng, 2, 6)
    with pytest.raises(ValueError, match="start at 0"):
        hot_refresh(gallery, psi, q, gallery.labels[:2], [0.1, 1.0], 0, k=3)
    with pytest.raises(ValueError, match="increasing"):
        hot_refresh(gallery, psi, q, gallery.labels[:2], [0.0, 0.5, 0.5, 1.0], 0, k=3)


def test_metric_report_validation():
    with pytest.raises(ValueError, match="outside"):
        MetricReport(m_o2o=1.5, m_bct=None, m_fct=None, m_n2n=None, k=5, num_queries=3)
    with pytest.raises(ValueError, match="increasing"):
        MetricReport(m_o2o=0.5, m_bct=0.5, m_fct=0.5, m_n2n=0.5, k=5, num_queries=3,
                     refresh_curve=[(0.0, 0.1), (0.5, 0.2), (0.5, 0.3), (1.0, 0.4)])
    with pytest.raises(ValueError, match="span"):
        MetricReport(m_o2o=0.5, m_bct=0.5, m_fct=0.5, m_n2n=0.5, k=5, num_queries=3,
                     refresh_curve=[(0.2, 0.1), (1.0, 0.4)])
