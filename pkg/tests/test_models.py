import math

import numpy as np
import pytest

from bict.autodiff import l2_normalize, Tensor
from bict.models import (
    ArcFaceHead,
    EncoderConfig,
    EncoderModel,
    ModelGeneration,
    UpgradeConfig,
    UpgradeModule,
    identity_upgrade,
    upgrade_param_count,
)


def test_encoder_output_rows_unit_norm():
    enc = EncoderModel(EncoderConfig(input_dim=10, embedding_dim=6), seed=0)
    x = np.random.default_rng(0).normal(size=(17, 10))
    out = enc.embed(x)
    np.testing.assert_allclose(np.linalg.norm(out.values, axis=1), 1.0, atol=1e-8)


def test_encoder_eval_is_deterministic():
    enc = EncoderModel(EncoderConfig(input_dim=5, embedding_dim=4), seed=1)
    x = np.random.default_rng(1).normal(size=(3, 5))
    assert np.array_equal(enc.embed_np(x), enc.embed_np(x))


def test_encoder_identity_weights_reduce_to_l2_normalize():
    enc = EncoderModel(EncoderConfig(input_dim=4, embedding_dim=4, num_hidden=0), seed=2)
    enc.layers[0].weight.values[...] = np.eye(4)
    enc.layers[0].bias.values[...] = 0.0
    x = np.random.default_rng(2).normal(size=(6, 4))
    np.testing.assert_array_equal(enc.embed_np(x), l2_normalize(Tensor(x)).values)


def test_encoder_shape_error():
    enc = EncoderModel(EncoderConfig(input_dim=5, embedding_dim=4), seed=1)
    with pytest.raises(ValueError, match=r"\(B, 5\)"):
        enc.embed(np.zeros((2, 7)))


def test_encoder_same_seed_same_parameters():
    cfg = EncoderConfig(input_dim=6, embedding_dim=3)
    a = EncoderModel(cfg, seed=9)
    b = EncoderModel(cfg, seed=9)
    for (_, pa), (_, pb) in zip(a.params(), b.params()):
        assert np.array_equal(pa.values, pb.values)


def test_upgrade_module_output_unit_and_deterministic():
    psi = UpgradeModule(UpgradeConfig(in_dim=6, out_dim=4, hidden_dim=8), seed=3)
    x = np.random.default_rng(3).normal(size=(9, 6))
    out = psi.upgrade(x)
    np.testing.assert_allclose(np.linalg.norm(out.values, axis=1), 1.0, atol=1e-8)
    assert np.array_equal(out.values, psi.upgrade(x).values)


def test_upgrade_param_count_matches_closed_form():
    cfg = UpgradeConfig(in_dim=5, out_dim=7, hidden_dim=11, depth=3)
    psi = UpgradeModule(cfg, seed=0)
    actual = sum(p.values.size for _, p in psi.params())
    assert actual == upgrade_param_count(cfg)
    # spot-check the formula itself on the default shape
    assert upgrade_param_count(UpgradeConfig(4, 4, hidden_dim=2, depth=1)) == \
        (4 * 2 + 2) + 2 * 2 + (2 * 4 + 4)


def test_upgrade_architecture_is_depth_blocks_plus_final_fc():
    cfg = UpgradeConfig(in_dim=5, out_dim=7, hidden_dim=11, depth=4)
    psi = UpgradeModule(cfg, seed=0)
    assert len(psi.blocks) == 4
    dims = [lin.weight.shape for lin, _ in psi.blocks] + [psi.final.weight.shape]
    assert dims == [(5, 11), (11, 11), (11, 11), (11, 11), (11, 7)]


def test_identity_upgrade_is_exact():
    psi = identity_upgrade(6, 6)
    x = np.random.default_rng(4).normal(size=(5, 6))
    assert psi.upgrade(x).values is not None
    np.testing.assert_array_equal(psi.upgrade(x).values, x)


def test_identity_upgrade_rejects_dim_change():
    with pytest.raises(ValueError, match="equal dims"):
        identity_upgrade(6, 8)


def test_head_validations():
    with pytest.raises(ValueError, match="scale"):
        ArcFaceHead([0, 1], 4, seed=0, s=0.0)
    with pytest.raises(ValueError, match="margin"):
        ArcFaceHead([0, 1], 4, seed=0, m=math.pi)


def test_head_row_mapping():
    head = ArcFaceHead([3, 7, 11], 4, seed=0)
    rows, known = head.rows_for([7, 11, 5, 3])
    np.testing.assert_array_equal(known, [True, True, False, True])
    np.testing.assert_array_equal(rows[known], [1, 2, 0])


def test_generation_zero_rejects_psi():
    enc = EncoderModel(EncoderConfig(input_dim=4, embedding_dim=4), seed=0)
    head = ArcFaceHead([0, 1], 4, seed=0)
    psi = identity_upgrade(4, 4)
    with pytest.raises(ValueError, match="generation 0"):
        ModelGeneration(index=0, encoder=enc, head=head, psi=psi)
    ModelGeneration(index=1, encoder=enc, head=head, psi=psi)  # fine
