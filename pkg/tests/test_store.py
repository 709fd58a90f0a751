import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bict.data import generate, make_eval_set
from bict.models import (
    ArcFaceHead,
    EncoderConfig,
    EncoderModel,
    UpgradeConfig,
    UpgradeModule,
    identity_upgrade,
)
from bict.store import (
    MAGIC,
    load_dataset,
    load_encoder,
    load_head,
    load_upgrade,
    read_embedding_store,
    save_dataset,
    save_encoder,
    save_head,
    save_upgrade,
    write_embedding_store,
)


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 12), dim=st.integers(1, 9), gen=st.integers(0, 5),
       seed=st.integers(0, 2**31 - 1))
def test_store_roundtrip(tmp_path_factory, n, dim, gen, seed):
    tmp = tmp_path_factory.mktemp("store")
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, 2**40, size=n).astype(np.uint64)
    labels = rng.integers(0, 1000, size=n).astype(np.uint32)
    embs = rng.normal(size=(n, dim))
    path = tmp / "x.bict"
    write_embedding_store(path, ids, labels, embs, generation=gen)
    back = read_embedding_store(path)
    assert np.array_equal(back.ids, ids)
    assert np.array_equal(back.labels, labels)
    assert np.array_equal(back.embeddings, embs)
    assert back.generation == gen


def test_store_header_layout(tmp_path):
    path = tmp_path / "h.bict"
    write_embedding_store(path, [3], [7], np.array([[1.5, -2.5]]), generation=4)
    raw = path.read_bytes()
    magic, version, dim, count, gen = struct.unpack_from("<4sIIQI", raw)
    assert magic == MAGIC and version == 1 and dim == 2 and count == 1 and gen == 4
    item_id, label = struct.unpack_from("<QI", raw, 24)
    assert item_id == 3 and label == 7
    assert struct.unpack_from("<2d", raw, 24 + 12) == (1.5, -2.5)


def test_store_rejects_bad_magic_and_size(tmp_path):
    path = tmp_path / "bad.bict"
    write_embedding_store(path, [1], [2], np.ones((1, 3)))
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="magic"):
        read_embedding_store(path)
    write_embedding_store(path, [1], [2], np.ones((1, 3)))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ValueError, match="size"):
        read_embedding_store(path)


def test_store_write_is_deterministic(tmp_path):
    embs = np.random.default_rng(0).normal(size=(5, 4))
    a, b = tmp_path / "a.bict", tmp_path / "b.bict"
    write_embedding_store(a, range(5), [0, 1, 2, 3, 4], embs)
    write_embedding_store(b, range(5), [0, 1, 2, 3, 4], embs)
    assert sha(a) == sha(b)


def test_dataset_roundtrip(tmp_path):
    ds = generate(6, 4, 5, 0.2, seed=13)
    ev = make_eval_set(ds.prototypes, 8, 2, 0.2, seed=14)
    save_dataset(tmp_path, ds, ev)
    back = load_dataset(tmp_path)
    assert np.array_equal(back.inputs, ds.inputs)
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.prototypes, ds.prototypes)
    q = read_embedding_store(tmp_path / "queries.bict")
    assert np.array_equal(q.embeddings, ev.query_inputs)


def test_dataset_load_detects_tampering(tmp_path):
    ds = generate(6, 4, 5, 0.2, seed=13)
    save_dataset(tmp_path, ds)
    stored = read_embedding_store(tmp_path / "train.bict")
    embs = stored.embeddings.copy()
    embs[0, 0] += 1.0
    write_embedding_store(tmp_path / "train.bict", stored.ids, stored.labels, embs)
    with pytest.raises(ValueError, match="does not match"):
        load_dataset(tmp_path)


# ----------------------------------------------------------- checkpoints

def test_encoder_checkpoint_roundtrip(tmp_path):
    enc = EncoderModel(EncoderConfig(input_dim=6, embedding_dim=4, hidden_width=8), seed=3)
    save_encoder(tmp_path / "enc", enc, generation=1)
    back = load_encoder(tmp_path / "enc")
    x = np.random.default_rng(0).normal(size=(5, 6))
    assert np.array_equal(back.embed_np(x), enc.embed_np(x))


def test_head_checkpoint_roundtrip(tmp_path):
    head = ArcFaceHead([2, 5, 9], embedding_dim=4, seed=8, s=12.0, m=0.2)
    save_head(tmp_path / "head", head)
    back = load_head(tmp_path / "head")
    assert np.array_equal(back.weights.values, head.weights.values)
    assert np.array_equal(back.class_ids, head.class_ids)
    assert back.s == 12.0 and back.m == 0.2


def test_upgrade_checkpoint_roundtrip(tmp_path):
    psi = UpgradeModule(UpgradeConfig(in_dim=4, out_dim=4, hidden_dim=6, depth=2), seed=5)
    # perturb running stats so the eval path is exercised
    psi.blocks[0][1].stats.mean += 0.25
    save_upgrade(tmp_path / "psi", psi)
    back = load_upgrade(tmp_path / "psi")
    x = np.random.default_rng(1).normal(size=(3, 4))
    assert np.array_equal(back.upgrade(x).values, psi.upgrade(x).values)


def test_identity_upgrade_checkpoint(tmp_path):
    psi = identity_upgrade(4, 4)
    save_upgrade(tmp_path / "idpsi", psi)
    back = load_upgrade(tmp_path / "idpsi")
    x = np.random.default_rng(2).normal(size=(3, 4))
    assert np.array_equal(back.upgrade(x).values, x)
