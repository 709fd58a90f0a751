"""Binary embedding-store files, dataset export, and model checkpoints.

Store layout (all little-endian):
  magic "BICT" | version u32 | dim u32 | item count u64 | generation u32
  then per item: id u64 | label u32 | dim x f64

The same container carries raw dataset vectors (dim = input dim) and
model embeddings (dim = embedding dim). Checkpoints pair a JSON manifest
with a flat f64 blob holding every state entry in declaration order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import EvalSet, SyntheticDataset, generate
from .models import (
    ArcFaceHead,
    EncoderConfig,
    EncoderModel,
    IdentityUpgrade,
    ModelGeneration,
    UpgradeConfig,
    UpgradeModule,
)

MAGIC = b"BICT"
VERSION = 1
_HEADER = struct.Struct("<4sIIQI")


def _item_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("label", "<u4"), ("emb", "<f8", (dim,))])


@dataclass
class EmbeddingStore:
    ids: np.ndarray        # (N,) uint64
    labels: np.ndarray     # (N,) uint32
    embeddings: np.ndarray  # (N, dim) float64
    generation: int


def write_embedding_store(path, ids, labels, embeddings, generation: int = 0) -> None:
    path = Path(path)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2:
        raise ValueError(f"embeddings must be 2-d, got shape {embeddings.shape}")
    n, dim = embeddings.shape
    items = np.empty(n, dtype=_item_dtype(dim))
    items["id"] = np.asarray(ids, dtype=np.uint64)
    items["label"] = np.asarray(labels, dtype=np.uint32)
    items["emb"] = embeddings
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, dim, n, generation))
        f.write(items.tobytes())


def read_embedding_store(path) -> EmbeddingStore:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated store header")
    magic, version, dim, count, generation = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported store version {version}")
    dtype = _item_dtype(dim)
    expected = _HEADER.size + count * dtype.itemsize
    if len(raw) != expected:
        raise ValueError(f"{path}: size {len(raw)} does not match header (expected {expected})")
    items = np.frombuffer(raw, dtype=dtype, offset=_HEADER.size, count=count)
    return EmbeddingStore(ids=items["id"].copy(), labels=items["label"].copy(),
                          embeddings=items["emb"].astype(np.float64).reshape(count, dim),
                          generation=generation)


# ------------------------------------------------------------ dataset io

def save_dataset(out_dir, ds: SyntheticDataset, eval_set: EvalSet | None = None) -> None:
    """Export a full dataset (and optional eval set) plus JSON manifest.

    Import regenerates from the manifest seed and validates against the
    stored vectors, so only full (unsplit) datasets round-trip.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = ds.num_samples
    if n != ds.num_classes * (n // ds.num_classes):
        raise ValueError("only full datasets can be exported")
    samples_per_class = n // ds.num_classes
    write_embedding_store(out_dir / "train.bict", np.arange(n), ds.labels, ds.inputs)
    manifest = {
        "kind": "bict-dataset",
        "num_classes": ds.num_classes,
        "samples_per_class": samples_per_class,
        "input_dim": ds.input_dim,
        "noise_sigma": ds.noise_sigma,
        "seed": ds.seed,
        "counts": {"train": n},
    }
    if eval_set is not None:
        nq = eval_set.query_inputs.shape[0]
        ng = eval_set.gallery_inputs.shape[0]
        write_embedding_store(out_dir / "queries.bict", np.arange(nq),
                              eval_set.query_labels, eval_set.query_inputs)
        write_embedding_store(out_dir / "gallery.bict", np.arange(ng),
                              eval_set.gallery_labels, eval_set.gallery_inputs)
        manifest["counts"]["queries"] = nq
        manifest["counts"]["gallery"] = ng
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(out_dir) -> SyntheticDataset:
    """Regenerate the dataset named by the manifest and validate the store."""
    out_dir = Path(out_dir)
    with open(out_dir / "manifest.json") as f:
        manifest = json.load(f)
    if manifest.get("kind") != "bict-dataset":
        raise ValueError(f"{out_dir}: manifest is not a dataset manifest")
    ds = generate(manifest["num_classes"], manifest["samples_per_class"],
                  manifest["input_dim"], manifest["noise_sigma"], manifest["seed"])
    stored = read_embedding_store(out_dir / "train.bict")
    if not np.array_equal(stored.embeddings, ds.inputs) or \
            not np.array_equal(stored.labels.astype(np.int64), ds.labels):
        raise ValueError(f"{out_dir}: stored dataset does not match its manifest")
    return ds


# ---------------------------------------------------------- checkpoints

def _write_checkpoint(prefix: Path, manifest: dict, entries) -> None:
    names = [{"name": name, "shape": list(arr.shape)} for name, arr in entries]
    manifest = dict(manifest, entries=names)
    with open(prefix.with_suffix(".json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    blob = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in entries)
    prefix.with_suffix(".bin").write_bytes(blob)


def _read_checkpoint(prefix: Path) -> tuple[dict, list[np.ndarray]]:
    with open(prefix.with_suffix(".json")) as f:
        manifest = json.load(f)
    blob = prefix.with_suffix(".bin").read_bytes()
    arrays = []
    offset = 0
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays.append(arr.astype(np.float64))
        offset += count * 8
    if offset != len(blob):
        raise ValueError(f"{prefix}: parameter blob size mismatch")
    return manifest, arrays


def _restore_entries(model, arrays) -> None:
    entries = model.state_entries()
    if len(entries) != len(arrays):
        raise ValueError("checkpoint entry count does not match model")
    for (name, target), arr in zip(entries, arrays):
        if target.shape != arr.shape:
            raise ValueError(f"checkpoint entry {name}: shape {arr.shape} != {target.shape}")
        target[...] = arr


def save_encoder(prefix, model: EncoderModel, generation: int = 0) -> None:
    manifest = {"kind": "encoder", "config": vars(model.cfg) | {}, "seed": model.seed,
                "generation": generation}
    manifest["config"] = {k: getattr(model.cfg, k) for k in
                          ("input_dim", "embedding_dim", "hidden_width", "num_hidden",
                           "normalize_output")}
    _write_checkpoint(Path(prefix), manifest, model.state_entries())


def load_encoder(prefix) -> EncoderModel:
    manifest, arrays = _read_checkpoint(Path(prefix))
    if manifest["kind"] != "encoder":
        raise ValueError(f"{prefix}: not an encoder checkpoint")
    model = EncoderModel(EncoderConfig(**manifest["config"]), seed=manifest["seed"])
    _restore_entries(model, arrays)
    return model


def save_head(prefix, head: ArcFaceHead, generation: int = 0) -> None:
    manifest = {"kind": "head", "class_ids": head.class_ids.tolist(),
                "embedding_dim": head.embedding_dim, "s": head.s, "m": head.m,
                "seed": head.seed, "generation": generation}
    _write_checkpoint(Path(prefix), manifest, head.state_entries())


def load_head(prefix) -> ArcFaceHead:
    manifest, arrays = _read_checkpoint(Path(prefix))
    if manifest["kind"] != "head":
        raise ValueError(f"{prefix}: not a head checkpoint")
    head = ArcFaceHead(np.asarray(manifest["class_ids"]), manifest["embedding_dim"],
                       seed=manifest["seed"], s=manifest["s"], m=manifest["m"])
    _restore_entries(head, arrays)
    return head


def save_upgrade(prefix, psi, generation: int = 0) -> None:
    if isinstance(psi, IdentityUpgrade):
        manifest = {"kind": "identity-upgrade", "dim": psi.dim, "generation": generation}
        _write_checkpoint(Path(prefix), manifest, [])
        return
    manifest = {"kind": "upgrade",
                "config": {k: getattr(psi.cfg, k) for k in ("in_dim", "out_dim", "hidden_dim", "depth")},
                "seed": psi.seed, "generation": generation}
    _write_checkpoint(Path(prefix), manifest, psi.state_entries())


def load_upgrade(prefix):
    manifest, arrays = _read_checkpoint(Path(prefix))
    if manifest["kind"] == "identity-upgrade":
        return IdentityUpgrade(manifest["dim"])
    if manifest["kind"] != "upgrade":
        raise ValueError(f"{prefix}: not an upgrade checkpoint")
    psi = UpgradeModule(UpgradeConfig(**manifest["config"]), seed=manifest["seed"])
    _restore_entries(psi, arrays)
    return psi


def save_generation(out_dir, gen: ModelGeneration, tag: str) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_encoder(out_dir / f"{tag}_encoder", gen.encoder, generation=gen.index)
    save_head(out_dir / f"{tag}_head", gen.head, generation=gen.index)
    if gen.psi is not None:
        save_upgrade(out_dir / f"{tag}_psi", gen.psi, generation=gen.index)
