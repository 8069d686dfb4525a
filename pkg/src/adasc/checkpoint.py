"""Binary container for tensors: models, optimizer state, feature matrices, datasets.

Layout: ``b"ADDA"``, u32 format version, u64 header length, a JSON header
(tensor directory with dtype / shape / byte offsets plus free-form metadata),
then the raw little-endian tensor payloads back to back.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import data as D
from .adapt import AdamState
from .nn import Model, ModelSpec


MAGIC = b"ADDA"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")  # magic, version, header length


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class FormatVersionError(CheckpointError):
    pass


class DigestMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class atomic_write:
    """Write to a sibling temp file, rename over the target on success."""

    def __init__(self, path, mode):
        self.path = Path(path)
        self.tmp = self.path.with_name(self.path.name + ".tmp")
        self.mode = mode

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        kwargs = {"newline": ""} if "b" not in self.mode else {}
        self.fh = open(self.tmp, self.mode, **kwargs)
        return self.fh

    def __exit__(self, exc_type, *rest):
        self.fh.close()
        if exc_type is None:
            os.replace(self.tmp, self.path)
        else:
            self.tmp.unlink(missing_ok=True)


def write_container(path: str | Path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Magic, u32 version, u64 header length, JSON header, little-endian payloads."""
    directory = []
    offset = 0
    blobs = []
    for name in tensors:
        arr = np.asarray(tensors[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = np.ascontiguousarray(le).tobytes()
        directory.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"tensors": directory, "payload_bytes": offset, "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode()
    with atomic_write(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise TruncatedCheckpointError(f"{path}: file shorter than the container prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint container")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise TruncatedCheckpointError(f"{path}: header cut short")
    header = json.loads(raw[_PREFIX.size:start])
    if len(raw) < start + header["payload_bytes"]:
        raise TruncatedCheckpointError(
            f"{path}: payload has {len(raw) - start} of {header['payload_bytes']} bytes")
    tensors = {}
    for entry in header["tensors"]:
        lo = start + entry["offset"]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]), count=int(np.prod(entry["shape"], dtype=np.int64)),
                            offset=lo)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(arr.dtype.newbyteorder("="))
    return tensors, header["meta"]


@dataclass
class Checkpoint:
    models: dict[str, Model]
    optimizers: dict[str, AdamState]
    metadata: dict


def save_checkpoint(models: Mapping[str, Model], path: str | Path,
                    optimizers: Mapping[str, AdamState] | None = None, metadata: dict | None = None) -> None:
    tensors: dict[str, np.ndarray] = {}
    model_meta = {}
    for key, m in models.items():
        for name, t in m.params.items():
            tensors[f"{key}/param/{name}"] = t.data
        for name, buf in m.buffers.items():
            tensors[f"{key}/buffer/{name}"] = buf
        model_meta[key] = {"spec": m.spec.to_dict(), "digest": m.spec.digest(), "training": m.training}
    opt_meta = {}
    for key, st in (optimizers or {}).items():
        opt_meta[key] = {"step": st.step}
        for name in st.m:
            tensors[f"{key}/adam_m/{name}"] = st.m[name]
            tensors[f"{key}/adam_v/{name}"] = st.v[name]
    write_container(path, tensors, {"models": model_meta, "optimizers": opt_meta, "provenance": metadata or {}})


def read_checkpoint(path: str | Path, specs: Mapping[str, ModelSpec] | None = None) -> Checkpoint:
    """Load every model in the container; a provided spec must match the stored digest."""
    tensors, meta = read_container(path)
    models = {}
    for key, info in meta["models"].items():
        spec = ModelSpec.from_dict(info["spec"])
        if spec.digest() != info["digest"]:
            raise DigestMismatchError(f"{path}: stored spec for {key!r} does not match its digest")
        if specs is not None and key in specs and specs[key].digest() != info["digest"]:
            raise DigestMismatchError(f"{path}: model {key!r} was saved with a different spec")
        m = Model(spec, {}, {}, info["training"])
        for name, arr in tensors.items():
            owner, kind, pname = name.split("/", 2)
            if owner != key:
                continue
            if kind == "param":
                m.params[pname] = ad.Tensor(arr.copy())
            elif kind == "buffer":
                m.buffers[pname] = arr.copy()
        models[key] = m
    optimizers = {}
    for key, info in meta.get("optimizers", {}).items():
        st = AdamState(step=info["step"])
        for name, arr in tensors.items():
            owner, kind, pname = name.split("/", 2)
            if owner == key and kind == "adam_m":
                st.m[pname] = arr.copy()
            elif owner == key and kind == "adam_v":
                st.v[pname] = arr.copy()
        optimizers[key] = st
    return Checkpoint(models, optimizers, meta.get("provenance", {}))


def load_checkpoint(path: str | Path, specs: Mapping[str, ModelSpec] | None = None) -> dict[str, Model]:
    return read_checkpoint(path, specs).models


def save_dataset(ds: D.DomainDataset, path: str | Path, include_oracle: bool = True) -> None:
    """Export a dataset to the container (sealed labels only if asked)."""
    tensors = {"features": ds.features}
    if ds.labels is not None:
        tensors["labels"] = ds.labels
    if include_oracle and ds.oracle is not None:
        tensors["oracle_labels"] = ds.oracle.unseal()
    meta = {"role": ds.role, "class_names": list(ds.class_names),
            "devices": ds.devices.tolist(), "clip_ids": ds.clip_ids.tolist()}
    write_container(path, tensors, meta)


def load_dataset(path: str | Path) -> D.DomainDataset:
    tensors, meta = read_container(path)
    oracle = D.SealedLabels(tensors["oracle_labels"]) if "oracle_labels" in tensors else None
    return D.DomainDataset(tensors["features"], tensors.get("labels"), np.array(meta["devices"]),
                           np.array(meta["clip_ids"]), meta["role"], tuple(meta["class_names"]), oracle)
