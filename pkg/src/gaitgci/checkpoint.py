"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"GCI1" | uint32 entry count | entries sorted by name
    entry = uint32 name length | utf-8 name | uint32 ndim | uint64 dims[ndim] | float64 payload

Architecture fields are stored as ``meta.*`` entries so a checkpoint is
self-describing. Entries are written in sorted order, so identical parameters
give identical bytes.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import GENERATIVE, PREDEFINED, ModelConfig, init_params

MAGIC = b"GCI1"
_CF_KINDS = GENERATIVE + PREDEFINED + ("none",)
_SCALARS = ("strips", "embed_dim", "num_classes", "M", "L", "r", "kernel", "candidates", "slope")
_META = {f"meta.{k}" for k in _SCALARS + ("channels", "pool", "factual", "counterfactual")}


def config_entries(cfg: ModelConfig) -> dict:
    out = {f"meta.{k}": np.array(float(getattr(cfg, k))) for k in _SCALARS}
    out["meta.channels"] = np.array(cfg.channels, dtype=np.float64)
    out["meta.pool"] = np.array(cfg.pool, dtype=np.float64)
    out["meta.factual"] = np.array(float(GENERATIVE.index(cfg.factual)))
    out["meta.counterfactual"] = np.array(float(_CF_KINDS.index(cfg.counterfactual)))
    return out


def config_from_entries(entries) -> ModelConfig:
    missing = sorted(_META - set(entries))
    if missing:
        raise CheckpointError(f"checkpoint lacks architecture fields {missing}")
    kw = {}
    for k in _SCALARS:
        v = float(entries[f"meta.{k}"])
        kw[k] = v if k == "slope" else int(v)
    kw["channels"] = tuple(int(c) for c in entries["meta.channels"])
    kw["pool"] = tuple(bool(p) for p in entries["meta.pool"])
    try:
        kw["factual"] = GENERATIVE[int(entries["meta.factual"])]
        kw["counterfactual"] = _CF_KINDS[int(entries["meta.counterfactual"])]
    except IndexError as exc:
        raise CheckpointError("checkpoint names an unknown generator kind") from exc
    return ModelConfig(**kw)


def encode(params: dict, cfg: ModelConfig) -> bytes:
    table = {**config_entries(cfg), **params}
    chunks = [MAGIC, struct.pack("<I", len(table))]
    for name in sorted(table):
        arr = np.asarray(table[name], dtype="<f8", order="C")  # keeps 0-d entries 0-d
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def decode(blob: bytes):
    """Parse checkpoint bytes into ``(params, ModelConfig)``.

    Entries not belonging to the stored architecture are rejected. The
    counterfactual generator may be absent, since inference never reads it.
    """
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated checkpoint")
        piece = blob[pos:pos + n]
        pos += n
        return piece

    (count,) = struct.unpack("<I", take(4))
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        entries[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after checkpoint table")

    cfg = config_from_entries(entries)
    template = init_params(cfg, 0)
    params = {}
    for name, arr in entries.items():
        if name in _META:
            continue
        if name not in template:
            raise CheckpointError(f"unknown checkpoint field {name!r}")
        if arr.shape != template[name].shape:
            raise CheckpointError(f"field {name!r} has shape {arr.shape}, expected {template[name].shape}")
        params[name] = arr
    absent = sorted(k for k in template if k not in params and not k.startswith("cf."))
    if absent:
        raise CheckpointError(f"checkpoint lacks required fields {absent}")
    return params, cfg


def save(path, params, cfg: ModelConfig):
    Path(path).write_bytes(encode(params, cfg))


def load(path):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(blob)


def strip_counterfactual(params) -> dict:
    return {k: v for k, v in params.items() if not k.startswith("cf.")}
