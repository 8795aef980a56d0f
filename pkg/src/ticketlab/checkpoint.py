"""Flat on-disk checkpoint container.

A checkpoint is a directory holding::

    meta.json    version, config digest, round, seeds, tensor index, mask index
    tensors.bin  little-endian float32 tensors, concatenated in index order
    masks.bin    one byte (0/1) per mask element, concatenated in index order

Tensor names are prefixed ``theta0/`` (initialization) and ``theta/`` (current
weights).  Round trips are bit exact.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np

from .pruning import SparsityMask
from .store import NamedTensorStore
from .train import RunCheckpoint

FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class DigestMismatch(ValueError):
    """Checkpoint was written under a different configuration."""


def write_container(path: str | os.PathLike, tensors: Mapping[str, np.ndarray],
                    mask: SparsityMask | None = None, meta: dict | None = None) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    index, offset = {}, 0
    with open(root / "tensors.bin", "wb") as fh:
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            dt = str(arr.dtype)
            if dt not in _DTYPES:
                raise TypeError(f"tensor {name!r}: unsupported dtype {dt}")
            raw = np.ascontiguousarray(arr, dtype=_DTYPES[dt]).tobytes()
            index[name] = {"dtype": dt, "shape": list(arr.shape), "offset": offset, "length": len(raw)}
            fh.write(raw)
            offset += len(raw)
    mask_index = {}
    if mask is not None:
        blob, mask_index = mask.to_bytes()
        (root / "masks.bin").write_bytes(blob)
    full = dict(meta or {})
    full.update({"version": FORMAT_VERSION, "tensors": index, "masks": mask_index,
                 "mask_output_layers": list(mask.output_layers) if mask is not None else []})
    # no sort_keys: index order is the enumeration order
    (root / "meta.json").write_text(json.dumps(full, indent=1) + "\n")


def read_container(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], SparsityMask | None, dict]:
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no checkpoint at {root} (meta.json missing)")
    meta = json.loads(meta_path.read_text())
    if meta.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    blob = (root / "tensors.bin").read_bytes()
    tensors = {}
    for name, e in meta["tensors"].items():
        dt = np.dtype(_DTYPES[e["dtype"]])
        arr = np.frombuffer(blob, dtype=dt, count=e["length"] // dt.itemsize, offset=e["offset"])
        tensors[name] = arr.astype(e["dtype"]).reshape(e["shape"])
    mask = None
    if meta.get("masks"):
        mask = SparsityMask.from_bytes((root / "masks.bin").read_bytes(), meta["masks"],
                                       tuple(meta.get("mask_output_layers", [])))
    return tensors, mask, meta


def _store_tensors(prefix: str, store: NamedTensorStore) -> dict[str, np.ndarray]:
    return {f"{prefix}/{n}": a for n, a in store.items()}


def save_checkpoint(path: str | os.PathLike, ckpt: RunCheckpoint, extra: dict | None = None) -> None:
    tensors = _store_tensors("theta0", ckpt.theta0)
    tensors.update(_store_tensors("theta", ckpt.theta))
    roles = {n: {"prunable": ckpt.theta0.role(n).prunable,
                 "output_layer": ckpt.theta0.role(n).output_layer} for n in ckpt.theta0}
    meta = {"config_digest": ckpt.config_digest, "round": ckpt.round, "seeds": ckpt.seeds,
            "roles": roles, "record": ckpt.record}
    meta.update(extra or {})
    write_container(path, tensors, ckpt.mask, meta)


def load_checkpoint(path: str | os.PathLike, expected_digest: str | None = None,
                    override_digest: bool = False) -> RunCheckpoint:
    tensors, mask, meta = read_container(path)
    digest = meta.get("config_digest", "")
    if expected_digest is not None and digest != expected_digest and not override_digest:
        raise DigestMismatch(
            f"checkpoint {path} has config digest {digest[:12]}..., expected {expected_digest[:12]}...; "
            "pass --override-digest to load it anyway")
    stores = {"theta0": NamedTensorStore(), "theta": NamedTensorStore()}
    for full, arr in tensors.items():
        prefix, name = full.split("/", 1)
        role = meta["roles"][name]
        stores[prefix].add(name, arr, role["prunable"], role["output_layer"])
    if mask is None:
        mask = SparsityMask.ones(stores["theta0"])
    return RunCheckpoint(stores["theta0"], stores["theta"], mask, int(meta["round"]),
                         dict(meta.get("seeds", {})), digest, meta.get("record"))
