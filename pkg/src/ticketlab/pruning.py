"""Binary masks over prunable parameters and the prune / rewind primitives.

Selection is by exact count: a step at rate ``p`` removes ``floor(p * s)`` of
the ``s`` currently surviving entries, smallest magnitude first.  Already
pruned entries never enter the ranking.  Ties are broken by (parameter name,
flat index) ascending so masks are fully deterministic.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .store import NamedTensorStore


class PruneWarning(UserWarning):
    """A prune step that removes nothing because ``floor(p * s) == 0``."""


@dataclass
class PruneConfig:
    rate: float = 0.2
    target_sparsity: float = 0.9
    scope: str = "global"
    output_layer_factor: float = 0.5
    max_rounds: int = 15

    def __post_init__(self):
        if not 0 < self.rate < 1:
            raise ValueError(f"prune rate must be in (0, 1), got {self.rate}")
        if not 0 < self.target_sparsity < 1:
            raise ValueError(f"target sparsity must be in (0, 1), got {self.target_sparsity}")
        if self.scope not in ("global", "layerwise"):
            raise ValueError(f"scope must be 'global' or 'layerwise', got {self.scope!r}")
        if not 0 < self.output_layer_factor <= 1:
            raise ValueError("output_layer_factor must be in (0, 1]")
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "PruneConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class SparsityMask:
    """``name -> bool array`` for every prunable tensor, in enumeration order."""

    def __init__(self, bits: dict[str, np.ndarray], output_layers: tuple[str, ...] = ()):
        self.bits = {n: np.asarray(b, dtype=bool) for n, b in bits.items()}
        self.output_layers = tuple(output_layers)

    @classmethod
    def ones(cls, store: NamedTensorStore) -> "SparsityMask":
        return cls({n: np.ones(store[n].shape, dtype=bool) for n in store.prunable_names()},
                   tuple(store.output_layer_names()))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.bits[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.bits)

    def __len__(self) -> int:
        return len(self.bits)

    def names(self) -> list[str]:
        return list(self.bits)

    def copy(self) -> "SparsityMask":
        return SparsityMask({n: b.copy() for n, b in self.bits.items()}, self.output_layers)

    def total(self) -> int:
        return sum(b.size for b in self.bits.values())

    def survivors(self) -> int:
        return int(sum(int(b.sum()) for b in self.bits.values()))

    def equals(self, other: "SparsityMask") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self.bits[n], other.bits[n]) for n in self.bits)

    def is_subset_of(self, other: "SparsityMask") -> bool:
        return all(not np.any(self.bits[n] & ~other.bits[n]) for n in self.bits)

    def to_bytes(self) -> tuple[bytes, dict[str, dict]]:
        """One byte (0/1) per element, tensors concatenated in order, plus the index."""
        index, chunks, offset = {}, [], 0
        for n, b in self.bits.items():
            raw = b.astype(np.uint8).reshape(-1).tobytes()
            index[n] = {"offset": offset, "length": len(raw), "shape": list(b.shape)}
            chunks.append(raw)
            offset += len(raw)
        return b"".join(chunks), index

    @classmethod
    def from_bytes(cls, blob: bytes, index: dict[str, dict],
                   output_layers: tuple[str, ...] = ()) -> "SparsityMask":
        bits = {}
        for n, entry in index.items():
            raw = np.frombuffer(blob, dtype=np.uint8, count=entry["length"], offset=entry["offset"])
            if np.any(raw > 1):
                raise ValueError(f"mask {n!r} contains bytes other than 0/1")
            bits[n] = raw.astype(bool).reshape(entry["shape"])
        return cls(bits, output_layers)


def sparsity(mask: SparsityMask) -> float:
    total = mask.total()
    return 0.0 if total == 0 else 1.0 - mask.survivors() / total


def _check_aligned(store: NamedTensorStore, mask: SparsityMask) -> None:
    for n in mask:
        if n not in store:
            raise ValueError(f"mask entry {n!r} has no matching parameter")
        if store[n].shape != mask[n].shape:
            raise ValueError(f"mask for {n!r} has shape {mask[n].shape}, parameter {store[n].shape}")
    missing = [n for n in store.prunable_names() if n not in mask.bits]
    if missing:
        raise ValueError(f"mask missing prunable parameters: {missing}")


def prune_count(rate: float, survivors: int) -> int:
    return int(math.floor(rate * survivors))


def _smallest(values: np.ndarray, count: int) -> np.ndarray:
    # stable sort keeps pool order among equal magnitudes
    return np.argsort(values, kind="stable")[:count]


def prune_step_global(theta: NamedTensorStore, mask: SparsityMask, p: float) -> SparsityMask:
    """Zero the ``floor(p*s)`` smallest-|value| survivors pooled over every layer."""
    _check_aligned(theta, mask)
    s = mask.survivors()
    count = prune_count(p, s)
    if count < 1:
        warnings.warn(f"prune step removes nothing: floor({p} * {s}) == 0", PruneWarning,
                      stacklevel=2)
        return mask.copy()
    names = sorted(mask.names())
    flat_idx = [np.flatnonzero(mask[n]) for n in names]
    pool = np.concatenate([np.abs(theta[n]).reshape(-1)[i] for n, i in zip(names, flat_idx)])
    owner = np.concatenate([np.full(len(i), k, dtype=np.int64) for k, i in enumerate(flat_idx)])
    where = np.concatenate(flat_idx)
    chosen = _smallest(pool, count)
    out = mask.copy()
    for k, n in enumerate(names):
        sel = where[chosen[owner[chosen] == k]]
        out.bits[n].reshape(-1)[sel] = False
    return out


def prune_step_layerwise(theta: NamedTensorStore, mask: SparsityMask, p: float,
                         output_layer_factor: float = 0.5) -> SparsityMask:
    """Per tensor, zero the ``floor(rate*s_layer)`` smallest survivors.

    ``rate`` is ``p`` except for the output layer, which uses ``p * output_layer_factor``.
    """
    _check_aligned(theta, mask)
    out = mask.copy()
    for n in mask.names():
        rate = p * output_layer_factor if n in mask.output_layers else p
        idx = np.flatnonzero(mask[n])
        count = prune_count(rate, idx.size)
        if count < 1:
            continue
        vals = np.abs(theta[n]).reshape(-1)[idx]
        out.bits[n].reshape(-1)[idx[_smallest(vals, count)]] = False
    return out


def prune_step_random(mask: SparsityMask, p: float, seed: int) -> SparsityMask:
    """Zero ``floor(p*s)`` survivors drawn uniformly without replacement."""
    names = sorted(mask.names())
    flat_idx = [np.flatnonzero(mask[n]) for n in names]
    s = sum(len(i) for i in flat_idx)
    count = prune_count(p, s)
    out = mask.copy()
    if count < 1:
        return out
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) % (1 << 64)))
    chosen = np.sort(rng.choice(s, size=count, replace=False))
    bounds = np.cumsum([0] + [len(i) for i in flat_idx])
    for k, n in enumerate(names):
        lo, hi = bounds[k], bounds[k + 1]
        local = chosen[(chosen >= lo) & (chosen < hi)] - lo
        out.bits[n].reshape(-1)[flat_idx[k][local]] = False
    return out


def prune_to_fraction(theta: NamedTensorStore, mask: SparsityMask, fraction: float,
                      kind: str = "magnitude", seed: int = 0) -> SparsityMask:
    """One-shot cut of ``floor(fraction * s)`` survivors, by magnitude or at random."""
    if kind == "magnitude":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", PruneWarning)
            return prune_step_global(theta, mask, fraction)
    if kind == "random":
        return prune_step_random(mask, fraction, seed)
    raise ValueError(f"unknown one-shot kind {kind!r}; expected 'magnitude' or 'random'")


def rewind(theta0: NamedTensorStore, mask: SparsityMask) -> NamedTensorStore:
    """``m * theta0`` for prunable tensors; every other tensor is copied from ``theta0``."""
    _check_aligned(theta0, mask)
    out = theta0.copy()
    for n in mask:
        out[n] = np.where(mask[n], theta0[n], np.zeros((), dtype=theta0[n].dtype))
    return out


def apply_mask(theta: NamedTensorStore, mask: SparsityMask) -> NamedTensorStore:
    """Force masked entries to exactly 0; survivors untouched."""
    _check_aligned(theta, mask)
    out = theta.copy()
    for n in mask:
        out[n] = np.where(mask[n], theta[n], np.zeros((), dtype=theta[n].dtype))
    return out


def compression_rate(dense_count: float, sparse_count: float) -> float:
    if sparse_count <= 0:
        raise ValueError("sparse parameter count must be positive")
    return round(dense_count / sparse_count, 2)


def format_compression(dense_count: float, sparse_count: float) -> str:
    return f"x{compression_rate(dense_count, sparse_count):.2f}"


def expected_density(k: int, p: float) -> float:
    if k < 0:
        raise ValueError("round count must be >= 0")
    return (1.0 - p) ** k


def mask_index_json(mask: SparsityMask) -> str:
    return json.dumps(mask.to_bytes()[1], sort_keys=True)
