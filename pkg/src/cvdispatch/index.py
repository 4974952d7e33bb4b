"""Spatiotemporal tile index: hierarchical hexagon lattices x time buckets.

Each of the n tiling layers pairs a pointy-top hexagon lattice (edge
lengths shrinking by 1/sqrt(7) per level, i.e. area ratio 7) with a time
bucketing of the day. A state activates exactly one tile per layer; tile
ids are hashed into a fixed-size memory with a seeded 64-bit FNV-1a.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from ._pykernels import cell_code, cell_fields, hex_axial
from .errors import ConfigError

SQRT3 = math.sqrt(3.0)
SECONDS_PER_DAY = 86400

HASH_ALGORITHM_ID = "fnv1a64-seeded-v1"


class GeoPoint(NamedTuple):
    x: float
    y: float


class TileId(NamedTuple):
    layer_tag: int
    cell_code: str


@dataclass
class ActivationVector:
    """Sparse tile-activation counts; values sum to n_tilings."""

    entries: dict[int, int]
    n_tilings: int

    def total(self) -> int:
        return sum(self.entries.values())


@dataclass(frozen=True)
class IndexConfig:
    n_tilings: int = 3
    hex_resolutions: tuple[float, ...] = (3430.0, 1296.4, 490.0)
    time_bucket_seconds: tuple[int, ...] = (1800, 900, 600)
    time_phase_seconds: tuple[int, ...] = (0, 300, 450)
    memory_size: int = 20000
    hash_seed: int = 2166136261

    def __post_init__(self):
        if self.n_tilings < 1:
            raise ConfigError("n_tilings must be >= 1")
        if self.memory_size < 1:
            raise ConfigError("memory_size must be >= 1")
        for name, seq in (
            ("hex_resolutions", self.hex_resolutions),
            ("time_bucket_seconds", self.time_bucket_seconds),
            ("time_phase_seconds", self.time_phase_seconds),
        ):
            if len(seq) != self.n_tilings:
                raise ConfigError(f"{name} must have {self.n_tilings} entries")
        if any(e <= 0 for e in self.hex_resolutions):
            raise ConfigError("hex edge lengths must be positive")
        if any(w <= 0 for w in self.time_bucket_seconds):
            raise ConfigError("time bucket widths must be positive")
        for a, b in zip(self.hex_resolutions, self.hex_resolutions[1:]):
            ratio = (a / b) ** 2
            if not (0.95 * 7.0 <= ratio <= 1.05 * 7.0):
                raise ConfigError(
                    f"successive hex resolutions must shrink by area factor 7, got {ratio:.3f}"
                )

    # Per-layer lattice displacement so overlapping tilings disagree near
    # boundaries. Fractions of one lattice period, fixed and deterministic.
    def layer_offsets(self) -> tuple[np.ndarray, np.ndarray]:
        cached = getattr(self, "_layer_offsets", None)
        if cached is not None:
            return cached
        n = self.n_tilings
        offx = np.array(
            [0.5 * SQRT3 * e * (j / n) for j, e in enumerate(self.hex_resolutions)]
        )
        offy = np.array(
            [0.75 * e * (j / n) for j, e in enumerate(self.hex_resolutions)]
        )
        object.__setattr__(self, "_layer_offsets", (offx, offy))
        return offx, offy

    def to_json_dict(self) -> dict:
        return {
            "n_tilings": self.n_tilings,
            "hex_resolutions": list(self.hex_resolutions),
            "time_bucket_seconds": list(self.time_bucket_seconds),
            "time_phase_seconds": list(self.time_phase_seconds),
            "memory_size": self.memory_size,
            "hash_seed": self.hash_seed,
            "hash_algorithm": HASH_ALGORITHM_ID,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "IndexConfig":
        algo = d.get("hash_algorithm", HASH_ALGORITHM_ID)
        if algo != HASH_ALGORITHM_ID:
            raise ConfigError(f"unsupported hash algorithm {algo!r}")
        return cls(
            n_tilings=int(d["n_tilings"]),
            hex_resolutions=tuple(float(v) for v in d["hex_resolutions"]),
            time_bucket_seconds=tuple(int(v) for v in d["time_bucket_seconds"]),
            time_phase_seconds=tuple(int(v) for v in d["time_phase_seconds"]),
            memory_size=int(d["memory_size"]),
            hash_seed=int(d["hash_seed"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "IndexConfig":
        return cls.from_json_dict(json.loads(s))

    def _kernel_args(self):
        offx, offy = self.layer_offsets()
        return (
            np.asarray(self.hex_resolutions, dtype=np.float64),
            offx,
            offy,
            np.asarray(self.time_bucket_seconds, dtype=np.int64),
            np.asarray(self.time_phase_seconds, dtype=np.int64),
            self.hash_seed,
            self.memory_size,
        )


def hex_cell_at(p: GeoPoint, edge_len: float) -> tuple[int, int]:
    """Axial coordinates of the hexagon cell containing p."""
    if not (math.isfinite(p[0]) and math.isfinite(p[1])):
        raise ValueError("non-finite point")
    if not (edge_len > 0 and math.isfinite(edge_len)):
        raise ValueError("edge length must be positive and finite")
    return hex_axial(p[0], p[1], edge_len)


def hex_center(q: int, r: int, edge_len: float) -> GeoPoint:
    """Planar center of the axial cell (q, r); inverse anchor of hex_cell_at."""
    return GeoPoint(edge_len * SQRT3 * (q + r / 2.0), edge_len * 1.5 * r)


def quantize(l: GeoPoint, mu: int, cfg: IndexConfig) -> list[TileId]:
    """All n activated tile ids for state (location, clock time)."""
    if not (math.isfinite(l[0]) and math.isfinite(l[1])):
        raise ValueError("non-finite point")
    offx, offy = cfg.layer_offsets()
    tiles = []
    for j in range(cfg.n_tilings):
        q, r, tb = cell_fields(
            l[0], l[1], mu, j, cfg.hex_resolutions[j], offx[j], offy[j],
            cfg.time_bucket_seconds[j], cfg.time_phase_seconds[j],
        )
        tiles.append(TileId(j, cell_code(j, q, r, tb).decode("ascii")))
    return tiles


def map_to_memory(t: TileId, cfg: IndexConfig) -> int:
    """Stable seeded hash of the cell code, reduced into [0, memory_size)."""
    return kernels.fnv1a64(t.cell_code.encode("ascii"), cfg.hash_seed) % cfg.memory_size


def activation_vector(l: GeoPoint, mu: int, cfg: IndexConfig) -> ActivationVector:
    """Sparse activation counts over the hashed memory for one state."""
    entries: dict[int, int] = {}
    for t in quantize(l, mu, cfg):
        idx = map_to_memory(t, cfg)
        entries[idx] = entries.get(idx, 0) + 1
    return ActivationVector(entries, cfg.n_tilings)


def activation_indices(
    xs: np.ndarray, ys: np.ndarray, ts: np.ndarray, cfg: IndexConfig
) -> np.ndarray:
    """Batch memory indices, shape (N, n_tilings); the hot path.

    Duplicate indices within a row represent hash collisions (count 2+).
    """
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    ts = np.ascontiguousarray(ts, dtype=np.int64)
    return kernels.activation_indices_batch(xs, ys, ts, *cfg._kernel_args())
