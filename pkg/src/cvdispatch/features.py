"""Historical data ingestion and contextual feature store.

Trajectories arrive as JSONL (one trajectory per line) and are split into
per-option transitions; idle gaps between consecutive trips become
zero-reward transitions. Contextual features live in a (name, cell,
time-bucket) keyed store supporting the time-range query with spatial
hierarchy fallback used during context randomization.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .index import GeoPoint, IndexConfig, SECONDS_PER_DAY
from ._pykernels import hex_axial

STEP_SECONDS = 60                 # one SMDP step
DEFAULT_LOG_INTERVAL = 300        # feature logging bucket width (s)
DEFAULT_RANGE_SECONDS = 1800      # rg for context randomization

TRAJECTORY_HEADER = "#cvdispatch-trajectories"
FEATURE_HEADER = "#cvdispatch-features"

DYNAMIC_FEATURE_NAMES = ("query_count", "order_count", "idle_driver_count")


@dataclass
class TransitionTuple:
    origin: GeoPoint
    origin_time: int
    destination: GeoPoint
    destination_time: int
    reward: float
    duration: int                 # k, in SMDP steps
    is_terminal: bool
    trajectory_id: str


@dataclass
class IngestReport:
    transitions: list[TransitionTuple]
    n_lines: int
    errors: list[tuple[int, str]]

    @property
    def n_skipped(self) -> int:
        return len(self.errors)


def _steps(t0: int, t1: int) -> int:
    return max(1, round((t1 - t0) / STEP_SECONDS))


def _event_transition(traj_id: str, ev: dict) -> TransitionTuple:
    t0, t1 = int(ev["t0"]), int(ev["t1"])
    if t1 <= t0:
        raise DataError(f"event ends at {t1} <= start {t0}")
    fare = float(ev.get("fare", 0.0)) if ev["type"] == "trip" else 0.0
    if not math.isfinite(fare) or fare < 0:
        raise DataError(f"bad fare {fare}")
    k = _steps(t0, t1)
    dest_time = min(t0 + k * STEP_SECONDS, SECONDS_PER_DAY)
    return TransitionTuple(
        origin=GeoPoint(float(ev["x0"]), float(ev["y0"])),
        origin_time=t0,
        destination=GeoPoint(float(ev["x1"]), float(ev["y1"])),
        destination_time=dest_time,
        reward=fare,
        duration=k,
        is_terminal=t0 + k * STEP_SECONDS >= SECONDS_PER_DAY,
        trajectory_id=traj_id,
    )


def _trajectory_transitions(obj: dict) -> list[TransitionTuple]:
    traj_id = str(obj["traj_id"])
    events = obj["events"]
    if not isinstance(events, list) or not events:
        raise DataError("trajectory has no events")
    out: list[TransitionTuple] = []
    prev = None
    for ev in events:
        if ev.get("type") not in ("trip", "idle"):
            raise DataError(f"unknown event type {ev.get('type')!r}")
        if prev is not None and int(ev["t0"]) > prev["t1"]:
            # gap between options: idle movement ending where the next
            # trip option is activated
            out.append(_event_transition(traj_id, {
                "type": "idle",
                "t0": prev["t1"], "x0": prev["x1"], "y0": prev["y1"],
                "t1": ev["t0"], "x1": ev["x0"], "y1": ev["y0"],
            }))
        elif prev is not None and int(ev["t0"]) < prev["t1"]:
            raise DataError("overlapping events in trajectory")
        out.append(_event_transition(traj_id, ev))
        prev = {k: ev[k] for k in ("t1", "x1", "y1")}
    out[-1].is_terminal = True
    return out


def ingest_trajectories(lines, cfg: IndexConfig | None = None) -> IngestReport:
    """Parse trajectory JSONL into transitions; bad lines are skipped and counted."""
    transitions: list[TransitionTuple] = []
    errors: list[tuple[int, str]] = []
    n = 0
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith(TRAJECTORY_HEADER):
            file_cfg = IndexConfig.from_json(line[len(TRAJECTORY_HEADER):].strip())
            if cfg is not None and file_cfg != cfg:
                raise ConfigError("trajectory file IndexConfig mismatch")
            continue
        n += 1
        try:
            transitions.extend(_trajectory_transitions(json.loads(line)))
        except (KeyError, TypeError, ValueError, DataError) as e:
            errors.append((lineno, str(e)))
    return IngestReport(transitions, n, errors)


# ---------------------------------------------------------------------------
# Feature store

def spatial_cell_code(p: GeoPoint, layer: int, cfg: IndexConfig) -> str:
    """Time-free hexagon cell id at one tiling layer; feature-store key."""
    offx, offy = cfg.layer_offsets()
    q, r = hex_axial(p[0] + offx[layer], p[1] + offy[layer],
                     cfg.hex_resolutions[layer])
    return f"H{layer}|{q}|{r}"


def _parse_cell_layer(cell: str) -> int:
    if not cell.startswith("H") or "|" not in cell:
        raise DataError(f"bad cell id {cell!r}")
    try:
        return int(cell[1:cell.index("|")])
    except ValueError:
        raise DataError(f"bad cell id {cell!r}") from None


@dataclass
class FeatureStore:
    """Immutable-after-build store of (name, cell, bucket) -> value."""

    index_config: IndexConfig
    feature_names: tuple[str, ...] = DYNAMIC_FEATURE_NAMES
    log_interval: int = DEFAULT_LOG_INTERVAL
    values: dict[tuple[str, str, int], float] = field(default_factory=dict)
    duplicate_count: int = 0
    row_errors: list[tuple[int, str]] = field(default_factory=list)
    # Running (sum, count) per (name, cell) and per name, kept in step with
    # `values` by put() so mean_vector() never rescans the whole store.
    _cell_sums: dict[tuple[str, str], list[float]] = field(default_factory=dict)
    _name_sums: dict[str, list[float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.values and not self._cell_sums:
            for (name, cell, _), v in self.values.items():
                self._accumulate(name, cell, v, None)

    def __len__(self) -> int:
        return len(self.values)

    def put(self, name: str, cell: str, bucket_seconds: int, value: float) -> None:
        _parse_cell_layer(cell)
        if not math.isfinite(value):
            raise DataError(f"non-finite feature value for {name}")
        bucket = (int(bucket_seconds) // self.log_interval) * self.log_interval
        key = (name, cell, bucket)
        old = self.values.get(key)
        if old is not None:
            self.duplicate_count += 1
        self.values[key] = float(value)
        self._accumulate(name, cell, float(value), old)

    def _accumulate(self, name: str, cell: str, value: float, old: float | None) -> None:
        for agg_key, table in ((name, self._name_sums), ((name, cell), self._cell_sums)):
            agg = table.setdefault(agg_key, [0.0, 0.0])
            if old is not None:
                agg[0] += value - old
            else:
                agg[0] += value
                agg[1] += 1.0

    def lookup(self, name: str, l: GeoPoint, bucket: int) -> float | None:
        """Exact bucket lookup with spatial-hierarchy fallback (fine -> coarse)."""
        for layer in range(self.index_config.n_tilings - 1, -1, -1):
            cell = spatial_cell_code(l, layer, self.index_config)
            v = self.values.get((name, cell, bucket))
            if v is not None:
                return v
        return None

    def mean_vector(self, l: GeoPoint) -> np.ndarray:
        """Per-cell training mean of each feature (spatial fallback, then global)."""
        out = np.zeros(len(self.feature_names))
        cells = [
            spatial_cell_code(l, layer, self.index_config)
            for layer in range(self.index_config.n_tilings - 1, -1, -1)
        ]
        for i, name in enumerate(self.feature_names):
            acc = None
            for cell in cells:
                agg = self._cell_sums.get((name, cell))
                if agg is not None and agg[1] > 0:
                    acc = agg[0] / agg[1]
                    break
            if acc is None:
                agg = self._name_sums.get(name)
                acc = agg[0] / agg[1] if agg is not None and agg[1] > 0 else 0.0
            out[i] = acc
        return out


def ingest_features(
    lines,
    cfg: IndexConfig | None = None,
    feature_names: tuple[str, ...] = DYNAMIC_FEATURE_NAMES,
    log_interval: int = DEFAULT_LOG_INTERVAL,
) -> FeatureStore:
    """Build a FeatureStore from CSV rows name,cell_code,bucket_seconds,value."""
    store_cfg = cfg
    rows: list[tuple[int, str]] = []
    store = None
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith(FEATURE_HEADER):
            file_cfg = IndexConfig.from_json(line[len(FEATURE_HEADER):].strip())
            if cfg is not None and file_cfg != cfg:
                raise ConfigError("feature file IndexConfig mismatch")
            store_cfg = file_cfg
            continue
        if line.startswith("name,"):   # column header
            continue
        if store is None:
            if store_cfg is None:
                raise ConfigError("feature stream lacks an IndexConfig header")
            store = FeatureStore(store_cfg, feature_names, log_interval)
        parts = line.split(",")
        try:
            if len(parts) != 4:
                raise DataError(f"expected 4 columns, got {len(parts)}")
            store.put(parts[0], parts[1], int(parts[2]), float(parts[3]))
        except (ValueError, DataError) as e:
            store.row_errors.append((lineno, str(e)))
    if store is None:
        if store_cfg is None:
            raise ConfigError("feature stream lacks an IndexConfig header")
        store = FeatureStore(store_cfg, feature_names, log_interval)
    return store


def range_query(
    l: GeoPoint, mu: int, rg: int, store: FeatureStore
) -> list[tuple[int, np.ndarray]]:
    """Context vectors for every populated bucket intersecting [mu-rg, mu+rg].

    Buckets where any named feature is unresolvable (even after the
    spatial-hierarchy fallback) are omitted. Ordered by bucket time.
    """
    if rg < 0:
        raise ValueError("rg must be >= 0")
    interval = store.log_interval
    lo = (mu - rg) // interval
    hi = (mu + rg) // interval
    cells = [
        spatial_cell_code(l, layer, store.index_config)
        for layer in range(store.index_config.n_tilings - 1, -1, -1)
    ]
    values = store.values
    out = []
    for b in range(lo, hi + 1):
        bucket = b * interval
        if bucket < 0 or bucket >= SECONDS_PER_DAY:
            continue
        vec = np.empty(len(store.feature_names))
        ok = True
        for i, name in enumerate(store.feature_names):
            v = None
            for cell in cells:
                v = values.get((name, cell, bucket))
                if v is not None:
                    break
            if v is None:
                ok = False
                break
            vec[i] = v
        if ok:
            out.append((bucket, vec))
    return out


@dataclass
class AugmentedTransition:
    transition: TransitionTuple
    origin_context: np.ndarray
    destination_context: np.ndarray
    origin_context_missing: bool
    destination_context_missing: bool


def randomize_context(
    t: TransitionTuple,
    rg: int,
    store: FeatureStore,
    rng: np.random.Generator,
) -> AugmentedTransition:
    """Sample a context vector uniformly from the range query at each endpoint.

    Endpoints with an empty query result get the per-cell training-mean
    vector and are flagged context-missing.
    """
    def sample(l: GeoPoint, mu: int) -> tuple[np.ndarray, bool]:
        cands = range_query(l, mu, rg, store)
        if not cands:
            return store.mean_vector(l), True
        pick = int(rng.integers(len(cands)))
        return cands[pick][1], False

    o_ctx, o_missing = sample(t.origin, t.origin_time)
    d_ctx, d_missing = sample(t.destination, min(t.destination_time, SECONDS_PER_DAY - 1))
    return AugmentedTransition(t, o_ctx, d_ctx, o_missing, d_missing)
