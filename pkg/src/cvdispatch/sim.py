"""Multi-driver dispatch simulator on a synthetic city.

Demand is a mixture of Gaussian hotspots that drift over the day, thinned by a
double-peak daily intensity profile. Order arrivals are precomputed per seed
so that different dispatch policies replay identical demand (common random
numbers). Travel is straight-line at constant speed; drivers go on- and
offline under constant hazards. Every `window_s` seconds pending orders are
matched to idle drivers by the assignment solver and metrics are accounted:
total driver income (TDI), answer rate, finish rate, mean pickup distance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .features import FEATURE_HEADER, TRAJECTORY_HEADER, spatial_cell_code
from .index import GeoPoint, IndexConfig
from . import matching
from .rngs import substream

SECONDS_PER_DAY = 86400

# driver status codes
IDLE, EN_ROUTE, ON_TRIP, OFFLINE = 0, 1, 2, 3

# order lifecycle
PENDING, ANSWERED, FINISHED, CANCELLED, EXPIRED = (
    "pending", "answered", "finished", "cancelled", "expired")


@dataclass(frozen=True)
class WorldConfig:
    world_size_m: float = 20000.0
    horizon_s: int = SECONDS_PER_DAY
    window_s: int = 10
    n_drivers: int = 200
    daily_orders: float = 5000.0
    fare_base: float = 2.0
    fare_per_km: float = 1.5
    speed_mps: float = 8.0
    patience_s: int = 300
    cancel_cap: float = 0.8
    cancel_scale_m: float = 5000.0
    offline_rate: float = 1e-5          # per-second hazard, idle drivers
    online_rate: float = 5e-5           # per-second hazard, offline drivers
    n_hotspots: int = 4
    hotspot_sigma_m: float = 1500.0
    drift_amplitude_m: float = 3000.0
    broadcast_radius_m: float = 2000.0
    step_seconds: int = 60
    idle_drift_bias: float = 0.3        # P(idle step aims at a hotspot)
    dest_uniform_frac: float = 0.0      # P(order destination is uniform)

    def __post_init__(self):
        positives = (
            "world_size_m", "horizon_s", "window_s", "daily_orders",
            "speed_mps", "patience_s", "cancel_scale_m", "n_hotspots",
            "hotspot_sigma_m", "broadcast_radius_m", "step_seconds",
        )
        for name in positives:
            if getattr(self, name) <= 0:
                raise ConfigError(f"WorldConfig.{name} must be positive")
        for name in ("n_drivers", "fare_base", "fare_per_km", "offline_rate",
                     "online_rate", "drift_amplitude_m"):
            if getattr(self, name) < 0:
                raise ConfigError(f"WorldConfig.{name} must be non-negative")
        if not 0.0 <= self.cancel_cap <= 1.0:
            raise ConfigError("WorldConfig.cancel_cap must be in [0, 1]")
        if not 0.0 <= self.idle_drift_bias <= 1.0:
            raise ConfigError("WorldConfig.idle_drift_bias must be in [0, 1]")
        if not 0.0 <= self.dest_uniform_frac <= 1.0:
            raise ConfigError("WorldConfig.dest_uniform_frac must be in [0, 1]")


@dataclass
class Order:
    id: int
    request_time: int
    origin: GeoPoint
    destination: GeoPoint
    fare: float
    duration_steps: int
    state: str = PENDING
    driver: int | None = None
    answer_time: int | None = None
    pickup_m: float = 0.0


@dataclass
class Hotspots:
    base: np.ndarray          # (K, 2) centers at t=0
    phases: np.ndarray        # (K,)
    weights: np.ndarray       # (K,) mixture weights

    def centers(self, t: float, cfg: WorldConfig) -> np.ndarray:
        ang = 2 * math.pi * t / SECONDS_PER_DAY + self.phases
        off = cfg.drift_amplitude_m * np.stack([np.sin(ang), np.cos(ang)], axis=1)
        return np.clip(self.base + off, 0.0, cfg.world_size_m)


def _daily_profile(t: np.ndarray) -> np.ndarray:
    """Relative arrival intensity over the day: baseline plus two rush peaks."""
    h = t / 3600.0 % 24.0
    return (0.4
            + 1.0 * np.exp(-0.5 * ((h - 8.5) / 1.5) ** 2)
            + 1.2 * np.exp(-0.5 * ((h - 18.0) / 2.0) ** 2))


class World:
    """Mutable simulation state for one episode."""

    def __init__(self, cfg: WorldConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.clock = 0

        rng = substream(seed, "world-init")
        k = cfg.n_hotspots
        self.hotspots = Hotspots(
            base=rng.uniform(0.2 * cfg.world_size_m, 0.8 * cfg.world_size_m, (k, 2)),
            phases=rng.uniform(0, 2 * math.pi, k),
            weights=np.full(k, 1.0 / k),
        )

        # precomputed arrival stream: shared across policies for a given seed
        arr = substream(seed, "arrivals")
        lam = cfg.daily_orders * cfg.horizon_s / SECONDS_PER_DAY
        n = int(arr.poisson(lam))
        grid = np.arange(0, cfg.horizon_s, 60.0)
        weights = _daily_profile(grid)
        cdf = np.cumsum(weights)
        cdf /= cdf[-1]
        u = np.sort(arr.random(n))
        slots = np.searchsorted(cdf, u)
        times = grid[slots] + arr.random(n) * 60.0
        times = np.minimum(times, cfg.horizon_s - 1)

        self.orders: list[Order] = []
        for i in range(n):
            t = float(times[i])
            origin = self._sample_point(arr, t)
            if arr.random() < cfg.dest_uniform_frac:
                dest = GeoPoint(float(arr.uniform(0, cfg.world_size_m)),
                                float(arr.uniform(0, cfg.world_size_m)))
            else:
                dest = self._sample_point(arr, t + 900.0)
            trip_m = math.hypot(dest.x - origin.x, dest.y - origin.y)
            dur_s = max(cfg.step_seconds, trip_m / cfg.speed_mps)
            self.orders.append(Order(
                id=i, request_time=int(t), origin=origin, destination=dest,
                fare=cfg.fare_base + cfg.fare_per_km * trip_m / 1000.0,
                duration_steps=max(1, round(dur_s / cfg.step_seconds)),
            ))
        self._next_arrival = 0

        # driver state (struct of arrays)
        drv = substream(seed, "drivers")
        nd = cfg.n_drivers
        self.pos = drv.uniform(0, cfg.world_size_m, (nd, 2))
        self.status = np.full(nd, IDLE, dtype=np.int8)
        self.busy_until = np.zeros(nd)
        self.income = np.zeros(nd)
        self.trip_order = np.full(nd, -1, dtype=np.int64)
        self.trip_dest = np.zeros((nd, 2))

        # dynamics randomness: policy-dependent divergence lives here
        self.rng = substream(seed, "dynamics")

        self.pending: list[Order] = []
        self.events: list[dict] = []
        self.trajectories: dict[int, list[dict]] = {i: [] for i in range(nd)}
        self.window_series: list[dict] = []
        self.minute_snapshots: list[tuple[int, np.ndarray]] = []
        self._next_snapshot = 0
        self.requested = 0
        self.answered = 0
        self.finished = 0
        self.cancelled = 0
        self.expired = 0
        self.pickup_sum = 0.0

    def _sample_point(self, rng, t: float) -> GeoPoint:
        c = self.hotspots.centers(t, self.cfg)
        k = rng.choice(len(c), p=self.hotspots.weights)
        s = self.cfg.hotspot_sigma_m
        x, y = np.clip(c[k] + rng.normal(0, s, 2), 0.0, self.cfg.world_size_m)
        return GeoPoint(float(x), float(y))

    # -- auditing ----------------------------------------------------------
    def audit_assignment(self, pairs, id_to_order):
        drivers_seen, orders_seen = set(), set()
        for did, oid in pairs:
            d = int(did)
            if d in drivers_seen or oid in orders_seen:
                raise DataError("double-booked driver or order in assignment")
            drivers_seen.add(d)
            orders_seen.add(oid)
            if self.status[d] != IDLE:
                raise DataError(f"driver {d} assigned while not idle")
            if id_to_order[oid].state != PENDING:
                raise DataError(f"order {oid} assigned while {id_to_order[oid].state}")

    @property
    def tdi(self) -> float:
        return float(self.income.sum())


@dataclass
class EpisodeMetrics:
    tdi: float
    requested: int
    answered: int
    finished: int
    cancelled: int
    expired: int
    mean_pickup_m: float
    window_series: list[dict] = field(repr=False, default_factory=list)

    @property
    def answer_rate(self) -> float:
        return self.answered / self.requested if self.requested else 0.0

    @property
    def finish_rate(self) -> float:
        return self.finished / self.requested if self.requested else 0.0

    def csv_row(self) -> str:
        return (f"{self.tdi:.6f},{self.requested},{self.answered},"
                f"{self.finished},{self.cancelled},{self.expired},"
                f"{self.answer_rate:.6f},{self.finish_rate:.6f},"
                f"{self.mean_pickup_m:.6f}")

    CSV_HEADER = ("tdi,requested,answered,finished,cancelled,expired,"
                  "answer_rate,finish_rate,mean_pickup_m")


# ---------------------------------------------------------------------------
# policies

class MyopicPolicy:
    """Match by proximity: utility is the negative pickup distance."""

    name = "myopic"

    def score(self, matrix: matching.UtilityMatrix):
        rho = np.array([-c.pickup_m for c in matrix.candidates])
        matrix.utilities = rho
        return matrix, -np.inf


class ValuePolicy:
    """Utility via discounted trip reward plus the value-gain term."""

    def __init__(self, name: str, batch_eval, gamma: float, omega: float = 0.0,
                 cancel_aware: bool = False):
        self.name = name
        self.batch_eval = batch_eval
        self.gamma = gamma
        self.omega = omega
        self.cancel_aware = cancel_aware

    def score(self, matrix: matching.UtilityMatrix):
        return matrix, 0.0


def tabular_batch_eval(table) -> Callable:
    def batch(points, times):
        return np.array([table.value(p, int(t)) for p, t in zip(points, times)])
    return batch


def network_batch_eval(params, index_config: IndexConfig, static: np.ndarray) -> Callable:
    from . import network as net
    from .index import activation_indices

    def batch(points, times):
        xs = np.array([p.x for p in points])
        ys = np.array([p.y for p in points])
        ts = np.minimum(np.asarray(times, dtype=np.int64), SECONDS_PER_DAY - 1)
        idx = activation_indices(xs, ys, ts, index_config)
        stat = np.broadcast_to(static, (len(points), len(static)))
        return net.batch_forward_distilled(idx, stat, params)

    return batch


def generate_city(cfg: WorldConfig, seed: int) -> World:
    return World(cfg, seed)


# ---------------------------------------------------------------------------
# stepping

def _zero_eval(points, times):
    return np.zeros(len(points))


def step_window(world: World, policy) -> dict:
    cfg = world.cfg
    t0, t1 = world.clock, world.clock + cfg.window_s

    # minute snapshots of idle-driver positions, for the dynamic feature export
    while world._next_snapshot < t1 and world._next_snapshot < cfg.horizon_s:
        idle_pos = world.pos[world.status == IDLE].copy()
        world.minute_snapshots.append((world._next_snapshot, idle_pos))
        world._next_snapshot += 60

    # complete trips / pickups that end inside this window
    due = np.flatnonzero((world.status == ON_TRIP) & (world.busy_until <= t1))
    for d in due:
        oid = int(world.trip_order[d])
        order = world.orders[oid]
        world.pos[d] = world.trip_dest[d]
        world.income[d] += order.fare
        world.status[d] = IDLE
        world.trip_order[d] = -1
        order.state = FINISHED
        world.finished += 1
        world.events.append({"t": int(world.busy_until[d]), "type": "finished",
                             "order": oid, "driver": int(d)})
        world.trajectories[int(d)].append({
            "type": "trip", "t0": order.answer_time,
            "x0": order.origin.x, "y0": order.origin.y,
            "t1": int(world.busy_until[d]),
            "x1": order.destination.x, "y1": order.destination.y,
            "fare": order.fare,
        })

    # new arrivals
    new = 0
    while (world._next_arrival < len(world.orders)
           and world.orders[world._next_arrival].request_time < t1):
        o = world.orders[world._next_arrival]
        world.pending.append(o)
        world.requested += 1
        new += 1
        world.events.append({"t": o.request_time, "type": "requested", "order": o.id})
        world._next_arrival += 1

    # expiry
    still = []
    for o in world.pending:
        if t1 - o.request_time > cfg.patience_s:
            o.state = EXPIRED
            world.expired += 1
            world.events.append({"t": t1, "type": "expired", "order": o.id})
        else:
            still.append(o)
    world.pending = still

    # dispatch
    answered_now = 0
    if world.pending:
        idle = np.flatnonzero(world.status == IDLE)
        if len(idle):
            drivers = [(str(d), GeoPoint(world.pos[d, 0], world.pos[d, 1]))
                       for d in idle]
            orders = [(o.id, o.origin, o.destination, o.fare, o.duration_steps)
                      for o in world.pending]
            if isinstance(policy, MyopicPolicy):
                batch_eval, gamma, omega = _zero_eval, 0.5, 0.0
            else:
                batch_eval, gamma, omega = policy.batch_eval, policy.gamma, policy.omega
            cancel_scale = (cfg.cancel_scale_m
                            if getattr(policy, "cancel_aware", False) else None)
            m = matching.build_utility_matrix(
                drivers, orders, batch_eval, now=t0, gamma=gamma, omega=omega,
                radius_m=cfg.broadcast_radius_m, step_seconds=cfg.step_seconds,
                pickup_speed_mps=cfg.speed_mps,
                cancel_scale_m=cancel_scale, cancel_cap=cfg.cancel_cap)
            m, threshold = policy.score(m)
            assignment = matching.solve_assignment(m, skip_threshold=threshold)
            id_to_order = {o.id: o for o in world.pending}
            world.audit_assignment(assignment.pairs, id_to_order)
            cand = m.cell_index()
            for did, oid in assignment.pairs:
                d = int(did)
                order = id_to_order[oid]
                pickup = m.candidates[cand[(did, oid)]].pickup_m
                order.state = ANSWERED
                order.answer_time = t1
                order.driver = d
                order.pickup_m = pickup
                world.answered += 1
                answered_now += 1
                world.pickup_sum += pickup
                world.events.append({"t": t1, "type": "answered", "order": oid,
                                     "driver": d, "pickup_m": round(pickup, 3)})
                p_cancel = min(cfg.cancel_cap, pickup / cfg.cancel_scale_m)
                if world.rng.random() < p_cancel:
                    order.state = CANCELLED
                    world.cancelled += 1
                    world.events.append({"t": t1, "type": "cancelled", "order": oid})
                    continue
                travel_s = (pickup + math.hypot(
                    order.destination.x - order.origin.x,
                    order.destination.y - order.origin.y)) / cfg.speed_mps
                world.status[d] = ON_TRIP
                world.busy_until[d] = t1 + travel_s
                world.trip_order[d] = oid
                world.trip_dest[d] = (order.destination.x, order.destination.y)
            world.pending = [o for o in world.pending if o.state == PENDING]

    # idle movement: short step, biased toward a sampled hotspot
    idle = np.flatnonzero(world.status == IDLE)
    if len(idle):
        step_len = cfg.speed_mps * cfg.window_s
        centers = world.hotspots.centers(t0, cfg)
        toward = world.rng.random(len(idle)) < cfg.idle_drift_bias
        theta = world.rng.uniform(0, 2 * math.pi, len(idle))
        delta = step_len * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        if toward.any():
            k = world.rng.choice(len(centers), size=int(toward.sum()),
                                 p=world.hotspots.weights)
            vec = centers[k] - world.pos[idle[toward]]
            norm = np.maximum(np.hypot(vec[:, 0], vec[:, 1]), 1e-9)[:, None]
            delta[toward] = vec / norm * np.minimum(step_len, norm[:, 0])[:, None]
        world.pos[idle] = np.clip(world.pos[idle] + delta, 0, cfg.world_size_m)

    # online/offline transitions
    if cfg.offline_rate > 0:
        idle = np.flatnonzero(world.status == IDLE)
        drop = idle[world.rng.random(len(idle)) < cfg.offline_rate * cfg.window_s]
        world.status[drop] = OFFLINE
    if cfg.online_rate > 0:
        off = np.flatnonzero(world.status == OFFLINE)
        back = off[world.rng.random(len(off)) < cfg.online_rate * cfg.window_s]
        world.status[back] = IDLE

    world.clock = t1
    report = {"t": t0, "requested": new, "answered": answered_now,
              "pending": len(world.pending)}
    world.window_series.append(report)
    return report


def run_episode(cfg: WorldConfig, policy, seed: int) -> tuple[EpisodeMetrics, World]:
    world = generate_city(cfg, seed)
    n_windows = cfg.horizon_s // cfg.window_s
    for _ in range(n_windows):
        step_window(world, policy)
    metrics = EpisodeMetrics(
        tdi=world.tdi, requested=world.requested, answered=world.answered,
        finished=world.finished, cancelled=world.cancelled,
        expired=world.expired,
        mean_pickup_m=world.pickup_sum / world.answered if world.answered else 0.0,
        window_series=world.window_series,
    )
    if abs(metrics.tdi - sum(o.fare for o in world.orders if o.state == FINISHED)) > 1e-6:
        raise DataError("income accounting mismatch")
    return metrics, world


def run_experiment(
    cfg: WorldConfig,
    policies: Sequence,
    seeds: Sequence[int],
) -> dict[str, dict]:
    """Run the policy x seed grid under common random numbers.

    Returns per-policy metric summaries with TDI normalized so the first
    policy (conventionally the myopic baseline) averages 1.0.
    """
    raw: dict[str, list[EpisodeMetrics]] = {p.name: [] for p in policies}
    for seed in seeds:
        counts = set()
        for p in policies:
            metrics, _ = run_episode(cfg, p, seed)
            raw[p.name].append(metrics)
            counts.add(metrics.requested)
        if len(counts) != 1:
            raise DataError("common-random-number violation: demand differs across policies")

    base = np.array([m.tdi for m in raw[policies[0].name]])
    out: dict[str, dict] = {}
    for p in policies:
        tdis = np.array([m.tdi for m in raw[p.name]])
        with np.errstate(divide="ignore", invalid="ignore"):
            norm = np.where(base > 0, tdis / base, np.nan)
        out[p.name] = {
            "tdi": tdis,
            "tdi_normalized_mean": float(np.nanmean(norm)),
            "tdi_normalized_std": float(np.nanstd(norm)),
            "answer_rate_mean": float(np.mean([m.answer_rate for m in raw[p.name]])),
            "finish_rate_mean": float(np.mean([m.finish_rate for m in raw[p.name]])),
            "mean_pickup_m": float(np.mean([m.mean_pickup_m for m in raw[p.name]])),
            "metrics": raw[p.name],
        }
    return out


# ---------------------------------------------------------------------------
# export for the training loop

def export_trajectories(world: World, traj_fh, feature_fh,
                        index_config: IndexConfig) -> None:
    """Write the trajectory JSONL and dynamic-context feature CSV for a run."""
    traj_fh.write(TRAJECTORY_HEADER + " " + index_config.to_json() + "\n")
    for d, events in sorted(world.trajectories.items()):
        if not events:
            continue
        traj_fh.write(json.dumps(
            {"traj_id": f"drv{d}", "events": events}) + "\n")

    # per-cell per-minute counts on the finest spatial layer
    layer = index_config.n_tilings - 1
    counts: dict[tuple[str, str, int], float] = {}

    def bump(name, p: GeoPoint, t: int, amount=1.0):
        cell = spatial_cell_code(p, layer, index_config)
        bucket = (t // 60) * 60
        key = (name, cell, bucket)
        counts[key] = counts.get(key, 0.0) + amount

    for o in world.orders:
        if o.request_time >= world.clock:
            continue
        bump("query_count", o.origin, o.request_time)
        if o.state in (ANSWERED, FINISHED, CANCELLED):
            bump("order_count", o.origin, o.answer_time)
    for t, idle_pos in world.minute_snapshots:
        for x, y in idle_pos:
            bump("idle_driver_count", GeoPoint(x, y), t)

    feature_fh.write(FEATURE_HEADER + " " + index_config.to_json() + "\n")
    feature_fh.write("name,cell_code,bucket_seconds,value\n")
    for (name, cell, bucket), v in sorted(counts.items()):
        feature_fh.write(f"{name},{cell},{bucket},{v:g}\n")


def write_event_log(world: World, fh) -> None:
    for e in world.events:
        fh.write(json.dumps(e) + "\n")
