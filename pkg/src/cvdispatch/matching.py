"""Per-window driver-order matching.

Builds a sparse utility matrix over feasible driver-order pairs (within the
broadcast radius), scores each pair as

    rho = R(gamma^k - 1) / (k (gamma - 1)) + gamma^k V(s_j) - V(s_i) + omega * U

where U = -pickup_distance / 1000 penalizes long pickups, and solves the
one-to-one assignment exactly with the Hungarian method. Pairs whose utility
does not exceed the skip threshold are never forced into the matching.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .index import GeoPoint
from .training import discounted_option_reward

DEFAULT_BROADCAST_RADIUS_M = 2000.0

# value assigned to infeasible cells in the dense solver matrix; anything
# beyond the span of real utilities works, this just keeps the matrix finite
_INFEASIBLE = -1e18

StateKey = Hashable
ValueFn = Callable[[StateKey], float]


@dataclass(frozen=True)
class DispatchCandidate:
    """A feasible driver-order pair under consideration in one window."""

    driver_id: str
    order_id: str
    pickup_m: float
    fee: float
    duration: int                 # trip duration in time steps
    driver_state: StateKey
    dest_state: StateKey

    def __post_init__(self):
        if self.duration < 1:
            raise ValueError("candidate duration must be >= 1 step")
        if self.pickup_m < 0:
            raise ValueError("pickup distance must be non-negative")


@dataclass(frozen=True)
class UtilityBreakdown:
    reward_term: float
    value_gain: float
    experience_term: float

    @property
    def total(self) -> float:
        return self.reward_term + self.value_gain + self.experience_term


@dataclass
class UtilityMatrix:
    driver_ids: list[str]
    order_ids: list[str]
    candidates: list[DispatchCandidate]
    utilities: np.ndarray                 # (len(candidates),)
    breakdowns: list[UtilityBreakdown]

    def cell_index(self) -> dict[tuple[str, str], int]:
        return {(c.driver_id, c.order_id): i for i, c in enumerate(self.candidates)}


@dataclass
class Assignment:
    pairs: list[tuple[str, str]]
    total_utility: float
    unassigned_drivers: list[str]
    unassigned_orders: list[str]


def utility_breakdown(
    cand: DispatchCandidate,
    value_fn: ValueFn,
    gamma: float,
    omega: float,
    completion_prob: float = 1.0,
) -> UtilityBreakdown:
    """Expected advantage of the assignment over leaving the driver idle.

    With `completion_prob` < 1 the rider may cancel during pickup, in which
    case the driver keeps its idle continuation value; the reward and value
    gain therefore only accrue with the completion probability.
    """
    disc = gamma ** cand.duration
    reward = discounted_option_reward(cand.fee, cand.duration, gamma)
    gain = disc * value_fn(cand.dest_state) - value_fn(cand.driver_state)
    return UtilityBreakdown(completion_prob * reward, completion_prob * gain,
                            omega * (-cand.pickup_m / 1000.0))


def utility_score(
    cand: DispatchCandidate,
    value_fn: ValueFn,
    gamma: float,
    omega: float,
) -> float:
    return utility_breakdown(cand, value_fn, gamma, omega).total


class MemoizedValues:
    """Caches per-state values within a dispatch window.

    Wraps a batch evaluator mapping (location, time) states to values so each
    distinct state is evaluated exactly once per window.
    """

    def __init__(self, batch_eval: Callable[[Sequence[GeoPoint], np.ndarray], np.ndarray]):
        self._eval = batch_eval
        self._cache: dict[StateKey, float] = {}
        self.eval_count = 0

    def prefetch(self, states: Sequence[tuple[GeoPoint, int]]) -> None:
        todo = [s for s in set(states) if s not in self._cache]
        if not todo:
            return
        pts = [s[0] for s in todo]
        ts = np.array([s[1] for s in todo], dtype=np.int64)
        vals = self._eval(pts, ts)
        self.eval_count += len(todo)
        for s, v in zip(todo, vals):
            self._cache[s] = float(v)

    def __call__(self, state: StateKey) -> float:
        if state not in self._cache:
            self.prefetch([state])
        return self._cache[state]


def build_utility_matrix(
    drivers: Sequence[tuple[str, GeoPoint]],
    orders: Sequence[tuple[str, GeoPoint, GeoPoint, float, int]],
    batch_eval: Callable[[Sequence[GeoPoint], np.ndarray], np.ndarray],
    now: int,
    gamma: float,
    omega: float,
    radius_m: float = DEFAULT_BROADCAST_RADIUS_M,
    step_seconds: int = 60,
    dest_at_current_time: bool = False,
    pickup_speed_mps: float | None = None,
    cancel_scale_m: float | None = None,
    cancel_cap: float = 0.8,
) -> UtilityMatrix:
    """Materialize feasible candidates and their utilities for one window.

    `drivers` are (id, position); `orders` are (id, origin, destination, fare,
    duration_steps). Only pairs with pickup distance within `radius_m` become
    candidates. Destination values are taken at now + k steps unless
    `dest_at_current_time` is set. When `pickup_speed_mps` is given, the
    option duration k additionally counts the per-pair pickup travel time,
    matching how completed trips are logged for training. When
    `cancel_scale_m` is given, utilities are weighted by the completion
    probability 1 - min(cancel_cap, pickup / cancel_scale_m).
    """
    candidates: list[DispatchCandidate] = []
    for oid, origin, dest, fare, k in orders:
        if k < 1:
            raise ValueError(f"order {oid}: duration must be >= 1 step")
        for did, pos in drivers:
            d = math.hypot(pos.x - origin.x, pos.y - origin.y)
            if d <= radius_m:
                k_opt = k
                if pickup_speed_mps is not None:
                    k_opt += round(d / (pickup_speed_mps * step_seconds))
                dest_t = now if dest_at_current_time else now + k_opt * step_seconds
                candidates.append(DispatchCandidate(
                    driver_id=did, order_id=oid, pickup_m=d, fee=fare,
                    duration=k_opt, driver_state=(pos, now),
                    dest_state=(dest, dest_t),
                ))

    values = MemoizedValues(batch_eval)
    states = [c.driver_state for c in candidates] + [c.dest_state for c in candidates]
    values.prefetch(states)

    breakdowns = []
    for c in candidates:
        completion = 1.0
        if cancel_scale_m is not None:
            completion = 1.0 - min(cancel_cap, c.pickup_m / cancel_scale_m)
        breakdowns.append(utility_breakdown(c, values, gamma, omega, completion))
    utilities = np.array([b.total for b in breakdowns], dtype=np.float64)
    return UtilityMatrix(
        driver_ids=[d for d, _ in drivers],
        order_ids=[o[0] for o in orders],
        candidates=candidates,
        utilities=utilities,
        breakdowns=breakdowns,
    )


def solve_assignment(matrix: UtilityMatrix, skip_threshold: float = 0.0) -> Assignment:
    """Exact maximum-utility one-to-one matching with optional skipping.

    A pair can enter the matching only if its utility strictly exceeds
    `skip_threshold`; drivers and orders left out count as unassigned. The
    rectangular problem is padded with per-driver dummy columns at utility 0
    relative to the threshold, so skipping always dominates value-destroying
    matches.
    """
    nd, no = len(matrix.driver_ids), len(matrix.order_ids)
    if nd == 0 or no == 0:
        return Assignment([], 0.0, list(matrix.driver_ids), list(matrix.order_ids))

    drow = {d: i for i, d in enumerate(matrix.driver_ids)}
    ocol = {o: j for j, o in enumerate(matrix.order_ids)}

    # benefit matrix with dummy columns: column no+i lets driver i skip
    benefit = np.full((nd, no + nd), _INFEASIBLE)
    for c, rho in zip(matrix.candidates, matrix.utilities):
        if not np.isfinite(rho):
            raise ValueError("non-finite utility in assignment problem")
        if rho > skip_threshold:
            benefit[drow[c.driver_id], ocol[c.order_id]] = rho
    benefit[np.arange(nd), no + np.arange(nd)] = skip_threshold

    rows, cols = linear_sum_assignment(-benefit)
    pairs: list[tuple[str, str]] = []
    total = 0.0
    for r, c in zip(rows, cols):
        if c < no and benefit[r, c] > _INFEASIBLE:
            pairs.append((matrix.driver_ids[r], matrix.order_ids[c]))
            total += benefit[r, c]
    pairs.sort()
    matched_d = {d for d, _ in pairs}
    matched_o = {o for _, o in pairs}
    return Assignment(
        pairs=pairs,
        total_utility=total,
        unassigned_drivers=[d for d in matrix.driver_ids if d not in matched_d],
        unassigned_orders=[o for o in matrix.order_ids if o not in matched_o],
    )


def dump_window(fh, window_id: int, matrix: UtilityMatrix, assignment: Assignment) -> None:
    """Append one JSONL record describing a window's candidates and matching."""
    rec = {
        "window": window_id,
        "candidates": [
            {
                "driver": c.driver_id,
                "order": c.order_id,
                "pickup_m": round(c.pickup_m, 3),
                "reward_term": b.reward_term,
                "value_gain": b.value_gain,
                "experience_term": b.experience_term,
                "utility": b.total,
            }
            for c, b in zip(matrix.candidates, matrix.breakdowns)
        ],
        "pairs": assignment.pairs,
        "total_utility": assignment.total_utility,
        "unassigned_drivers": assignment.unassigned_drivers,
        "unassigned_orders": assignment.unassigned_orders,
    }
    fh.write(json.dumps(rec) + "\n")
