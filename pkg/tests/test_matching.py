import io
import json
import math

import numpy as np
import pytest

from cvdispatch.index import GeoPoint
from cvdispatch.matching import (
    Assignment,
    DispatchCandidate,
    MemoizedValues,
    UtilityMatrix,
    build_utility_matrix,
    dump_window,
    solve_assignment,
    utility_score,
)


def const_values(c):
    def batch(points, times):
        return np.full(len(points), c)
    return batch


def matrix_from_dense(rho):
    """Build a UtilityMatrix directly from a dense utility array (nan = infeasible)."""
    rho = np.asarray(rho, dtype=float)
    nd, no = rho.shape
    drivers = [f"d{i}" for i in range(nd)]
    orders = [f"o{j}" for j in range(no)]
    cands, utils = [], []
    for i in range(nd):
        for j in range(no):
            if not np.isnan(rho[i, j]):
                cands.append(DispatchCandidate(
                    drivers[i], orders[j], 0.0, 1.0, 1,
                    (GeoPoint(0, 0), 0), (GeoPoint(1, 1), 60)))
                utils.append(rho[i, j])
    return UtilityMatrix(drivers, orders, cands, np.array(utils), breakdowns=[])


def brute_force_best(rho, threshold=0.0):
    """Enumerate every partial matching; returns the max total utility."""
    rho = np.asarray(rho, dtype=float)
    nd, no = rho.shape

    def rec(i, used):
        if i == nd:
            return 0.0
        best = rec(i + 1, used)  # driver i skips
        for j in range(no):
            if j not in used and not np.isnan(rho[i, j]) and rho[i, j] > threshold:
                best = max(best, rho[i, j] + rec(i + 1, used | {j}))
        return best

    return rec(0, frozenset())


# ---------------------------------------------------------------------------
# utility scoring

def test_utility_plugin_values():
    vals = {("i",): 8.0, ("j",): 5.0}
    c = DispatchCandidate("d", "o", 0.0, 10.0, 1, ("i",), ("j",))
    rho = utility_score(c, lambda s: vals[s], gamma=0.92, omega=0.0)
    assert rho == pytest.approx(10 + 0.92 * 5 - 8)

    c2 = DispatchCandidate("d", "o", 2000.0, 10.0, 1, ("i",), ("j",))
    rho2 = utility_score(c2, lambda s: vals[s], gamma=0.92, omega=1.0)
    assert rho2 == pytest.approx(rho - 2.0)


def test_utility_zero_case():
    c = DispatchCandidate("d", "o", 0.0, 0.0, 1, ("i",), ("j",))
    assert utility_score(c, lambda s: 0.0, 0.92, 0.0) == 0.0


def test_candidate_validation():
    with pytest.raises(ValueError):
        DispatchCandidate("d", "o", 0.0, 1.0, 0, ("i",), ("j",))
    with pytest.raises(ValueError):
        DispatchCandidate("d", "o", -1.0, 1.0, 1, ("i",), ("j",))


# ---------------------------------------------------------------------------
# matrix construction

def test_radius_filtering():
    drivers = [("d0", GeoPoint(0, 0)), ("d1", GeoPoint(5000, 0))]
    orders = [("o0", GeoPoint(100, 0), GeoPoint(900, 0), 10.0, 5)]
    m = build_utility_matrix(drivers, orders, const_values(0.0), now=0,
                             gamma=0.92, omega=0.0)
    assert [(c.driver_id, c.order_id) for c in m.candidates] == [("d0", "o0")]
    assert m.candidates[0].pickup_m == pytest.approx(100.0)


def test_no_driver_in_radius():
    drivers = [("d0", GeoPoint(9000, 9000))]
    orders = [("o0", GeoPoint(0, 0), GeoPoint(1, 1), 10.0, 5)]
    m = build_utility_matrix(drivers, orders, const_values(0.0), now=0,
                             gamma=0.92, omega=0.0)
    assert m.candidates == []
    a = solve_assignment(m)
    assert a.pairs == [] and a.unassigned_orders == ["o0"]


def test_memoized_single_evaluation():
    calls = {"n": 0}

    def batch(points, times):
        calls["n"] += len(points)
        return np.zeros(len(points))

    drivers = [(f"d{i}", GeoPoint(0, 0)) for i in range(4)]
    orders = [(f"o{j}", GeoPoint(10, 0), GeoPoint(500, 0), 5.0, 3) for j in range(4)]
    m = build_utility_matrix(drivers, orders, batch, now=0, gamma=0.92, omega=0.0)
    assert len(m.candidates) == 16
    # 1 shared driver state + 1 shared destination state
    assert calls["n"] == 2


def test_destination_time_flag():
    seen = []

    def batch(points, times):
        seen.extend(times.tolist())
        return np.zeros(len(points))

    drivers = [("d0", GeoPoint(0, 0))]
    orders = [("o0", GeoPoint(10, 0), GeoPoint(500, 0), 5.0, 3)]
    build_utility_matrix(drivers, orders, batch, now=600, gamma=0.9, omega=0.0)
    assert sorted(seen) == [600, 600 + 3 * 60]
    seen.clear()
    build_utility_matrix(drivers, orders, batch, now=600, gamma=0.9, omega=0.0,
                         dest_at_current_time=True)
    assert sorted(seen) == [600, 600]


# ---------------------------------------------------------------------------
# assignment solver

def test_two_by_two_example():
    a = solve_assignment(matrix_from_dense([[5, 1], [2, 3]]))
    assert a.pairs == [("d0", "o0"), ("d1", "o1")]
    assert a.total_utility == pytest.approx(8.0)


def test_all_negative_empty():
    a = solve_assignment(matrix_from_dense([[-1, -2], [-3, -0.5]]))
    assert a.pairs == []
    assert a.total_utility == 0.0
    assert a.unassigned_drivers == ["d0", "d1"]
    assert a.unassigned_orders == ["o0", "o1"]


def test_one_by_one():
    a = solve_assignment(matrix_from_dense([[4.0]]))
    assert a.pairs == [("d0", "o0")] and a.total_utility == 4.0


def test_skip_beats_negative_member():
    # forcing both rows would need the -5; optimum skips driver d1
    a = solve_assignment(matrix_from_dense([[10, np.nan], [-5, np.nan]]))
    assert a.pairs == [("d0", "o0")]
    assert a.unassigned_drivers == ["d1"]


def test_rectangular_more_orders():
    a = solve_assignment(matrix_from_dense([[1, 7, 3]]))
    assert a.pairs == [("d0", "o1")]
    assert set(a.unassigned_orders) == {"o0", "o2"}


def test_threshold_semantics():
    m = matrix_from_dense([[0.5]])
    assert solve_assignment(m, skip_threshold=0.5).pairs == []
    assert solve_assignment(m, skip_threshold=0.49).pairs == [("d0", "o0")]


def test_scale_covariance():
    rng = np.random.default_rng(5)
    for _ in range(50):
        rho = rng.uniform(-2, 5, size=(4, 4))
        base = solve_assignment(matrix_from_dense(rho))
        scaled = solve_assignment(matrix_from_dense(rho * 37.5))
        assert base.pairs == scaled.pairs


def test_exactness_vs_enumeration():
    rng = np.random.default_rng(11)
    for _ in range(300):
        nd = int(rng.integers(1, 7))
        no = int(rng.integers(1, 7))
        rho = rng.uniform(-5, 10, size=(nd, no))
        mask = rng.random((nd, no)) < 0.25
        rho[mask] = np.nan
        got = solve_assignment(matrix_from_dense(rho))
        want = brute_force_best(rho)
        assert got.total_utility == pytest.approx(want, abs=1e-9)
        # feasibility: one-to-one and candidate-subset
        assert len({d for d, _ in got.pairs}) == len(got.pairs)
        assert len({o for _, o in got.pairs}) == len(got.pairs)
        for d, o in got.pairs:
            assert not np.isnan(rho[int(d[1:]), int(o[1:])])


def test_empty_inputs():
    m = matrix_from_dense(np.zeros((0, 0)))
    a = solve_assignment(m)
    assert a.pairs == [] and a.total_utility == 0.0


def test_nonfinite_utility_rejected():
    m = matrix_from_dense([[1.0]])
    m.utilities[0] = np.inf
    with pytest.raises(ValueError):
        solve_assignment(m)


# ---------------------------------------------------------------------------
# debug dump

def test_dump_window_roundtrip():
    drivers = [("d0", GeoPoint(0, 0))]
    orders = [("o0", GeoPoint(10, 0), GeoPoint(500, 0), 5.0, 3)]
    m = build_utility_matrix(drivers, orders, const_values(1.0), now=0,
                             gamma=0.9, omega=0.5)
    a = solve_assignment(m)
    buf = io.StringIO()
    dump_window(buf, 7, m, a)
    rec = json.loads(buf.getvalue())
    assert rec["window"] == 7
    assert rec["pairs"] == [["d0", "o0"]]
    c = rec["candidates"][0]
    assert c["utility"] == pytest.approx(
        c["reward_term"] + c["value_gain"] + c["experience_term"])
    assert c["utility"] == pytest.approx(m.utilities[0])
