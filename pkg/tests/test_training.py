import numpy as np
import pytest

from cvdispatch.errors import DivergenceError
from cvdispatch.features import TransitionTuple
from cvdispatch.index import GeoPoint, IndexConfig, hex_center
from cvdispatch import network as net
from cvdispatch.training import (
    CalendarContext,
    TrainConfig,
    discounted_option_reward,
    distill,
    prepare_training_data,
    tabular_dp_evaluate,
    td_target,
    train,
    value_profile,
    weight_corruption_probe,
)

SINGLE = IndexConfig(
    n_tilings=1, hex_resolutions=(500.0,), time_bucket_seconds=(600,),
    time_phase_seconds=(0,), memory_size=4001, hash_seed=12,
)


def transition(o, t0, d, t1, r, k, terminal=False, tid="t"):
    return TransitionTuple(o, t0, d, t1, r, k, terminal, tid)


# ---------------------------------------------------------------------------
# formula-level ops

def test_discounted_reward_k1_is_reward():
    assert discounted_option_reward(10.0, 1, 0.92) == pytest.approx(10.0)


def test_discounted_reward_hand_value():
    # geometric-sum oracle: 10/2 + 0.5*10/2 = 7.5
    assert discounted_option_reward(10.0, 2, 0.5) == pytest.approx(7.5)


def test_discounted_reward_zero_and_limits():
    assert discounted_option_reward(0.0, 7, 0.92) == 0.0
    assert discounted_option_reward(10.0, 5, 1.0) == 10.0
    with pytest.raises(ValueError):
        discounted_option_reward(10.0, 0, 0.92)


def test_discounted_reward_matches_geometric_sum():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        r = rng.uniform(0, 100)
        k = int(rng.integers(1, 121))
        g = rng.uniform(1e-6, 1 - 1e-9)
        oracle = sum(g**i * r / k for i in range(k))
        got = discounted_option_reward(r, k, g)
        assert abs(got - oracle) <= 1e-12 * max(1.0, abs(oracle))


def test_discounted_reward_decreasing_in_k_bounded_by_r():
    r, g = 25.0, 0.92
    prev = np.inf
    for k in range(1, 50):
        v = discounted_option_reward(r, k, g)
        assert v <= r + 1e-12
        assert v < prev
        prev = v


def test_td_target_cases():
    t = transition(GeoPoint(0, 0), 0, GeoPoint(1, 1), 120, 10.0, 2, terminal=True)
    assert td_target(t, 99.0, 0.5) == pytest.approx(7.5)   # terminal ignores v'
    t2 = transition(GeoPoint(0, 0), 0, GeoPoint(1, 1), 120, 10.0, 2)
    assert td_target(t2, 4.0, 0.5) == pytest.approx(8.5)
    t3 = transition(GeoPoint(0, 0), 0, GeoPoint(1, 1), 60, 0.0, 1)
    assert td_target(t3, 0.0, 0.9) == 0.0


# ---------------------------------------------------------------------------
# tabular DP

def cells(n):
    return [hex_center(i * 3, 0, 500.0) for i in range(n)]


def test_tabular_all_terminal_mean_reward():
    a, b = cells(2)
    trans = [
        transition(a, 0, b, 120, 10.0, 2, terminal=True),
        transition(a, 60, b, 180, 20.0, 2, terminal=True),
    ]
    tv = tabular_dp_evaluate(trans, 0.5, SINGLE)
    assert tv.value(a, 0) == pytest.approx(
        (discounted_option_reward(10, 2, 0.5) + discounted_option_reward(20, 2, 0.5)) / 2
    )


def test_tabular_three_state_chain():
    a, b, c = cells(3)
    # rewards (1, 1, terminal), k=1, gamma=0.5 -> V = (1.5, 1, 0)
    trans = [
        transition(a, 0, b, 60, 1.0, 1),
        transition(b, 60, c, 120, 1.0, 1, terminal=True),
    ]
    tv = tabular_dp_evaluate(trans, 0.5, SINGLE)
    assert tv.value(a, 0) == pytest.approx(1.5)
    assert tv.value(b, 60) == pytest.approx(1.0)
    assert tv.value(c, 120) == 0.0


def test_tabular_myopic_limit():
    a, b = cells(2)
    trans = [transition(a, 0, b, 60, 8.0, 1)]
    tv = tabular_dp_evaluate(trans, 1e-9, SINGLE)
    assert tv.value(a, 0) == pytest.approx(8.0 * discounted_option_reward(1, 1, 1e-9), abs=1e-6)


# ---------------------------------------------------------------------------
# training loop

def small_cfg(**kw):
    base = dict(
        gamma=0.5, lam=0.0, batch_size=8, max_steps=3000, target_sync=200,
        lr=0.01, embed_dim=8, hidden=(16,), seed=7, grad_clip=None,
        anchor_terminal=False, log_interval=500,
    )
    base.update(kw)
    return TrainConfig(**base)


def test_train_zero_reward_terminal_fixed_point():
    a, b = cells(2)
    trans = [transition(a, 0, b, 120, 0.0, 2, terminal=True)]
    res = train(small_cfg(max_steps=1500), trans, SINGLE)
    from cvdispatch.training import evaluate_states
    v = evaluate_states(res.params, SINGLE, [a], np.array([0]))
    assert abs(v[0]) < 1e-3


def test_train_two_state_chain_matches_dp():
    a, b, c = cells(3)
    trans = [
        transition(a, 0, b, 60, 1.0, 1),
        transition(b, 60, c, 120, 2.0, 1, terminal=True),
    ]
    tv = tabular_dp_evaluate(trans, 0.5, SINGLE)
    res = train(small_cfg(max_steps=4000), trans, SINGLE)
    from cvdispatch.training import evaluate_states
    got = evaluate_states(res.params, SINGLE, [a, b], np.array([0, 60]))
    assert abs(got[0] - tv.value(a, 0)) < 1e-3
    assert abs(got[1] - tv.value(b, 60)) < 1e-3


def test_train_deterministic_logs():
    a, b = cells(2)
    trans = [
        transition(a, 0, b, 60, 1.0, 1),
        transition(b, 60, a, 120, 2.0, 1, terminal=True),
    ]
    r1 = train(small_cfg(max_steps=300), trans, SINGLE)
    r2 = train(small_cfg(max_steps=300), trans, SINGLE)
    assert r1.log_csv() == r2.log_csv()
    assert np.array_equal(r1.params.embedding, r2.params.embedding)


def test_train_divergence_guard():
    a, b = cells(2)
    trans = [transition(a, 0, b, 60, 1e9, 1, terminal=True)]
    with pytest.raises(DivergenceError):
        train(small_cfg(max_steps=2000, divergence_ceiling=100.0), trans, SINGLE)


def test_target_sync_snapshot_semantics():
    # value targets computed before the first sync come from the frozen init
    a, b = cells(2)
    trans = [transition(a, 0, b, 60, 1.0, 1, terminal=True)]
    r = train(small_cfg(max_steps=10, target_sync=1_000_000), trans, SINGLE)
    assert r.steps == 10


def test_gamma_monotone_mean_value():
    rng = np.random.default_rng(3)
    pts = cells(6)
    trans = []
    for i in range(5):
        for t0 in range(0, 7200, 600):
            trans.append(transition(pts[i], t0, pts[i + 1], t0 + 600, 5.0, 10,
                                    terminal=(i == 4)))
    means = []
    for gamma in (0.8, 0.92, 0.99):
        res = train(small_cfg(gamma=gamma, max_steps=2500), trans, SINGLE)
        from cvdispatch.training import evaluate_states
        v = evaluate_states(res.params, SINGLE,
                            [t.origin for t in trans],
                            np.array([t.origin_time for t in trans]))
        means.append(float(v.mean()))
    assert means[0] <= means[1] <= means[2]


# ---------------------------------------------------------------------------
# distillation

def test_distill_converges_on_vd_free_teacher():
    dims = net.NetworkDims(memory_size=101, embed_dim=4, static_dim=2,
                           dynamic_dim=0, hidden=(8,))
    params = net.init_params(dims, np.random.default_rng(1))
    a, b = cells(2)
    trans = [transition(a, t, b, t + 60, 1.0, 1) for t in range(0, 6000, 60)]
    cfg = IndexConfig(n_tilings=1, hex_resolutions=(500.0,),
                      time_bucket_seconds=(600,), time_phase_seconds=(0,),
                      memory_size=101, hash_seed=3)
    data = prepare_training_data(trans, cfg, None, CalendarContext(2))
    dims = net.NetworkDims(memory_size=101, embed_dim=4, static_dim=8,
                           dynamic_dim=0, hidden=(8,))
    params = net.init_params(dims, np.random.default_rng(1))
    mse = distill(params, data, epochs=400, lr=3e-3, seed=5)
    assert mse < 1e-6


def test_distill_zero_epochs_no_change():
    cfg = SINGLE
    a, b = cells(2)
    trans = [transition(a, 0, b, 60, 1.0, 1)]
    data = prepare_training_data(trans, cfg)
    dims = net.NetworkDims(memory_size=cfg.memory_size, embed_dim=4,
                           static_dim=0, dynamic_dim=0, hidden=(8,))
    params = net.init_params(dims, np.random.default_rng(0))
    before = [w.copy() for w in params.dist_w]
    distill(params, data, epochs=0)
    assert all(np.array_equal(a_, b_) for a_, b_ in zip(before, params.dist_w))


def test_distill_constant_teacher():
    cfg = SINGLE
    a, b = cells(2)
    trans = [transition(a, t, b, t + 60, 1.0, 1) for t in range(0, 600, 60)]
    data = prepare_training_data(trans, cfg)
    dims = net.NetworkDims(memory_size=cfg.memory_size, embed_dim=4,
                           static_dim=0, dynamic_dim=0, hidden=(8,))
    params = net.init_params(dims, np.random.default_rng(0))
    # teacher outputs the constant c: zero weights, bias on final layer
    for w in params.main_w:
        w[:] = 0.0
    params.main_b[-1][:] = 3.25
    distill(params, data, epochs=800, lr=1e-2, batch_size=len(trans))
    v = net.batch_forward_distilled(data.o_idx, np.zeros((len(trans), 0)), params)
    assert np.allclose(v, 3.25, atol=1e-3)


# ---------------------------------------------------------------------------
# diagnostics

def test_corruption_probe_zero_sigma():
    dims = net.NetworkDims(memory_size=SINGLE.memory_size, embed_dim=4,
                           static_dim=0, dynamic_dim=0, hidden=(8,))
    params = net.init_params(dims, np.random.default_rng(0))
    locs = cells(5)
    probe = weight_corruption_probe(params, SINGLE, locs,
                                    np.zeros(5, dtype=int), sigma=0.0, seed=1)
    assert probe.mean_abs_shift == 0.0
    assert np.array_equal(probe.before, probe.after)


def test_value_profile_shape():
    dims = net.NetworkDims(memory_size=SINGLE.memory_size, embed_dim=4,
                           static_dim=0, dynamic_dim=0, hidden=(8,))
    params = net.init_params(dims, np.random.default_rng(0))
    prof = value_profile(params, SINGLE, cells(4))
    assert len(prof.bucket_seconds) == 24
    assert len(prof.mean) == 24
