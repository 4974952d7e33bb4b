import numpy as np
import pytest
from scipy import stats

from cvdispatch.errors import ConfigError
from cvdispatch.index import IndexConfig
from cvdispatch import network as net
from cvdispatch.rngs import substream
from cvdispatch.transfer import (
    FeatureSplit,
    FreezeMask,
    ProgressiveParams,
    apply_freeze,
    cfpt_forward,
    init_finetune,
    init_progressive,
    progressive_backward,
    progressive_forward,
    source_forward,
    train_progressive,
)

CFG = IndexConfig(n_tilings=1, hex_resolutions=(500.0,),
                  time_bucket_seconds=(600,), time_phase_seconds=(0,),
                  memory_size=200, hash_seed=1)
DIMS = net.NetworkDims(memory_size=200, embed_dim=4, static_dim=2,
                       dynamic_dim=0, hidden=(8, 6))


def make_source(seed=0, widths=(3, 8, 6, 1)):
    rng = np.random.default_rng(seed)
    ws = [rng.normal(0, 0.4, (widths[i + 1], widths[i]))
          for i in range(len(widths) - 1)]
    bs = [rng.normal(0, 0.1, widths[i + 1]) for i in range(len(widths) - 1)]
    return ws, bs


# ---------------------------------------------------------------------------
# feature split

def test_split_validation():
    FeatureSplit((0, 2), (1, 3))
    with pytest.raises(ConfigError):
        FeatureSplit((0, 1), (1, 2))      # overlap
    with pytest.raises(ConfigError):
        FeatureSplit((0,), (2,))          # gap


def test_split_json_roundtrip():
    s = FeatureSplit((0, 3), (1, 2))
    assert FeatureSplit.from_json_dict(s.to_json_dict()) == s


# ---------------------------------------------------------------------------
# finetuning

def test_finetune_copies_mlp_fresh_embedding():
    src = net.init_params(DIMS, np.random.default_rng(0))
    tgt = init_finetune(src, CFG, seed=3)
    for a, b in zip(src.main_w, tgt.main_w):
        assert np.array_equal(a, b)
    assert not np.array_equal(src.embedding, tgt.embedding)


def test_finetune_shape_mismatch():
    src = net.init_params(DIMS, np.random.default_rng(0))
    bad = IndexConfig(n_tilings=1, hex_resolutions=(500.0,),
                      time_bucket_seconds=(600,), time_phase_seconds=(0,),
                      memory_size=999, hash_seed=1)
    with pytest.raises(ConfigError):
        init_finetune(src, bad)


def test_freeze_integrity_after_step():
    src = net.init_params(DIMS, np.random.default_rng(0))
    tgt = init_finetune(src, CFG, seed=1)
    frozen = tgt.clone()
    mask = FreezeMask(embedding=False,
                      main_w=(True,) * len(tgt.main_w),
                      main_b=(True,) * len(tgt.main_b))
    # simulate an optimizer step touching everything
    for w in tgt.main_w:
        w += 0.5
    tgt.embedding += 0.5
    apply_freeze(frozen, tgt, mask)
    for a, b in zip(frozen.main_w, tgt.main_w):
        assert np.array_equal(a, b)
    assert not np.array_equal(frozen.embedding, tgt.embedding)


def test_fresh_embedding_matches_init_law():
    # control path: re-initialized embedding should follow the fresh-init law
    src = net.init_params(DIMS, np.random.default_rng(0))
    tgt = init_finetune(src, CFG, seed=11)
    flat = tgt.embedding.ravel()
    # init law is U[-0.01, 0.01]
    ks = stats.kstest(flat, stats.uniform(loc=-0.01, scale=0.02).cdf)
    assert ks.pvalue > 0.01


# ---------------------------------------------------------------------------
# progressive columns

def test_zero_lateral_equals_plain_mlp():
    sw, sb = make_source()
    prog = init_progressive(sw, sb, [5, 8, 6, 1], seed=2)
    rng = np.random.default_rng(1)
    tx = rng.normal(size=(20, 5))
    sx = rng.normal(size=(20, 3))
    got = progressive_forward(prog, tx, sx)
    want, _ = net._mlp_forward(tx, prog.target_w, prog.target_b)
    assert np.array_equal(got, want)   # bitwise: laterals are exactly zero


def test_lateral_identity_reproduces_source():
    # W=0, U=identity-width maps, biases copied -> target mirrors source layers
    sw, sb = make_source(widths=(3, 4, 1))
    prog = init_progressive(sw, sb, [3, 4, 1], seed=0)
    for i in range(len(prog.target_w)):
        prog.target_w[i][:] = 0.0
        prog.target_b[i][:] = sb[i]
        prog.lateral_u[i][:] = sw[i]
    rng = np.random.default_rng(4)
    x = rng.normal(size=(10, 3))
    got = progressive_forward(prog, np.zeros((10, 3)), x)
    want, _ = net._mlp_forward(x, sw, sb)
    assert np.allclose(got, want)


def test_progressive_shapes_validated():
    sw, sb = make_source()
    with pytest.raises(ConfigError):
        init_progressive(sw, sb, [5, 8, 1])   # wrong depth
    prog = init_progressive(sw, sb, [5, 8, 6, 1])
    with pytest.raises(ConfigError):
        ProgressiveParams(sw, sb, prog.target_w, prog.target_b,
                          [np.zeros((2, 2))] * 3)


def test_progressive_gradcheck():
    sw, sb = make_source(seed=5)
    prog = init_progressive(sw, sb, [4, 8, 6, 1], seed=6)
    rng = np.random.default_rng(7)
    for u in prog.lateral_u:
        u += rng.normal(0, 0.2, u.shape)
    for b in prog.target_b:
        b += rng.normal(0, 0.3, b.shape)
    tx = rng.normal(size=(6, 4))
    sx = rng.normal(size=(6, 3))
    y = rng.normal(size=6)
    dw, db, du, _ = progressive_backward(prog, tx, sx, y)

    def loss():
        v = progressive_forward(prog, tx, sx)
        return 0.5 * float(np.mean((v - y) ** 2))

    eps = 1e-6
    for arrs, grads in ((prog.target_w, dw), (prog.target_b, db),
                        (prog.lateral_u, du)):
        for a, g in zip(arrs, grads):
            it = np.nditer(a, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                orig = a[i]
                a[i] = orig + eps
                lp = loss()
                a[i] = orig - eps
                lm = loss()
                a[i] = orig
                fd = (lp - lm) / (2 * eps)
                assert abs(fd - g[i]) < 1e-6 * max(1.0, abs(fd))


def test_source_frozen_zero_sensitivity():
    # finite-difference on source weights: the training-step loss does not
    # change the source column, and gradients exist only for W, U, b
    sw, sb = make_source(seed=8)
    prog = init_progressive(sw, sb, [4, 8, 6, 1], seed=9)
    before = [w.copy() for w in prog.source_w]
    rng = np.random.default_rng(10)
    tx = rng.normal(size=(30, 4))
    sx = rng.normal(size=(30, 3))
    y = rng.normal(size=30)
    train_progressive(prog, tx, sx, y, steps=20, seed=0)
    for a, b in zip(before, prog.source_w):
        assert np.array_equal(a, b)


def test_baseline_flag_keeps_laterals_zero():
    sw, sb = make_source(seed=12)
    prog = init_progressive(sw, sb, [4, 8, 6, 1], seed=13)
    rng = np.random.default_rng(14)
    tx = rng.normal(size=(40, 4))
    sx = rng.normal(size=(40, 3))
    y = rng.normal(size=40)
    train_progressive(prog, tx, sx, y, steps=30, seed=1, train_laterals=False)
    for u in prog.lateral_u:
        assert np.all(u == 0.0)


def test_baseline_ignores_source_input():
    # with zero laterals the forward pass is independent of the source input
    sw, sb = make_source(seed=15)
    prog = init_progressive(sw, sb, [4, 8, 6, 1], seed=16)
    rng = np.random.default_rng(17)
    tx = rng.normal(size=(10, 4))
    v1 = progressive_forward(prog, tx, rng.normal(size=(10, 3)))
    v2 = progressive_forward(prog, tx, rng.normal(size=(10, 3)) * 50)
    assert np.array_equal(v1, v2)


# ---------------------------------------------------------------------------
# correlated-feature split routing

def test_cfpt_routes_features():
    sw, sb = make_source(widths=(2, 8, 6, 1))
    prog = init_progressive(sw, sb, [3, 8, 6, 1], seed=20)
    split = FeatureSplit(adaptive=(0, 2), nonadaptive=(1, 3, 4))
    rng = np.random.default_rng(21)
    x = rng.normal(size=(15, 5))
    got = cfpt_forward(split, prog, x)
    want = progressive_forward(prog, x[:, [1, 3, 4]], x[:, [0, 2]])
    assert np.array_equal(got, want)


def test_cfpt_width_validation():
    sw, sb = make_source(widths=(2, 8, 6, 1))
    prog = init_progressive(sw, sb, [3, 8, 6, 1], seed=22)
    split = FeatureSplit(adaptive=(0,), nonadaptive=(1, 2, 3))
    with pytest.raises(ConfigError):
        cfpt_forward(split, prog, np.zeros((4, 4)))


def test_cfpt_zero_lateral_independent_of_source():
    sw, sb = make_source(widths=(2, 8, 6, 1))
    prog = init_progressive(sw, sb, [3, 8, 6, 1], seed=23)
    split = FeatureSplit(adaptive=(0, 1), nonadaptive=(2, 3, 4))
    rng = np.random.default_rng(24)
    x = rng.normal(size=(10, 5))
    x2 = x.copy()
    x2[:, :2] = rng.normal(size=(10, 2)) * 100   # perturb adaptive features
    assert np.array_equal(cfpt_forward(split, prog, x),
                          cfpt_forward(split, prog, x2))


def test_transfer_speedup_on_shared_structure():
    # source and target tasks share the mapping from adaptive features; with
    # informative laterals the target column reaches the baseline's final
    # loss in fewer steps (single-seed smoke here; seed-averaged in acceptance)
    rng = np.random.default_rng(30)
    n = 256
    sx = rng.normal(size=(n, 3))
    tx = rng.normal(size=(n, 4)) * 0.01   # target-only features are weak
    y = np.tanh(sx @ np.array([1.0, -2.0, 0.5])) + 0.05 * tx[:, 0]

    # pre-train a plain column on (sx -> y), then freeze it as the source
    sw, sb = make_source(seed=31, widths=(3, 16, 16, 1))
    base = init_progressive(sw, sb, [3, 16, 16, 1], seed=34)
    train_progressive(base, sx, np.zeros((n, 3)), y, steps=600, lr=3e-3,
                      seed=35, train_laterals=False)
    frozen_w = [w.copy() for w in base.target_w]
    frozen_b = [b.copy() for b in base.target_b]

    lateral = init_progressive(frozen_w, frozen_b, [4, 16, 16, 1], seed=36)
    baseline = init_progressive(frozen_w, frozen_b, [4, 16, 16, 1], seed=36)

    t_lat = train_progressive(lateral, tx, sx, y, steps=300, lr=3e-3, seed=37)
    t_base = train_progressive(baseline, tx, sx, y, steps=300, lr=3e-3,
                               seed=37, train_laterals=False)
    final_base = t_base.losses[-1]
    reached = t_lat.steps_to(final_base)
    assert reached is not None and reached <= 300
    assert t_lat.losses[-1] <= final_base
