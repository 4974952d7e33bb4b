"""Regularized policy evaluation for the cerebellar value network.

Implements the SMDP TD training loop (minibatch targets from a
periodically synchronized target network, Lipschitz penalty, Adam),
the distillation of the context-free head, the tabular DP baseline,
and post-training diagnostics.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import network as net
from .errors import DataError, DivergenceError
from .features import (
    DEFAULT_RANGE_SECONDS,
    FeatureStore,
    TransitionTuple,
    randomize_context,
    spatial_cell_code,
)
from .index import SECONDS_PER_DAY, GeoPoint, IndexConfig, activation_indices
from .network import NetworkDims, ScalingStats, ValueNetworkParams, init_params
from .rngs import substream


@dataclass(frozen=True)
class CalendarContext:
    """Static context shared by a one-day dataset."""

    day_of_week: int = 0          # 0 = Monday
    holiday: bool = False

    def vector(self) -> np.ndarray:
        v = np.zeros(8)
        v[self.day_of_week] = 1.0
        v[7] = 1.0 if self.holiday else 0.0
        return v


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.92
    lam: float = 1e-4             # Lipschitz penalty weight
    p: object = 1                 # norm order: 1, 2 or np.inf
    batch_size: int = 32
    epochs: int = 20
    max_steps: int | None = None  # overrides epochs when set
    target_sync: int = 100_000    # C
    lr: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    rg_seconds: int = DEFAULT_RANGE_SECONDS
    seed: int = 0
    embed_dim: int = 50
    hidden: tuple[int, ...] = net.DEFAULT_HIDDEN
    grad_clip: float | None = 10.0
    divergence_ceiling: float = 1e6
    log_interval: int = 100
    anchor_terminal: bool = True  # fit V=0 at terminal destination states
    distill_during_training: bool = False
    distill_lr: float = 1e-3

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("training requires 0 < gamma < 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


def discounted_option_reward(reward: float, k: int, gamma: float) -> float:
    """Uniform spread of a trip fee over k steps, discounted: R(g^k-1)/(k(g-1))."""
    if k < 1:
        raise ValueError("option duration k must be >= 1")
    if not (0.0 < gamma <= 1.0):
        raise ValueError("gamma must be in (0, 1]")
    if gamma == 1.0:
        return float(reward)
    return float(reward) * (gamma**k - 1.0) / (k * (gamma - 1.0))


def td_target(t: TransitionTuple, v_next: float, gamma: float) -> float:
    """SMDP TD target y = R_hat + gamma^k * V_target(s'); terminal uses 0."""
    v = 0.0 if t.is_terminal else v_next
    return discounted_option_reward(t.reward, t.duration, gamma) + gamma**t.duration * v


# ---------------------------------------------------------------------------
# Optimizer (Adam; lazy moments for the sparse embedding gradient)

class Adam:
    def __init__(self, params: ValueNetworkParams, cfg: TrainConfig):
        self.lr = cfg.lr
        self.b1, self.b2, self.eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
        dims = params.dims
        self.emb_m = np.zeros((dims.memory_size, dims.embed_dim))
        self.emb_v = np.zeros((dims.memory_size, dims.embed_dim))
        self.emb_t = np.zeros(dims.memory_size, dtype=np.int64)
        self.mlp_m = [np.zeros_like(a) for a in params.main_w + params.main_b]
        self.mlp_v = [np.zeros_like(a) for a in params.main_w + params.main_b]
        self.t = 0

    def step(self, params: ValueNetworkParams, g: net.Gradients) -> None:
        self.t += 1
        arrays = params.main_w + params.main_b
        grads = g.main_dw + g.main_db
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for a, grad, m, v in zip(arrays, grads, self.mlp_m, self.mlp_v):
            m *= self.b1
            m += (1 - self.b1) * grad
            v *= self.b2
            v += (1 - self.b2) * grad * grad
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        rows = g.emb_rows
        self.emb_t[rows] += 1
        tr = self.emb_t[rows][:, None]
        self.emb_m[rows] = self.b1 * self.emb_m[rows] + (1 - self.b1) * g.emb_grad
        self.emb_v[rows] = self.b2 * self.emb_v[rows] + (1 - self.b2) * g.emb_grad**2
        mhat = self.emb_m[rows] / (1.0 - self.b1**tr)
        vhat = self.emb_v[rows] / (1.0 - self.b2**tr)
        params.embedding[rows] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_gradients(g: net.Gradients, max_norm: float) -> None:
    total = float(np.sum(g.emb_grad**2))
    for a in g.main_dw + g.main_db:
        total += float(np.sum(a**2))
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        g.emb_grad *= scale
        for a in g.main_dw + g.main_db:
            a *= scale


# ---------------------------------------------------------------------------
# Dataset preparation

@dataclass
class TrainingData:
    transitions: list[TransitionTuple]
    o_idx: np.ndarray             # (N, n) activation indices at origins
    d_idx: np.ndarray
    rewards: np.ndarray
    durations: np.ndarray
    terminal: np.ndarray
    static: np.ndarray            # shared static context vector
    store: FeatureStore | None


def prepare_training_data(
    transitions: list[TransitionTuple],
    index_config: IndexConfig,
    store: FeatureStore | None = None,
    calendar: CalendarContext | None = None,
) -> TrainingData:
    if not transitions:
        raise DataError("no transitions to train on")
    ox = np.array([t.origin.x for t in transitions])
    oy = np.array([t.origin.y for t in transitions])
    ot = np.array([t.origin_time for t in transitions])
    dx = np.array([t.destination.x for t in transitions])
    dy = np.array([t.destination.y for t in transitions])
    dt = np.array([min(t.destination_time, SECONDS_PER_DAY - 1) for t in transitions])
    return TrainingData(
        transitions=transitions,
        o_idx=activation_indices(ox, oy, ot, index_config),
        d_idx=activation_indices(dx, dy, dt, index_config),
        rewards=np.array([t.reward for t in transitions]),
        durations=np.array([t.duration for t in transitions], dtype=np.int64),
        terminal=np.array([t.is_terminal for t in transitions], dtype=bool),
        static=calendar.vector() if calendar else np.zeros(0),
        store=store,
    )


def fit_scaling(store: FeatureStore | None) -> ScalingStats:
    if store is None or not store.values:
        return ScalingStats.identity(0 if store is None else len(store.feature_names))
    names = store.feature_names
    cols = []
    for name in names:
        vals = np.array([v for (n, _, _), v in store.values.items() if n == name])
        cols.append(vals if len(vals) else np.zeros(1))
    dim = len(names)
    mean = np.zeros(dim)
    std = np.ones(dim)
    for i, vals in enumerate(cols):
        z = np.log1p(np.maximum(vals, 0.0))
        mean[i] = z.mean()
        s = z.std()
        std[i] = s if s > 1e-12 else 1.0
    return ScalingStats(mean, std)


# ---------------------------------------------------------------------------
# Training loop (Algorithm 1)

@dataclass
class LogRecord:
    step: int
    data_loss: float
    penalty: float
    lipschitz_bound: float
    mean_v: float
    wall_ms: float


@dataclass
class TrainResult:
    params: ValueNetworkParams
    log: list[LogRecord]
    steps: int
    context_missing_count: int = 0
    final_distill_mse: float | None = None

    def log_csv(self, include_wall: bool = False) -> str:
        lines = ["step,data_loss,penalty,lipschitz_bound,mean_v"
                 + (",wall_ms" if include_wall else "")]
        for r in self.log:
            row = f"{r.step},{r.data_loss:.12g},{r.penalty:.12g},{r.lipschitz_bound:.12g},{r.mean_v:.12g}"
            if include_wall:
                row += f",{r.wall_ms:.3f}"
            lines.append(row)
        return "\n".join(lines) + "\n"


def _sample_contexts(
    data: TrainingData, sel: np.ndarray, rg: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, int]:
    """Context randomization for one minibatch; returns (origin, dest, n_missing)."""
    store = data.store
    dim = len(store.feature_names)
    o_ctx = np.zeros((len(sel), dim))
    d_ctx = np.zeros((len(sel), dim))
    missing = 0
    for i, j in enumerate(sel):
        aug = randomize_context(data.transitions[j], rg, store, rng)
        o_ctx[i] = aug.origin_context
        d_ctx[i] = aug.destination_context
        missing += aug.origin_context_missing + aug.destination_context_missing
    return o_ctx, d_ctx, missing


def train(
    config: TrainConfig,
    transitions: list[TransitionTuple],
    index_config: IndexConfig,
    store: FeatureStore | None = None,
    calendar: CalendarContext | None = None,
    init: ValueNetworkParams | None = None,
) -> TrainResult:
    """Run regularized SMDP policy evaluation and return the trained params.

    Deterministic given (config, data): all randomness comes from named
    substreams of config.seed.
    """
    data = prepare_training_data(transitions, index_config, store, calendar)
    n = len(transitions)
    dyn_dim = len(store.feature_names) if store is not None else 0
    dims = NetworkDims(
        memory_size=index_config.memory_size,
        embed_dim=config.embed_dim,
        static_dim=len(data.static),
        dynamic_dim=dyn_dim,
        hidden=config.hidden,
    )
    if init is not None:
        params = init.clone()
    else:
        params = init_params(dims, substream(config.seed, "init"), fit_scaling(store))
    target = params.clone()
    opt = Adam(params, config)
    rng_shuffle = substream(config.seed, "shuffle")
    rng_ctx = substream(config.seed, "context")

    steps_per_epoch = (n + config.batch_size - 1) // config.batch_size
    total_steps = (
        config.max_steps if config.max_steps is not None
        else config.epochs * steps_per_epoch
    )
    gamma = config.gamma
    log: list[LogRecord] = []
    missing_total = 0
    distill_mse = None
    step = 0
    t_start = time.perf_counter()
    order = np.arange(n)
    epoch_pos = steps_per_epoch  # force shuffle at step 0
    epoch_idx = -1

    while step < total_steps:
        if epoch_pos >= steps_per_epoch:
            rng_shuffle.shuffle(order)
            epoch_pos = 0
            epoch_idx += 1
            if config.distill_during_training and epoch_idx > 0:
                distill_mse = distill(
                    params, data, epochs=max(1, 5 - epoch_idx),
                    lr=config.distill_lr, seed=config.seed,
                    rg=config.rg_seconds, batch_size=config.batch_size,
                )
        sel = order[epoch_pos * config.batch_size:(epoch_pos + 1) * config.batch_size]
        epoch_pos += 1
        step += 1

        o_idx = data.o_idx[sel]
        d_idx = data.d_idx[sel]
        if dyn_dim:
            o_ctx, d_ctx, miss = _sample_contexts(data, sel, config.rg_seconds, rng_ctx)
            missing_total += miss
        else:
            o_ctx = d_ctx = np.zeros((len(sel), 0))
        stat = np.broadcast_to(data.static, (len(sel), len(data.static)))

        v_next = net.batch_forward_main(d_idx, stat, d_ctx, target)
        v_next = np.where(data.terminal[sel], 0.0, v_next)
        k = data.durations[sel]
        r = data.rewards[sel]
        rhat = np.where(
            k == 1, r, r * (gamma**k - 1.0) / (k * (gamma - 1.0))
        )
        y = rhat + gamma**k.astype(float) * v_next

        idx_b, stat_b, ctx_b, y_b = o_idx, stat, o_ctx, y
        if config.anchor_terminal:
            term = data.terminal[sel]
            if term.any():
                idx_b = np.concatenate([o_idx, d_idx[term]])
                stat_b = np.concatenate([stat, stat[term]])
                ctx_b = np.concatenate([o_ctx, d_ctx[term]])
                y_b = np.concatenate([y, np.zeros(int(term.sum()))])

        g, data_loss, pen = net.backward(
            idx_b, stat_b, ctx_b, y_b, params, lam=config.lam, p=config.p
        )
        if config.grad_clip is not None:
            clip_gradients(g, config.grad_clip)
        opt.step(params, g)

        if step % config.target_sync == 0:
            target = params.clone()

        if step % config.log_interval == 0 or step == total_steps or step == 1:
            v_now = net.batch_forward_main(o_idx, stat, o_ctx, params)
            mean_v = float(np.mean(v_now))
            if abs(mean_v) > config.divergence_ceiling:
                raise DivergenceError(
                    f"mean |V| {mean_v:.3g} exceeded ceiling at step {step}"
                )
            bound = net.lipschitz_bound(params, config.p).product
            pen_now = pen if config.lam > 0 else net.penalty_value(params, config.p)
            log.append(LogRecord(
                step, data_loss, pen_now, bound, mean_v,
                (time.perf_counter() - t_start) * 1e3,
            ))

    if config.distill_during_training:
        distill_mse = distill(
            params, data, epochs=1, lr=config.distill_lr, seed=config.seed,
            rg=config.rg_seconds, batch_size=config.batch_size,
        )
    return TrainResult(params, log, step, missing_total, distill_mse)


# ---------------------------------------------------------------------------
# Distillation of the context-free head

def _distilled_backward(idx, stat, targets, params):
    """Gradient of mean squared error for the distilled MLP only."""
    v, (x, inputs) = net.batch_forward_distilled(idx, stat, params, with_cache=True)
    resid = v - targets
    loss = float(resid @ resid) / len(targets)
    delta = (2.0 * resid / len(targets))[:, None]
    dw = [None] * len(params.dist_w)
    db = [None] * len(params.dist_b)
    for i in range(len(params.dist_w) - 1, -1, -1):
        h_in = inputs[i]
        dw[i] = delta.T @ h_in
        db[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.dist_w[i]) * (h_in > 0.0)
    return dw, db, loss


def distill(
    params: ValueNetworkParams,
    data: TrainingData,
    epochs: int,
    lr: float = 1e-3,
    seed: int = 0,
    rg: int = DEFAULT_RANGE_SECONDS,
    batch_size: int = 32,
) -> float:
    """Fit the distilled head to the (frozen) main head over the transfer set.

    Teacher targets are V(l, mu, v_s, v_d) with v_d sampled by context
    randomization; only dist_w / dist_b are updated. Returns the final
    transfer-set MSE against freshly sampled teacher targets.
    """
    n = len(data.transitions)
    dyn_dim = params.dims.dynamic_dim
    rng = substream(seed, "distill")
    stat_full = np.broadcast_to(data.static, (n, len(data.static)))

    # Adam state local to the distilled head
    b1, b2, eps = 0.9, 0.999, 1e-8
    ms = [np.zeros_like(a) for a in params.dist_w + params.dist_b]
    vs = [np.zeros_like(a) for a in params.dist_w + params.dist_b]
    t = 0
    order = np.arange(n)
    for _ in range(epochs):
        rng.shuffle(order)
        for pos in range(0, n, batch_size):
            sel = order[pos:pos + batch_size]
            idx = data.o_idx[sel]
            stat = stat_full[sel]
            if dyn_dim:
                ctx, _, _ = _sample_contexts(data, sel, rg, rng)
            else:
                ctx = np.zeros((len(sel), 0))
            targets = net.batch_forward_main(idx, stat, ctx, params)
            dw, db, _ = _distilled_backward(idx, stat, targets, params)
            t += 1
            c1, c2 = 1 - b1**t, 1 - b2**t
            for a, grad, m, v in zip(params.dist_w + params.dist_b, dw + db, ms, vs):
                m *= b1
                m += (1 - b1) * grad
                v *= b2
                v += (1 - b2) * grad * grad
                a -= lr * (m / c1) / (np.sqrt(v / c2) + eps)

    # final transfer-set MSE
    if dyn_dim:
        ctx, _, _ = _sample_contexts(data, order, rg, rng)
    else:
        ctx = np.zeros((n, 0))
    teacher = net.batch_forward_main(data.o_idx, stat_full, ctx, params)
    student = net.batch_forward_distilled(data.o_idx, stat_full, params)
    return float(np.mean((teacher - student) ** 2))


# ---------------------------------------------------------------------------
# Tabular DP baseline (TVal)

@dataclass
class TabularValue:
    """(cell, bucket) -> value; missing keys evaluate to 0."""

    values: dict[tuple[str, int], float]
    index_config: IndexConfig
    bucket_seconds: int

    def key(self, l: GeoPoint, mu: int) -> tuple[str, int]:
        layer = self.index_config.n_tilings - 1
        mu = min(int(mu), SECONDS_PER_DAY - 1)
        return (
            spatial_cell_code(l, layer, self.index_config),
            (mu // self.bucket_seconds) * self.bucket_seconds,
        )

    def value(self, l: GeoPoint, mu: int) -> float:
        if mu >= SECONDS_PER_DAY:
            return 0.0
        return self.values.get(self.key(l, mu), 0.0)


def tabular_dp_evaluate(
    transitions: list[TransitionTuple],
    gamma: float,
    index_config: IndexConfig,
    bucket_seconds: int | None = None,
    sweeps: int = 10_000,
    tol: float = 1e-9,
) -> TabularValue:
    """Value-iteration sweeps of V(s) <- mean[R_hat + gamma^k V(s')] over data."""
    bucket = bucket_seconds or index_config.time_bucket_seconds[-1]
    tv = TabularValue({}, index_config, bucket)
    grouped: dict[tuple[str, int], list[tuple[float, int, tuple[str, int] | None]]] = {}
    for t in transitions:
        s = tv.key(t.origin, t.origin_time)
        s2 = None if t.is_terminal else tv.key(t.destination, t.destination_time)
        rhat = discounted_option_reward(t.reward, t.duration, gamma)
        grouped.setdefault(s, []).append((rhat, t.duration, s2))
    v = {s: 0.0 for s in grouped}
    for _ in range(sweeps):
        delta = 0.0
        for s, trans in grouped.items():
            new = sum(
                rhat + gamma**k * (v.get(s2, 0.0) if s2 is not None else 0.0)
                for rhat, k, s2 in trans
            ) / len(trans)
            delta = max(delta, abs(new - v[s]))
            v[s] = new
        if delta < tol:
            break
    tv.values = v
    return tv


# ---------------------------------------------------------------------------
# Diagnostics

@dataclass
class ValueProfile:
    bucket_seconds: list[int]
    mean: list[float]
    std: list[float]


def value_profile(
    params: ValueNetworkParams,
    index_config: IndexConfig,
    locations: list[GeoPoint],
    static: np.ndarray | None = None,
    bucket_width: int = 3600,
    use_distilled: bool = False,
) -> ValueProfile:
    """Mean/std of V over a fixed location sample per time-of-day bucket."""
    if static is None:
        static = np.zeros(params.dims.static_dim)
    xs = np.array([l.x for l in locations])
    ys = np.array([l.y for l in locations])
    buckets, means, stds = [], [], []
    for t0 in range(0, SECONDS_PER_DAY, bucket_width):
        tmid = min(t0 + bucket_width // 2, SECONDS_PER_DAY - 1)
        ts = np.full(len(locations), tmid, dtype=np.int64)
        idx = activation_indices(xs, ys, ts, index_config)
        stat = np.broadcast_to(static, (len(locations), len(static)))
        if use_distilled or params.dims.dynamic_dim:
            v = net.batch_forward_distilled(idx, stat, params)
        else:
            v = net.batch_forward_main(idx, stat, np.zeros((len(locations), 0)), params)
        buckets.append(t0)
        means.append(float(v.mean()))
        stds.append(float(v.std()))
    return ValueProfile(buckets, means, stds)


def evaluate_states(
    params: ValueNetworkParams,
    index_config: IndexConfig,
    locations: list[GeoPoint],
    times: np.ndarray,
    static: np.ndarray | None = None,
) -> np.ndarray:
    if static is None:
        static = np.zeros(params.dims.static_dim)
    xs = np.array([l.x for l in locations])
    ys = np.array([l.y for l in locations])
    idx = activation_indices(xs, ys, np.asarray(times, dtype=np.int64), index_config)
    stat = np.broadcast_to(static, (len(locations), len(static)))
    if params.dims.dynamic_dim:
        return net.batch_forward_distilled(idx, stat, params)
    return net.batch_forward_main(idx, stat, np.zeros((len(locations), 0)), params)


@dataclass
class CorruptionProbe:
    mean_abs_shift: float
    before: np.ndarray
    after: np.ndarray


def weight_corruption_probe(
    params: ValueNetworkParams,
    index_config: IndexConfig,
    locations: list[GeoPoint],
    times: np.ndarray,
    sigma: float,
    seed: int,
) -> CorruptionProbe:
    """Gaussian noise on the embedding matrix; reports the value-shift stats."""
    before = evaluate_states(params, index_config, locations, times)
    noisy = params.clone()
    rng = substream(seed, "corruption")
    noisy.embedding += sigma * rng.standard_normal(noisy.embedding.shape)
    after = evaluate_states(noisy, index_config, locations, times)
    return CorruptionProbe(float(np.mean(np.abs(after - before))), before, after)
