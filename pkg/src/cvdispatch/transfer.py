"""Cross-city transfer: finetuning, progressive lateral columns, and the
correlated-feature split.

Three reuse strategies for a value network trained in a source city:

- finetune: copy the transferable MLP blocks into a freshly indexed target
  network and keep training, optionally freezing copied blocks;
- progressive: freeze the source column and train a new target column that
  receives lateral connections h_i = relu(W_i h_{i-1} + U_i h_{i-1}^src);
- correlated-feature split: route only the city-agnostic (adaptive) features
  through the frozen source column while the city-specific location embedding
  feeds the target column.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .index import IndexConfig
from . import network as net
from .rngs import substream


# ---------------------------------------------------------------------------
# feature split

@dataclass(frozen=True)
class FeatureSplit:
    """Partition of the input feature vector into transferable and city-bound parts."""

    adaptive: tuple[int, ...]      # context / time features, city-agnostic
    nonadaptive: tuple[int, ...]   # location-embedding path, city-specific

    def __post_init__(self):
        both = sorted(self.adaptive) + sorted(self.nonadaptive)
        if sorted(both) != list(range(len(both))):
            raise ConfigError("feature split must partition 0..n-1")
        if set(self.adaptive) & set(self.nonadaptive):
            raise ConfigError("feature split groups overlap")

    def to_json_dict(self) -> dict:
        return {"adaptive": list(self.adaptive), "nonadaptive": list(self.nonadaptive)}

    @classmethod
    def from_json_dict(cls, d: dict) -> "FeatureSplit":
        return cls(tuple(d["adaptive"]), tuple(d["nonadaptive"]))


# ---------------------------------------------------------------------------
# finetuning

@dataclass
class FreezeMask:
    embedding: bool = False
    main_w: tuple[bool, ...] = ()
    main_b: tuple[bool, ...] = ()


def init_finetune(
    source: net.ValueNetworkParams,
    target_index: IndexConfig,
    seed: int = 0,
) -> net.ValueNetworkParams:
    """Warm-start a target-city network from a source checkpoint.

    The MLP blocks (transferable) are copied; the location embedding is
    re-initialized because tile hashes are city-specific. Layer shapes must
    match between source and target.
    """
    dims = source.dims
    if target_index.memory_size != dims.memory_size:
        raise ConfigError(
            f"memory size mismatch: source {dims.memory_size}, "
            f"target {target_index.memory_size}")
    rng = substream(seed, "finetune-init")
    fresh = net.init_params(dims, rng)
    out = source.clone()
    out.embedding = fresh.embedding
    return out


def apply_freeze(params_before: net.ValueNetworkParams,
                 params_after: net.ValueNetworkParams,
                 mask: FreezeMask) -> None:
    """Restore frozen blocks after an optimizer step (in place on params_after)."""
    if mask.embedding:
        params_after.embedding[:] = params_before.embedding
    for i, frozen in enumerate(mask.main_w):
        if frozen:
            params_after.main_w[i][:] = params_before.main_w[i]
    for i, frozen in enumerate(mask.main_b):
        if frozen:
            params_after.main_b[i][:] = params_before.main_b[i]


# ---------------------------------------------------------------------------
# progressive columns

@dataclass
class ProgressiveParams:
    source_w: list[np.ndarray]     # frozen column, (out, in) per layer
    source_b: list[np.ndarray]
    target_w: list[np.ndarray]
    target_b: list[np.ndarray]
    lateral_u: list[np.ndarray]    # (out_i, src_width_{i-1}) per layer

    def __post_init__(self):
        if not (len(self.source_w) == len(self.target_w) == len(self.lateral_u)):
            raise ConfigError("progressive columns must have equal depth")
        for i, u in enumerate(self.lateral_u):
            out_i = self.target_w[i].shape[0]
            src_in = self.source_w[i].shape[1]
            if u.shape != (out_i, src_in):
                raise ConfigError(
                    f"lateral {i}: expected shape {(out_i, src_in)}, got {u.shape}")


def init_progressive(
    source_w: list[np.ndarray],
    source_b: list[np.ndarray],
    target_widths: list[int],
    seed: int = 0,
) -> ProgressiveParams:
    """Fresh target column with zero-initialized laterals.

    `target_widths` is [input, hidden..., 1]; depth must equal the source
    column's. Zero laterals make the initial forward pass identical to an
    independent target network.
    """
    if len(target_widths) - 1 != len(source_w):
        raise ConfigError("target depth must match source depth")
    rng = substream(seed, "progressive-init")
    tw, tb, lu = [], [], []
    for i in range(len(source_w)):
        n_in, n_out = target_widths[i], target_widths[i + 1]
        bound = np.sqrt(6.0 / n_in)
        tw.append(rng.uniform(-bound, bound, (n_out, n_in)))
        tb.append(np.zeros(n_out))
        lu.append(np.zeros((n_out, source_w[i].shape[1])))
    return ProgressiveParams(list(source_w), list(source_b), tw, tb, lu)


def source_forward(prog: ProgressiveParams, source_x: np.ndarray) -> list[np.ndarray]:
    """Per-layer inputs of the frozen source column (h_0 .. h_{L-1})."""
    h = source_x
    acts = []
    for i, (w, b) in enumerate(zip(prog.source_w, prog.source_b)):
        acts.append(h)
        h = h @ w.T + b
        if i < len(prog.source_w) - 1:
            h = np.maximum(h, 0.0)
    return acts


def progressive_forward(
    prog: ProgressiveParams,
    target_x: np.ndarray,
    source_x: np.ndarray,
    with_cache: bool = False,
):
    """Target column forward with lateral injections from the source column."""
    src = source_forward(prog, source_x)
    h = target_x
    inputs = []
    for i, (w, b, u) in enumerate(zip(prog.target_w, prog.target_b, prog.lateral_u)):
        inputs.append(h)
        h = h @ w.T + src[i] @ u.T + b
        if i < len(prog.target_w) - 1:
            h = np.maximum(h, 0.0)
    v = h[:, 0]
    if with_cache:
        return v, (inputs, src)
    return v


def progressive_backward(
    prog: ProgressiveParams,
    target_x: np.ndarray,
    source_x: np.ndarray,
    targets: np.ndarray,
):
    """Gradients of 0.5 * MSE wrt target weights, biases, and laterals only."""
    v, (inputs, src) = progressive_forward(prog, target_x, source_x, with_cache=True)
    n = len(targets)
    resid = v - targets
    loss = 0.5 * float(resid @ resid) / n
    delta = (resid / n)[:, None]
    L = len(prog.target_w)
    dw = [None] * L
    db = [None] * L
    du = [None] * L
    for i in range(L - 1, -1, -1):
        dw[i] = delta.T @ inputs[i]
        du[i] = delta.T @ src[i]
        db[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ prog.target_w[i]) * (inputs[i] > 0.0)
    return dw, db, du, loss


@dataclass
class TransferTrace:
    losses: list[float] = field(default_factory=list)

    def steps_to(self, threshold: float) -> int | None:
        for i, v in enumerate(self.losses):
            if v <= threshold:
                return i + 1
        return None


def train_progressive(
    prog: ProgressiveParams,
    target_x: np.ndarray,
    source_x: np.ndarray,
    y: np.ndarray,
    steps: int,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
    train_laterals: bool = True,
) -> TransferTrace:
    """Adam on the target column (and laterals); the source column is frozen.

    With `train_laterals=False` and zero-initialized laterals this is exactly
    the no-transfer baseline. Records the full-dataset loss after every step.
    """
    rng = substream(seed, "progressive-train")
    arrays = prog.target_w + prog.target_b + (prog.lateral_u if train_laterals else [])
    ms = [np.zeros_like(a) for a in arrays]
    vs = [np.zeros_like(a) for a in arrays]
    b1, b2, eps = 0.9, 0.999, 1e-8
    n = len(y)
    trace = TransferTrace()
    for t in range(1, steps + 1):
        sel = rng.choice(n, size=min(batch_size, n), replace=False)
        dw, db, du, _ = progressive_backward(prog, target_x[sel], source_x[sel], y[sel])
        grads = dw + db + (du if train_laterals else [])
        c1, c2 = 1 - b1**t, 1 - b2**t
        for a, g, m, v2 in zip(arrays, grads, ms, vs):
            m *= b1
            m += (1 - b1) * g
            v2 *= b2
            v2 += (1 - b2) * g * g
            a -= lr * (m / c1) / (np.sqrt(v2 / c2) + eps)
        full = progressive_forward(prog, target_x, source_x)
        trace.losses.append(0.5 * float(np.mean((full - y) ** 2)))
    return trace


# ---------------------------------------------------------------------------
# correlated-feature split

def cfpt_forward(
    split: FeatureSplit,
    prog: ProgressiveParams,
    x_full: np.ndarray,
    with_cache: bool = False,
):
    """Adaptive features -> frozen source column; nonadaptive -> target column."""
    if x_full.shape[1] != len(split.adaptive) + len(split.nonadaptive):
        raise ConfigError("input width inconsistent with feature split")
    if len(split.adaptive) != prog.source_w[0].shape[1]:
        raise ConfigError("adaptive width inconsistent with source column")
    if len(split.nonadaptive) != prog.target_w[0].shape[1]:
        raise ConfigError("nonadaptive width inconsistent with target column")
    src_x = x_full[:, list(split.adaptive)]
    tgt_x = x_full[:, list(split.nonadaptive)]
    return progressive_forward(prog, tgt_x, src_x, with_cache=with_cache)


def train_cfpt(
    split: FeatureSplit,
    prog: ProgressiveParams,
    x_full: np.ndarray,
    y: np.ndarray,
    steps: int,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
    train_laterals: bool = True,
) -> TransferTrace:
    return train_progressive(
        prog,
        x_full[:, list(split.nonadaptive)],
        x_full[:, list(split.adaptive)],
        y, steps, lr=lr, batch_size=batch_size, seed=seed,
        train_laterals=train_laterals)
