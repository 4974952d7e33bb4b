"""Cerebellar value network: hashed-tile embedding + small ReLU MLP.

Two heads share one embedding matrix: the main head sees
(embedding, static context, normalized dynamic context); the distilled
head sees (embedding, static context) only. Forward and backward passes
are hand-written in numpy; embedding gradients are sparse.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, ConfigError, DataError
from .index import HASH_ALGORITHM_ID, ActivationVector, IndexConfig

CHECKPOINT_MAGIC = b"CVN1"
CHECKPOINT_VERSION = 1

DEFAULT_HIDDEN = (32, 128, 32)


@dataclass(frozen=True)
class NetworkDims:
    memory_size: int = 20000
    embed_dim: int = 50
    static_dim: int = 0
    dynamic_dim: int = 0
    hidden: tuple[int, ...] = DEFAULT_HIDDEN

    @property
    def main_input(self) -> int:
        return self.embed_dim + self.static_dim + self.dynamic_dim

    @property
    def distilled_input(self) -> int:
        return self.embed_dim + self.static_dim

    def layer_widths(self, distilled: bool) -> list[int]:
        first = self.distilled_input if distilled else self.main_input
        return [first, *self.hidden, 1]

    def to_json_dict(self) -> dict:
        return {
            "memory_size": self.memory_size,
            "embed_dim": self.embed_dim,
            "static_dim": self.static_dim,
            "dynamic_dim": self.dynamic_dim,
            "hidden": list(self.hidden),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "NetworkDims":
        return cls(
            memory_size=int(d["memory_size"]),
            embed_dim=int(d["embed_dim"]),
            static_dim=int(d["static_dim"]),
            dynamic_dim=int(d["dynamic_dim"]),
            hidden=tuple(int(h) for h in d["hidden"]),
        )


@dataclass
class ScalingStats:
    """log1p + standardization stats for the dynamic context counts."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "ScalingStats":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, raw: np.ndarray) -> "ScalingStats":
        z = np.log1p(raw)
        std = z.std(axis=0)
        std[std < 1e-12] = 1.0
        return cls(z.mean(axis=0), std)

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        return (np.log1p(raw) - self.mean) / self.std


@dataclass
class StateFeatures:
    activation: ActivationVector
    static_context: np.ndarray
    dynamic_context: np.ndarray | None = None  # raw counts, pre-normalization


@dataclass
class ValueNetworkParams:
    dims: NetworkDims
    embedding: np.ndarray                 # (A, m), shared by both heads
    main_w: list[np.ndarray]              # (out, in) per layer
    main_b: list[np.ndarray]
    dist_w: list[np.ndarray]
    dist_b: list[np.ndarray]
    scaling: ScalingStats

    def clone(self) -> "ValueNetworkParams":
        return ValueNetworkParams(
            dims=self.dims,
            embedding=self.embedding.copy(),
            main_w=[w.copy() for w in self.main_w],
            main_b=[b.copy() for b in self.main_b],
            dist_w=[w.copy() for w in self.dist_w],
            dist_b=[b.copy() for b in self.dist_b],
            scaling=ScalingStats(self.scaling.mean.copy(), self.scaling.std.copy()),
        )


def init_params(
    dims: NetworkDims, rng: np.random.Generator, scaling: ScalingStats | None = None
) -> ValueNetworkParams:
    """Fresh parameters: embedding uniform in [-0.01, 0.01], MLP He-uniform."""
    embedding = rng.uniform(-0.01, 0.01, size=(dims.memory_size, dims.embed_dim))
    main_w, main_b = _init_mlp(dims.layer_widths(distilled=False), rng)
    dist_w, dist_b = _init_mlp(dims.layer_widths(distilled=True), rng)
    if scaling is None:
        scaling = ScalingStats.identity(dims.dynamic_dim)
    return ValueNetworkParams(dims, embedding, main_w, main_b, dist_w, dist_b, scaling)


def _init_mlp(widths: list[int], rng: np.random.Generator):
    ws, bs = [], []
    for fan_in, fan_out in zip(widths, widths[1:]):
        limit = np.sqrt(6.0 / fan_in)
        ws.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return ws, bs


# ---------------------------------------------------------------------------
# Activation handling

def activation_to_index_rows(av: ActivationVector) -> np.ndarray:
    """Flatten counts into an int64 row of length n_tilings (repeats = collisions)."""
    out = np.empty(av.n_tilings, dtype=np.int64)
    pos = 0
    for idx in sorted(av.entries):
        c = av.entries[idx]
        out[pos:pos + c] = idx
        pos += c
    if pos != av.n_tilings:
        raise DataError("activation counts do not sum to n_tilings")
    return out


def batch_embed(idx: np.ndarray, params: ValueNetworkParams) -> np.ndarray:
    """(B, n) memory indices -> (B, m) averaged embedding rows."""
    if idx.size and idx.max() >= params.dims.memory_size:
        raise ConfigError("activation index out of range for embedding memory")
    return params.embedding[idx].mean(axis=1)


# ---------------------------------------------------------------------------
# Forward passes

def _mlp_forward(x: np.ndarray, ws, bs):
    """Returns (output column (B,), per-layer pre-activation inputs for backward)."""
    h = x
    inputs = []
    for i, (w, b) in enumerate(zip(ws, bs)):
        inputs.append(h)
        h = h @ w.T + b
        if i < len(ws) - 1:
            h = np.maximum(h, 0.0)
    return h[:, 0], inputs


def batch_forward_main(
    idx: np.ndarray,
    static: np.ndarray,
    dynamic_raw: np.ndarray,
    params: ValueNetworkParams,
    with_cache: bool = False,
):
    emb = batch_embed(idx, params)
    dyn = params.scaling.normalize(dynamic_raw) if params.dims.dynamic_dim else dynamic_raw
    x = np.concatenate([emb, static, dyn], axis=1)
    v, inputs = _mlp_forward(x, params.main_w, params.main_b)
    if with_cache:
        return v, (x, inputs)
    return v


def batch_forward_distilled(
    idx: np.ndarray, static: np.ndarray, params: ValueNetworkParams,
    with_cache: bool = False,
):
    emb = batch_embed(idx, params)
    x = np.concatenate([emb, static], axis=1)
    v, inputs = _mlp_forward(x, params.dist_w, params.dist_b)
    if with_cache:
        return v, (x, inputs)
    return v


def embed(features: StateFeatures, params: ValueNetworkParams) -> np.ndarray:
    idx = activation_to_index_rows(features.activation)[None, :]
    return batch_embed(idx, params)[0]


def forward_value(features: StateFeatures, params: ValueNetworkParams) -> float:
    if params.dims.dynamic_dim and features.dynamic_context is None:
        raise DataError("dynamic context required by the main value head")
    idx = activation_to_index_rows(features.activation)[None, :]
    dyn = (
        np.asarray(features.dynamic_context, dtype=np.float64)[None, :]
        if params.dims.dynamic_dim
        else np.zeros((1, 0))
    )
    stat = np.asarray(features.static_context, dtype=np.float64)[None, :]
    return float(batch_forward_main(idx, stat, dyn, params)[0])


def forward_distilled(features: StateFeatures, params: ValueNetworkParams) -> float:
    idx = activation_to_index_rows(features.activation)[None, :]
    stat = np.asarray(features.static_context, dtype=np.float64)[None, :]
    return float(batch_forward_distilled(idx, stat, params)[0])


# ---------------------------------------------------------------------------
# Lipschitz constants

def _power_method_norm(w: np.ndarray, iters: int = 50, tol: float = 1e-6):
    """Spectral norm estimate; returns (sigma, u, v) with w v ~ sigma u."""
    rng = np.random.default_rng(0)
    v = rng.standard_normal(w.shape[1])
    v /= np.linalg.norm(v) + 1e-300
    sigma = 0.0
    for _ in range(iters):
        u = w @ v
        nu = np.linalg.norm(u)
        if nu < 1e-300:
            return 0.0, np.zeros(w.shape[0]), v
        u /= nu
        v = w.T @ u
        new_sigma = np.linalg.norm(v)
        v /= new_sigma + 1e-300
        if abs(new_sigma - sigma) < tol:
            sigma = new_sigma
            break
        sigma = new_sigma
    return float(sigma), u, v


def layer_lipschitz(w: np.ndarray, p) -> float:
    """Operator norm of a linear layer mapping x -> w x."""
    if p == 1:
        return float(np.abs(w).sum(axis=0).max())
    if p == np.inf or p == "inf":
        return float(np.abs(w).sum(axis=1).max())
    if p == 2:
        return _power_method_norm(w)[0]
    raise ValueError(f"unsupported norm order {p!r}")


def embedding_lipschitz(embedding: np.ndarray, p) -> float:
    """Bound for the averaged-tile embedding: 2 * max_i ||row_i||_p."""
    if p == 1:
        row_norms = np.abs(embedding).sum(axis=1)
    elif p == np.inf or p == "inf":
        row_norms = np.abs(embedding).max(axis=1)
    elif p == 2:
        row_norms = np.linalg.norm(embedding, axis=1)
    else:
        raise ValueError(f"unsupported norm order {p!r}")
    return float(2.0 * row_norms.max())


@dataclass
class LipschitzReport:
    per_layer: list[tuple[str, float]]
    product: float
    p: object


def lipschitz_bound(params: ValueNetworkParams, p) -> LipschitzReport:
    """Per-layer constants and their product for the main head."""
    layers: list[tuple[str, float]] = [
        ("embedding", embedding_lipschitz(params.embedding, p))
    ]
    n_lin = len(params.main_w)
    for i, w in enumerate(params.main_w):
        layers.append((f"linear{i}", layer_lipschitz(w, p)))
        if i < n_lin - 1:
            layers.append((f"relu{i}", 1.0))
    product = 1.0
    for _, c in layers:
        product *= c
    return LipschitzReport(layers, product, p)


# ---------------------------------------------------------------------------
# Backward pass

@dataclass
class Gradients:
    emb_rows: np.ndarray          # int64 (k,), unique touched embedding rows
    emb_grad: np.ndarray          # (k, m)
    main_dw: list[np.ndarray]
    main_db: list[np.ndarray]

    def dense_embedding(self, memory_size: int, embed_dim: int) -> np.ndarray:
        g = np.zeros((memory_size, embed_dim))
        g[self.emb_rows] = self.emb_grad
        return g


def _penalty_subgradients(params: ValueNetworkParams, p):
    """Deterministic subgradient of R = L_emb + sum_i L(linear_i), first-index ties."""
    emb = params.embedding
    if p == 1:
        row_norms = np.abs(emb).sum(axis=1)
        r = int(np.argmax(row_norms))
        emb_row_grad = 2.0 * np.sign(emb[r])
    elif p == np.inf or p == "inf":
        row_norms = np.abs(emb).max(axis=1)
        r = int(np.argmax(row_norms))
        j = int(np.argmax(np.abs(emb[r])))
        emb_row_grad = np.zeros(emb.shape[1])
        emb_row_grad[j] = 2.0 * np.sign(emb[r, j])
    elif p == 2:
        row_norms = np.linalg.norm(emb, axis=1)
        r = int(np.argmax(row_norms))
        nr = row_norms[r]
        emb_row_grad = 2.0 * emb[r] / nr if nr > 0 else np.zeros(emb.shape[1])
    else:
        raise ValueError(f"unsupported norm order {p!r}")

    lin_grads = []
    for w in params.main_w:
        g = np.zeros_like(w)
        if p == 1:
            j = int(np.argmax(np.abs(w).sum(axis=0)))
            g[:, j] = np.sign(w[:, j])
        elif p == np.inf or p == "inf":
            i = int(np.argmax(np.abs(w).sum(axis=1)))
            g[i, :] = np.sign(w[i, :])
        else:
            sigma, u, v = _power_method_norm(w)
            if sigma > 0:
                g = np.outer(u, v)
        lin_grads.append(g)
    return r, emb_row_grad, lin_grads


def penalty_value(params: ValueNetworkParams, p) -> float:
    """R(theta): sum of per-layer Lipschitz constants (ReLUs contribute 1)."""
    total = embedding_lipschitz(params.embedding, p)
    for w in params.main_w:
        total += layer_lipschitz(w, p)
    total += len(params.main_w) - 1  # ReLU layers
    return total


def backward(
    idx: np.ndarray,
    static: np.ndarray,
    dynamic_raw: np.ndarray,
    targets: np.ndarray,
    params: ValueNetworkParams,
    lam: float = 0.0,
    p=1,
) -> tuple[Gradients, float, float]:
    """Gradients of 0.5*mean((V - y)^2) + lam*R(theta).

    Returns (gradients, data_loss, penalty_value). Embedding gradients are
    sparse over the activated rows (plus the penalty's max-norm row).
    """
    if len(targets) == 0:
        raise DataError("empty batch")
    if not np.all(np.isfinite(targets)):
        raise DataError("non-finite training target")
    batch = len(targets)
    v, (x, inputs) = batch_forward_main(idx, static, dynamic_raw, params, with_cache=True)
    resid = v - targets
    data_loss = 0.5 * float(resid @ resid) / batch

    # MLP backward
    delta = (resid / batch)[:, None]            # dL/d output, (B, 1)
    main_dw = [None] * len(params.main_w)
    main_db = [None] * len(params.main_b)
    for i in range(len(params.main_w) - 1, -1, -1):
        h_in = inputs[i]
        main_dw[i] = delta.T @ h_in
        main_db[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ params.main_w[i]
            # ReLU mask: the stored input of layer i is the post-ReLU output
            # of layer i-1, so positive entries mark active units.
            delta = delta * (h_in > 0.0)

    # Embedding backward: dL/d x restricted to the embedding slice, spread
    # over activated rows with weight 1/n per activation.
    m = params.dims.embed_dim
    n = idx.shape[1]
    d_x = delta @ params.main_w[0]              # (B, input)
    d_emb_out = d_x[:, :m]
    rows = idx.ravel()
    contrib = np.repeat(d_emb_out / n, n, axis=0)
    uniq, inv = np.unique(rows, return_inverse=True)
    emb_grad = np.zeros((len(uniq), m))
    np.add.at(emb_grad, inv, contrib)

    pen = 0.0
    if lam > 0.0:
        pen = penalty_value(params, p)
        pr, pgrad, lin_pgrads = _penalty_subgradients(params, p)
        for i in range(len(main_dw)):
            main_dw[i] = main_dw[i] + lam * lin_pgrads[i]
        if pr in uniq:
            emb_grad[np.searchsorted(uniq, pr)] += lam * pgrad
        else:
            pos = np.searchsorted(uniq, pr)
            uniq = np.insert(uniq, pos, pr)
            emb_grad = np.insert(emb_grad, pos, lam * pgrad, axis=0)
    elif lam < 0.0:
        raise ValueError("lambda must be >= 0")

    return Gradients(uniq, emb_grad, main_dw, main_db), data_loss, pen


# ---------------------------------------------------------------------------
# Checkpoint container

def _blocks(params: ValueNetworkParams) -> list[tuple[str, np.ndarray]]:
    out = [("embedding", params.embedding)]
    for i, (w, b) in enumerate(zip(params.main_w, params.main_b)):
        out.append((f"main_w{i}", w))
        out.append((f"main_b{i}", b))
    for i, (w, b) in enumerate(zip(params.dist_w, params.dist_b)):
        out.append((f"dist_w{i}", w))
        out.append((f"dist_b{i}", b))
    out.append(("scaling_mean", params.scaling.mean))
    out.append(("scaling_std", params.scaling.std))
    return out


def save_checkpoint(
    params: ValueNetworkParams,
    index_config: IndexConfig,
    metadata: dict | None = None,
) -> bytes:
    """Serialize to the CVN1 container: magic, JSON header, float64 LE blocks."""
    blocks = _blocks(params)
    header = {
        "version": CHECKPOINT_VERSION,
        "dims": params.dims.to_json_dict(),
        "index_config": index_config.to_json_dict(),
        "hash_algorithm": HASH_ALGORITHM_ID,
        "metadata": metadata or {},
        "blocks": [{"name": n, "shape": list(a.shape)} for n, a in blocks],
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(hdr)))
    buf.write(hdr)
    for _, a in blocks:
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return buf.getvalue()


def load_checkpoint(
    data: bytes, expected_config: IndexConfig | None = None
) -> tuple[ValueNetworkParams, IndexConfig, dict]:
    """Inverse of save_checkpoint; verifies magic, version and IndexConfig."""
    if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic bytes")
    (hdr_len,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + hdr_len:
        raise CheckpointError("truncated header")
    try:
        header = json.loads(data[8:8 + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt header: {e}") from e
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    cfg = IndexConfig.from_json_dict(header["index_config"])
    if expected_config is not None and cfg != expected_config:
        raise CheckpointError("IndexConfig mismatch between checkpoint and caller")
    dims = NetworkDims.from_json_dict(header["dims"])
    if cfg.memory_size != dims.memory_size:
        raise CheckpointError("embedding memory size disagrees with IndexConfig")

    arrays = {}
    off = 8 + hdr_len
    for blk in header["blocks"]:
        shape = tuple(blk["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if off + nbytes > len(data):
            raise CheckpointError("truncated weight block")
        arrays[blk["name"]] = np.frombuffer(
            data, dtype="<f8", count=count, offset=off
        ).reshape(shape).astype(np.float64)
        off += nbytes

    def grab(prefix):
        ws, bs, i = [], [], 0
        while f"{prefix}_w{i}" in arrays:
            ws.append(arrays[f"{prefix}_w{i}"])
            bs.append(arrays[f"{prefix}_b{i}"])
            i += 1
        return ws, bs

    main_w, main_b = grab("main")
    dist_w, dist_b = grab("dist")
    params = ValueNetworkParams(
        dims=dims,
        embedding=arrays["embedding"],
        main_w=main_w,
        main_b=main_b,
        dist_w=dist_w,
        dist_b=dist_b,
        scaling=ScalingStats(arrays["scaling_mean"], arrays["scaling_std"]),
    )
    return params, cfg, header.get("metadata", {})


def save_checkpoint_file(
    path: str,
    params: ValueNetworkParams,
    index_config: IndexConfig,
    metadata: dict | None = None,
) -> None:
    with open(path, "wb") as fh:
        fh.write(save_checkpoint(params, index_config, metadata))


def load_checkpoint_file(
    path: str, expected_config: IndexConfig | None = None
) -> tuple[ValueNetworkParams, IndexConfig, dict]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return load_checkpoint(data, expected_config)
