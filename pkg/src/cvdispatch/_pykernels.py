"""Pure-Python implementation of the hot indexing kernels.

Semantics here are the reference: the Cython extension (_ckernels) must
produce bit-identical output. Cell codes are ASCII strings
"L<layer>|<q>|<r>|<tb>" hashed with seeded 64-bit FNV-1a and reduced
modulo the memory size.
"""

import math

import numpy as np

BACKEND = "python"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

_SQRT3 = math.sqrt(3.0)


def fnv1a64(data: bytes, seed: int) -> int:
    """Seeded FNV-1a over bytes; the seed is XORed into the offset basis."""
    h = (_FNV_OFFSET ^ (seed & _MASK64)) & _MASK64
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


def _round_half_away(v: float) -> int:
    # Deterministic rounding shared with the C kernel (llround semantics).
    if v >= 0.0:
        return int(math.floor(v + 0.5))
    return int(math.ceil(v - 0.5))


def hex_axial(x: float, y: float, edge: float) -> tuple[int, int]:
    """Axial (q, r) of the pointy-top hexagon of edge length `edge` containing (x, y)."""
    qf = (_SQRT3 / 3.0 * x - y / 3.0) / edge
    rf = (2.0 / 3.0 * y) / edge
    # Cube rounding; the residual axis with the largest error is recomputed.
    sf = -qf - rf
    q = _round_half_away(qf)
    r = _round_half_away(rf)
    s = _round_half_away(sf)
    dq = abs(q - qf)
    dr = abs(r - rf)
    ds = abs(s - sf)
    if dq > dr and dq > ds:
        q = -r - s
    elif dr > ds:
        r = -q - s
    return q, r


def cell_fields(
    x: float,
    y: float,
    t: int,
    layer: int,
    edge: float,
    offx: float,
    offy: float,
    width: int,
    phase: int,
) -> tuple[int, int, int]:
    """(q, r, time_bucket) for one tiling layer, applying the layer displacement."""
    q, r = hex_axial(x + offx, y + offy, edge)
    tb = (int(t) + phase) // width
    return q, r, tb


def cell_code(layer: int, q: int, r: int, tb: int) -> bytes:
    return b"L%d|%d|%d|%d" % (layer, q, r, tb)


def activation_indices_batch(
    xs: np.ndarray,
    ys: np.ndarray,
    ts: np.ndarray,
    edges: np.ndarray,
    offx: np.ndarray,
    offy: np.ndarray,
    widths: np.ndarray,
    phases: np.ndarray,
    seed: int,
    memory_size: int,
) -> np.ndarray:
    """Memory indices of all activated tiles for a batch of states.

    Returns an int64 array of shape (len(xs), n_layers).
    """
    n_pts = len(xs)
    n_layers = len(edges)
    out = np.empty((n_pts, n_layers), dtype=np.int64)
    for i in range(n_pts):
        x = float(xs[i])
        y = float(ys[i])
        t = int(ts[i])
        for j in range(n_layers):
            q, r, tb = cell_fields(
                x, y, t, j, float(edges[j]), float(offx[j]), float(offy[j]),
                int(widths[j]), int(phases[j]),
            )
            h = fnv1a64(cell_code(j, q, r, tb), seed)
            out[i, j] = h % memory_size
    return out
