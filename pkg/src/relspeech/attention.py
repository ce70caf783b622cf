"""Multi-head attention with absolute and signed-relative position energies.

Two interchangeable energy computations:

* absolute: positions were already added to the inputs, so the energy is
  the plain scaled dot product between projected queries and keys;
* relative: the energy between states i and j decomposes into a
  content-content term, a content-distance term, a global content bias
  and a global distance bias. The distance terms are evaluated once per
  distance (2K-1 of them) and re-indexed into the K x K per-pair layout
  by ``relative_shift`` instead of being recomputed per pair.

``energies_relative_naive`` evaluates the same decomposition pair by
pair in O(K^2 d) and exists purely as a test oracle for the fast path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .position import RELATIVE, SinusoidalTable
from .tensor import ConfigError, ShapeError, Tensor


@dataclass
class AttentionParams:
    """Projection weights for one attention block.

    ``w_r``, ``u`` and ``v`` (distance projection, global content bias,
    global distance bias) are present exactly when the block computes
    relative energies. ``u`` and ``v`` are stored as D-vectors and split
    across heads the same way the query/key projections are.
    """

    heads: int
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_r: Tensor | None = None
    u: Tensor | None = None
    v: Tensor | None = None

    def __post_init__(self):
        d = self.w_q.shape[0]
        if d % self.heads != 0:
            raise ConfigError(f"model dim {d} not divisible by {self.heads} heads")
        rel_parts = (self.w_r, self.u, self.v)
        if any(p is not None for p in rel_parts) and any(p is None for p in rel_parts):
            raise ConfigError("w_r, u, v must be given together (relative mode)")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def relative(self) -> bool:
        return self.w_r is not None

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, heads: int, relative: bool):
        def mat():
            return T.glorot(rng, d_model, d_model)

        w_q, w_k, w_v, w_o = mat(), mat(), mat(), mat()
        if relative:
            return cls(heads, w_q, w_k, w_v, w_o, w_r=mat(),
                       u=T.zeros(d_model), v=T.zeros(d_model))
        return cls(heads, w_q, w_k, w_v, w_o)

    def named(self, prefix: str):
        yield f"{prefix}.w_q", self.w_q
        yield f"{prefix}.w_k", self.w_k
        yield f"{prefix}.w_v", self.w_v
        yield f"{prefix}.w_o", self.w_o
        if self.relative:
            yield f"{prefix}.w_r", self.w_r
            yield f"{prefix}.u", self.u
            yield f"{prefix}.v", self.v


def causal_mask(n: int) -> np.ndarray:
    """Lower-triangular self-attention mask (True = attend allowed)."""
    return np.tril(np.ones((n, n), dtype=bool))


def padding_mask(n_queries: int, n_keys: int, valid_keys: int) -> np.ndarray:
    mask = np.zeros((n_queries, n_keys), dtype=bool)
    mask[:, :valid_keys] = True
    return mask


def project_heads(x: Tensor, w: Tensor, heads: int) -> Tensor:
    """Project [K x D] by [D x D'] and split columns into contiguous head blocks."""
    d_out = w.shape[1]
    if d_out % heads != 0:
        raise ConfigError(f"projection width {d_out} not divisible by {heads} heads")
    k = x.shape[0]
    projected = T.matmul(x, w)
    return T.permute(T.reshape(projected, (k, heads, d_out // heads)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    """Inverse of project_heads' split: [H x K x d_h] -> [K x H*d_h]."""
    h, k, d = x.shape
    return T.reshape(T.permute(x, (1, 0, 2)), (k, h * d))


def energies_content(q_heads: Tensor, k_heads: Tensor) -> Tensor:
    """Scaled dot-product energies q k^T / sqrt(d_h), per head."""
    if q_heads.shape[0] != k_heads.shape[0] or q_heads.shape[2] != k_heads.shape[2]:
        raise ShapeError(
            f"energies_content: head shapes {q_heads.shape} and {k_heads.shape} differ"
        )
    d_h = q_heads.shape[2]
    scores = T.matmul(q_heads, T.permute(k_heads, (0, 2, 1)))
    return T.scale(scores, 1.0 / math.sqrt(d_h))


def _distance_rows(table: SinusoidalTable, k: int) -> np.ndarray:
    """Rows for distances +(k-1)..-(k-1), sliced from a relative table."""
    if table.mode != RELATIVE:
        raise ConfigError("relative energies need a relative-mode table")
    if table.max_len < k:
        raise ValueError(
            f"relative table covers +-{table.max_len - 1}, sequence needs +-{k - 1}"
        )
    start = table.max_len - k
    return table.rows[start:start + 2 * k - 1]


def relative_shift(b: Tensor) -> Tensor:
    """Re-index per-distance energies [H x K x 2K-1] into per-pair [H x K x K].

    Column idx of the input holds distance (K-1) - idx, so output entry
    (i, j), which needs distance i - j, gathers input column K-1 - i + j.
    No arithmetic, only re-indexing.
    """
    h, k, width = b.shape
    if width != 2 * k - 1:
        raise ShapeError(f"relative_shift: last dim {width} != 2K-1 for K={k}")
    i = np.arange(k)[:, None]
    j = np.arange(k)[None, :]
    return T.take_last_axis(b, (k - 1) - i + j)


def energies_relative(h: Tensor, params: AttentionParams, table: SinusoidalTable) -> Tensor:
    """Relative-position self-attention energies via the shift re-indexing.

    One [K x 2K-1] matrix product per head covers the content-distance
    and distance-bias terms; the content-bias term is a broadcast row.
    Matches ``energies_relative_naive`` to float64 round-off.
    """
    if not params.relative:
        raise ConfigError("params carry no relative projections")
    k = h.shape[0]
    heads, d_h = params.heads, params.head_dim
    q = project_heads(h, params.w_q, heads)
    key = project_heads(h, params.w_k, heads)
    rel = project_heads(Tensor(_distance_rows(table, k)), params.w_r, heads)
    u = T.reshape(params.u, (heads, 1, d_h))
    v = T.reshape(params.v, (heads, 1, d_h))

    key_t = T.permute(key, (0, 2, 1))
    content = T.matmul(q, key_t)                      # [H, K, K]
    content_bias = T.matmul(u, key_t)                 # [H, 1, K], same for every query
    distance = relative_shift(T.matmul(T.add(q, v), T.permute(rel, (0, 2, 1))))
    scores = T.add(T.add(content, content_bias), distance)
    return T.scale(scores, 1.0 / math.sqrt(d_h))


def energies_relative_naive(h, params: AttentionParams, table: SinusoidalTable) -> np.ndarray:
    """Per-pair O(K^2 d) evaluation of the relative energies. Test oracle.

    Forward-only on plain arrays; shares nothing with the shift path
    beyond the projection definitions.
    """
    hd = np.asarray(getattr(h, "data", h), dtype=np.float64)
    k_len, d = hd.shape
    heads, d_h = params.heads, params.head_dim
    rows = _distance_rows(table, k_len)

    def split(m):
        return m.reshape(-1, heads, d_h).transpose(1, 0, 2)

    q = split(hd @ params.w_q.data)
    key = split(hd @ params.w_k.data)
    rel = split(rows @ params.w_r.data)
    u = params.u.data.reshape(heads, d_h)
    v = params.v.data.reshape(heads, d_h)

    energies = np.empty((heads, k_len, k_len), dtype=np.float64)
    for head in range(heads):
        for i in range(k_len):
            for j in range(k_len):
                r = rel[head, (k_len - 1) - (i - j)]
                energies[head, i, j] = (
                    np.dot(q[head, i], key[head, j])
                    + np.dot(q[head, i], r)
                    + np.dot(u[head], key[head, j])
                    + np.dot(v[head], r)
                ) / math.sqrt(d_h)
    return energies


def multi_head_attention(
    x_q: Tensor,
    x_kv: Tensor,
    params: AttentionParams,
    mode: str,
    mask: np.ndarray | None = None,
    table: SinusoidalTable | None = None,
    attn_drop_mask: np.ndarray | None = None,
    attn_drop_p: float = 0.0,
) -> Tensor:
    """softmax(energies) V per head, heads concatenated, output-projected.

    Relative mode is self-attention only: queries and keys must be the
    very same sequence for query-key distances to mean anything.
    Cross-attention is always content-only.
    """
    if mode == RELATIVE:
        if x_q is not x_kv:
            raise ConfigError("relative mode is defined for self-attention only")
        energies = energies_relative(x_q, params, table)
    else:
        q = project_heads(x_q, params.w_q, params.heads)
        k = project_heads(x_kv, params.w_k, params.heads)
        energies = energies_content(q, k)
    weights = T.softmax_rows(energies, mask)
    weights = T.apply_dropout_mask(weights, attn_drop_mask, attn_drop_p)
    values = project_heads(x_kv, params.w_v, params.heads)
    return T.matmul(merge_heads(T.matmul(weights, values)), params.w_o)
