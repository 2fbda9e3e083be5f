"""Multi-head attention, feed-forward blocks and encoder/decoder layers."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ContractError, ShapeError

NORM_EPS = 1e-5


@dataclass
class MultiHeadAttentionParams:
    """Per-head projections stored as column blocks.

    ``wq[:, h*d_k:(h+1)*d_k]`` is the query projection of head ``h``; the same
    layout holds for ``wk`` and ``wv`` (d_v = d_k = D / H). ``wo`` maps the
    concatenated heads back to D and may be ``None`` (plain concatenation).
    """

    wq: nx.Tensor
    wk: nx.Tensor
    wv: nx.Tensor
    wo: nx.Tensor | None
    heads: int

    @property
    def d_model(self):
        return self.wq.shape[0]

    @property
    def d_k(self):
        return self.wq.shape[1] // self.heads


@dataclass
class FeedForwardParams:
    w1: nx.Tensor   # (D, D_ff)
    b1: nx.Tensor
    w2: nx.Tensor   # (D_ff, D)
    b2: nx.Tensor


@dataclass
class NormParams:
    """Affine normalization parameters plus running statistics for batch norm."""

    gamma: nx.Tensor
    beta: nx.Tensor
    kind: str = "batch"
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    momentum: float = 0.1

    def __post_init__(self):
        d = self.gamma.shape[0]
        if self.running_mean is None:
            self.running_mean = np.zeros(d)
        if self.running_var is None:
            self.running_var = np.ones(d)


@dataclass
class EncoderLayerParams:
    attn: MultiHeadAttentionParams
    ffn: FeedForwardParams
    norm1: NormParams
    norm2: NormParams


@dataclass
class DecoderLayerParams:
    self_attn: MultiHeadAttentionParams
    cross_attn: MultiHeadAttentionParams
    ffn: FeedForwardParams
    norm1: NormParams
    norm2: NormParams
    norm3: NormParams


@dataclass
class AttentionStore:
    """Retains attention weights by key when passed into a forward pass."""

    maps: dict = field(default_factory=dict)

    def put(self, key, weights):
        self.maps[key] = np.array(weights, copy=True)

    def __contains__(self, key):
        return key in self.maps

    def keys(self):
        return list(self.maps)


# --- initialization ----------------------------------------------------------

def init_attention(rng, d_model, heads, output_projection=True):
    if d_model % heads:
        raise ShapeError(f"D={d_model} not divisible by H={heads}")

    def w(shape):
        return nx.parameter(nx.glorot_uniform(rng, shape))

    wo = w((d_model, d_model)) if output_projection else None
    return MultiHeadAttentionParams(w((d_model, d_model)), w((d_model, d_model)),
                                    w((d_model, d_model)), wo, heads)


def init_ffn(rng, d_model, d_ff):
    return FeedForwardParams(
        nx.parameter(nx.glorot_uniform(rng, (d_model, d_ff))), nx.parameter(np.zeros(d_ff)),
        nx.parameter(nx.glorot_uniform(rng, (d_ff, d_model))), nx.parameter(np.zeros(d_model)))


def init_norm(d_model, kind="batch"):
    return NormParams(nx.parameter(np.ones(d_model)), nx.parameter(np.zeros(d_model)), kind)


def init_encoder_layer(rng, d_model, heads, d_ff, norm="batch"):
    return EncoderLayerParams(init_attention(rng, d_model, heads), init_ffn(rng, d_model, d_ff),
                              init_norm(d_model, norm), init_norm(d_model, norm))


def init_decoder_layer(rng, d_model, heads, d_ff, norm="batch"):
    return DecoderLayerParams(
        init_attention(rng, d_model, heads), init_attention(rng, d_model, heads),
        init_ffn(rng, d_model, d_ff),
        init_norm(d_model, norm), init_norm(d_model, norm), init_norm(d_model, norm))


# --- primitives --------------------------------------------------------------

def _split_heads(x, heads):
    *lead, n, d = x.shape
    x = nx.reshape(x, tuple(lead) + (n, heads, d // heads))
    return nx.swapaxes(x, -2, -3)                   # (..., H, n, d_k)


def _merge_heads(x):
    x = nx.swapaxes(x, -2, -3)                      # (..., n, H, d_k)
    *lead, n, h, dk = x.shape
    return nx.reshape(x, tuple(lead) + (n, h * dk))


def multi_head_cross_attention(query, context, params: MultiHeadAttentionParams,
                               store: AttentionStore | None = None, key=None):
    """Queries from ``query`` (..., N_q, D); keys/values from ``context`` (..., N_c, D)."""
    query = query if isinstance(query, nx.Tensor) else nx.tensor(query)
    context = context if isinstance(context, nx.Tensor) else nx.tensor(context)
    D = params.d_model
    if query.shape[-1] != D or context.shape[-1] != D:
        raise ShapeError(
            f"attention expects last dim {D}, got query {query.shape} and context {context.shape}")
    if query.shape[:-2] != context.shape[:-2]:
        raise ShapeError(f"batch dims differ: query {query.shape}, context {context.shape}")
    H, dk = params.heads, params.d_k
    q = _split_heads(nx.matmul(query, params.wq), H)
    k = _split_heads(nx.matmul(context, params.wk), H)
    v = _split_heads(nx.matmul(context, params.wv), H)
    scores = nx.div(nx.matmul(q, nx.swapaxes(k, -1, -2)), math.sqrt(dk))
    weights = nx.softmax(scores, axis=-1)           # (..., H, N_q, N_c)
    if store is not None and key is not None:
        store.put(key, weights.data)
    out = _merge_heads(nx.matmul(weights, v))
    if params.wo is not None:
        out = nx.matmul(out, params.wo)
    return out, weights


def multi_head_self_attention(x, params, store=None, key=None):
    out, _ = multi_head_cross_attention(x, x, params, store, key)
    return out


def feed_forward(x, p: FeedForwardParams):
    h = nx.relu(nx.add(nx.matmul(x, p.w1), p.b1))
    return nx.add(nx.matmul(h, p.w2), p.b2)


def layer_norm(x, gamma, beta, eps=NORM_EPS):
    mu = nx.mean(x, axis=-1, keepdims=True)
    c = nx.sub(x, mu)
    var = nx.mean(nx.square(c), axis=-1, keepdims=True)
    return nx.add(nx.mul(nx.div(c, nx.sqrt(nx.add(var, eps))), gamma), beta)


def batch_norm(x, p: NormParams, training, eps=NORM_EPS):
    """Per-feature normalization over every leading (batch x token) position."""
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = nx.mean(x, axis=axes, keepdims=True)
        c = nx.sub(x, mu)
        var = nx.mean(nx.square(c), axis=axes, keepdims=True)
        m = p.momentum
        p.running_mean = (1 - m) * p.running_mean + m * mu.data.reshape(-1)
        p.running_var = (1 - m) * p.running_var + m * var.data.reshape(-1)
        xhat = nx.div(c, nx.sqrt(nx.add(var, eps)))
    else:
        xhat = nx.div(nx.sub(x, p.running_mean), np.sqrt(p.running_var + eps))
    return nx.add(nx.mul(xhat, p.gamma), p.beta)


def normalize(x, p: NormParams, training):
    if p.kind == "layer":
        return layer_norm(x, p.gamma, p.beta)
    if p.kind == "batch":
        return batch_norm(x, p, training)
    raise ContractError(f"unknown normalization kind {p.kind!r}")


# --- layers ------------------------------------------------------------------

def encoder_layer_forward(x, params: EncoderLayerParams, training=False, store=None, key=None):
    """y1 = Norm(x + SelfAttn(x)); y2 = Norm(y1 + FFN(y1))."""
    a = multi_head_self_attention(x, params.attn, store, key)
    y1 = normalize(nx.add(x, a), params.norm1, training)
    return normalize(nx.add(y1, feed_forward(y1, params.ffn)), params.norm2, training)


def decoder_layer_forward(x, memory, params: DecoderLayerParams, training=False,
                          store=None, key=None):
    """Self-attention, cross-attention over ``memory``, then feed-forward.

    Each sub-layer is residual and followed by normalization.
    """
    if memory.shape[-1] != x.shape[-1]:
        raise ShapeError(f"memory dim {memory.shape[-1]} != token dim {x.shape[-1]}")
    skey = None if key is None else f"{key}.self"
    ckey = None if key is None else f"{key}.cross"
    y1 = normalize(nx.add(x, multi_head_self_attention(x, params.self_attn, store, skey)),
                   params.norm1, training)
    c, _ = multi_head_cross_attention(y1, memory, params.cross_attn, store, ckey)
    y2 = normalize(nx.add(y1, c), params.norm2, training)
    return normalize(nx.add(y2, feed_forward(y2, params.ffn)), params.norm3, training)


# --- export ------------------------------------------------------------------

def attention_matrix(store: AttentionStore | None, key, head=0, sample=0):
    """Pick one (N_q, N_c) map out of a retained weight tensor."""
    if store is None:
        raise ContractError("attention map retention was not enabled for this forward pass")
    if key not in store:
        raise ContractError(f"no retained attention map {key!r}; available: {store.keys()}")
    w = store.maps[key]
    if w.ndim > 3:
        w = w.reshape((-1,) + w.shape[-3:])[sample]
    return w[head]


def export_attention_map(store, key, head, path, sample=0):
    """Write one attention map as ``query_patch,key_patch,weight`` rows.

    Returns the matrix together with its row and column labels.
    """
    mat = attention_matrix(store, key, head, sample)
    rows = [f"{i}" for i in range(mat.shape[0])]
    cols = [f"{j}" for j in range(mat.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_patch", "key_patch", "weight"])
        for i in range(mat.shape[0]):
            for j in range(mat.shape[1]):
                w.writerow([rows[i], cols[j], f"{mat[i, j]:.17g}"])
    return mat, rows, cols


def read_attention_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.DictReader(fh)
        cells = [(int(row["query_patch"]), int(row["key_patch"]), float(row["weight"])) for row in r]
    nq = max(c[0] for c in cells) + 1
    nc = max(c[1] for c in cells) + 1
    mat = np.zeros((nq, nc))
    for i, j, v in cells:
        mat[i, j] = v
    return mat
