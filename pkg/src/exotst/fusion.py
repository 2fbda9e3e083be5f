"""Cross-temporal fusion of the past and future exogenous encodings.

Each fusion layer lets the aggregation token of one branch attend, as a
single query, over itself plus the other branch's patch tokens. Patch tokens
themselves pass through unchanged; they see the refreshed aggregation token
in whatever layer reads the sequence next.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .attention import MultiHeadAttentionParams, init_attention, layer_norm, multi_head_cross_attention
from .errors import ConfigError, ShapeError


@dataclass
class FusionDirectionParams:
    attn: MultiHeadAttentionParams      # no output projection
    ln_gamma: nx.Tensor
    ln_beta: nx.Tensor


@dataclass
class FusionLayerParams:
    past: FusionDirectionParams         # past aggregation token queries the future branch
    future: FusionDirectionParams       # future aggregation token queries the past branch


@dataclass
class FusedMemory:
    o: nx.Tensor         # (..., C, (N'+1)+(N''+1), D)
    o_flat: nx.Tensor    # (B or 1, C*((N'+1)+(N''+1)), D)


def init_fusion_layer(rng, d_model, heads):
    def direction():
        return FusionDirectionParams(
            init_attention(rng, d_model, heads, output_projection=False),
            nx.parameter(np.ones(d_model)), nx.parameter(np.zeros(d_model)))
    return FusionLayerParams(direction(), direction())


def _exchange(own, other, p: FusionDirectionParams, store, key):
    agg = own[..., 0:1, :]
    joined = nx.concat([agg, other[..., 1:, :]], axis=-2)
    z = layer_norm(joined, p.ln_gamma, p.ln_beta)
    attended, _ = multi_head_cross_attention(agg, z, p.attn, store, key)
    new_agg = nx.add(agg, attended)
    return nx.concat([new_agg, own[..., 1:, :]], axis=-2)


def fuse_once(e_p, e_f, params: FusionLayerParams, store=None, key=None):
    """One bidirectional exchange; both directions read the same inputs.

    ``e_p`` is (..., N'+1, D) and ``e_f`` is (..., N''+1, D), aggregation
    token first.
    """
    if e_p.shape[-2] < 1 or e_f.shape[-2] < 1:
        raise ShapeError("fusion inputs must carry an aggregation token at index 0")
    if e_p.shape[-1] != e_f.shape[-1]:
        raise ShapeError(f"token dims differ: {e_p.shape} vs {e_f.shape}")
    kp = None if key is None else f"{key}.past_to_future"
    kf = None if key is None else f"{key}.future_to_past"
    h_p = _exchange(e_p, e_f, params.past, store, kp)
    h_f = _exchange(e_f, e_p, params.future, store, kf)
    return h_p, h_f


def fuse_stack(e_p, e_f, layers, store=None, key="fusion"):
    if len(layers) < 1:
        raise ConfigError("fusion needs at least one layer (N_L >= 1)")
    h_p, h_f = e_p, e_f
    for i, layer in enumerate(layers):
        h_p, h_f = fuse_once(h_p, h_f, layer, store, None if key is None else f"{key}.{i}")
    return h_p, h_f


def assemble_decoder_memory(h_p, h_f) -> FusedMemory:
    """Concatenate fused past/future tokens per channel, then flatten channels.

    Inputs are (..., C, N'+1, D) and (..., C, N''+1, D); the flat memory lists
    channel 0's tokens first.
    """
    if h_p.shape[:-2] != h_f.shape[:-2] or h_p.shape[-1] != h_f.shape[-1]:
        raise ShapeError(f"channel shape mismatch: {h_p.shape} vs {h_f.shape}")
    o = nx.concat([h_p, h_f], axis=-2)
    *lead, C, T, D = o.shape
    flat_lead = tuple(lead) if lead else (1,)
    return FusedMemory(o=o, o_flat=nx.reshape(o, flat_lead + (C * T, D)))
