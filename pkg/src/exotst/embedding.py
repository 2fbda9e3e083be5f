"""Instance normalization, overlapping patching and token embedding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError

NORM_EPS = 1e-5


@dataclass(frozen=True)
class PatchConfig:
    patch_length: int
    stride: int
    model_dim: int

    def __post_init__(self):
        if self.patch_length < 1:
            raise ConfigError(f"patch length must be >= 1, got {self.patch_length}")
        if not 1 <= self.stride <= self.patch_length:
            raise ConfigError(f"stride must satisfy 1 <= S <= P, got S={self.stride}, P={self.patch_length}")
        if self.model_dim < 1:
            raise ConfigError(f"model dim must be >= 1, got {self.model_dim}")


def num_patches(length, patch_length, stride):
    """N = floor((I - P) / S) + 2, with series shorter than P padded to P."""
    length = max(length, patch_length)
    return (length - patch_length) // stride + 2


def instance_normalize(series, eps=NORM_EPS):
    """Zero-mean, unit population-std copy of ``series`` plus (mean, std).

    Works along the last axis; std is clamped below by ``eps``.
    """
    x = np.asarray(series, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    sd = np.maximum(np.sqrt(((x - mu) ** 2).mean(axis=-1, keepdims=True)), eps)
    if x.ndim == 1:
        return (x - mu) / sd, float(mu[0]), float(sd[0])
    return (x - mu) / sd, mu[..., 0], sd[..., 0]


def denormalize(x, mean, std):
    return np.asarray(x) * std + mean


def patchify_batch(x, patch_length, stride):
    """(..., I) -> (..., N, P) overlapping patches, tail padded with the last value."""
    x = np.asarray(x, dtype=np.float64)
    I = x.shape[-1]
    n = num_patches(I, patch_length, stride)
    need = (n - 1) * stride + patch_length
    pad = np.repeat(x[..., -1:], need - I, axis=-1)
    padded = np.concatenate([x, pad], axis=-1)
    starts = np.arange(n) * stride
    idx = starts[:, None] + np.arange(patch_length)[None, :]
    return padded[..., idx]


def patchify(series, cfg: PatchConfig):
    """Patch a 1-D series into a (P, N) array (patch j in column j)."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 1 or series.size < 1:
        raise ShapeError(f"patchify expects a non-empty 1-D series, got shape {series.shape}")
    return patchify_batch(series, cfg.patch_length, cfg.stride).T


def sinusoidal_table(d_model, n_positions):
    """(D, n) table: row 2i is sin(n / 10000^(2i/D)), row 2i+1 the cosine."""
    table = np.zeros((d_model, n_positions))
    pos = np.arange(n_positions, dtype=np.float64)
    for d in range(d_model):
        freq = 1.0 / (10000.0 ** ((d - d % 2) / d_model))
        table[d] = np.sin(pos * freq) if d % 2 == 0 else np.cos(pos * freq)
    return table


@dataclass
class EmbeddingParams:
    """Patch projection ``w_p`` (D, P), positions ``w_pos`` (D, N_max + 1).

    When ``agg_slot`` is set the last column of ``w_pos`` belongs to the
    aggregation token; otherwise the table is (D, N_max).
    """

    w_p: nx.Tensor
    w_pos: nx.Tensor
    agg: nx.Tensor | None = None    # (D,)
    agg_slot: bool = True

    @property
    def max_patches(self):
        return self.w_pos.shape[1] - int(self.agg_slot)


@dataclass
class TokenSequence:
    tokens: nx.Tensor               # (channels, n_tokens, D)
    has_agg: bool
    norm_stats: tuple | None = None

    @property
    def n_tokens(self):
        return self.tokens.shape[-2]


def init_embedding(rng, d_model, patch_length, max_patches, agg_slot=True, with_agg=False,
                   sinusoidal=True):
    w_p = nx.parameter(nx.glorot_uniform(rng, (d_model, patch_length),
                                         fan_in=patch_length, fan_out=d_model))
    n_cols = max_patches + int(agg_slot)
    if sinusoidal:
        pos = sinusoidal_table(d_model, n_cols)
    else:
        pos = nx.glorot_uniform(rng, (d_model, n_cols))
    agg = nx.parameter(nx.glorot_uniform(rng, (1, d_model))[0]) if with_agg else None
    return EmbeddingParams(w_p, nx.parameter(pos), agg, agg_slot)


def embed_patches(patches, params: EmbeddingParams, attach_agg=False):
    """Map (..., N, P) patches to (..., N[+1], D) tokens.

    Token n receives positional column n; the optional aggregation token is
    prepended at index 0 with the dedicated last positional column.
    """
    patches = patches if isinstance(patches, nx.Tensor) else nx.tensor(patches)
    n = patches.shape[-2]
    if n > params.max_patches:
        raise ConfigError(
            f"{n} patches exceed the positional table size {params.max_patches}")
    pos = nx.transpose(params.w_pos[:, :n])                 # (N, D)
    tokens = nx.add(nx.matmul(patches, nx.transpose(params.w_p)), pos)
    if not attach_agg:
        return tokens
    if params.agg is None or not params.agg_slot:
        raise ConfigError("aggregation token requested but not configured")
    agg = nx.add(params.agg, params.w_pos[:, -1])
    lead = tokens.shape[:-2]
    agg = nx.add(nx.reshape(agg, (1,) * len(lead) + (1, agg.shape[0])),
                 np.zeros(lead + (1, agg.shape[0])))
    return nx.concat([agg, tokens], axis=-2)


def embed_tokens(patches, params: EmbeddingParams, attach_agg=False) -> TokenSequence:
    """Embed per-channel (C, P, N) patch matrices into a TokenSequence."""
    arr = patches.data if isinstance(patches, nx.Tensor) else np.asarray(patches, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    tokens = embed_patches(np.swapaxes(arr, -1, -2), params, attach_agg)
    return TokenSequence(tokens=tokens, has_agg=attach_agg)

