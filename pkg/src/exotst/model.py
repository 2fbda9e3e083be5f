"""ExoTST: two exogenous encoders, cross-temporal fusion and an endogenous decoder."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import numerics as nx
from .attention import (
    AttentionStore,
    decoder_layer_forward,
    encoder_layer_forward,
    init_decoder_layer,
    init_encoder_layer,
)
from .dataset import WindowSample
from .embedding import EmbeddingParams, embed_patches, init_embedding, instance_normalize, num_patches, patchify_batch
from .errors import ConfigError, ShapeError
from .fusion import assemble_decoder_memory, fuse_stack, init_fusion_layer


@dataclass
class ExoTSTConfig:
    lookback: int = 256
    horizon: int = 30
    patch_length: int = 16
    stride: int = 8
    d_model: int = 256
    heads: int = 8
    d_ff: int = 128
    n_encoder: int = 2
    n_fusion: int = 1
    n_decoder: int = 2
    n_exogenous: int = 1
    norm: str = "batch"
    exo_norm: str = "window"
    channel_identity: str = "none"
    learning_rate: float = 1e-4
    max_epochs: int = 20
    patience: int = 10
    batch_size: int = 32
    seed: int = 0

    ARCHITECTURE = ("lookback", "horizon", "patch_length", "stride", "d_model", "heads",
                    "d_ff", "n_encoder", "n_fusion", "n_decoder", "n_exogenous", "norm", "exo_norm",
                    "channel_identity")

    def violations(self):
        out = []
        if self.heads < 1 or self.d_model % self.heads:
            out.append("D not divisible by H")
        if self.lookback < self.patch_length:
            out.append("lookback L must be >= patch length P")
        if self.horizon < 1:
            out.append("horizon f must be >= 1")
        if not 1 <= self.stride <= self.patch_length:
            out.append("stride S must satisfy 1 <= S <= P")
        for name in ("patch_length", "d_model", "d_ff", "n_encoder", "n_fusion", "n_decoder",
                     "n_exogenous", "max_epochs", "patience", "batch_size"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if self.norm not in ("batch", "layer"):
            out.append(f"norm must be 'batch' or 'layer', got {self.norm!r}")
        if self.exo_norm not in ("past", "window", "none"):
            out.append(f"exo_norm must be 'past', 'window' or 'none', got {self.exo_norm!r}")
        if self.channel_identity not in ("none", "embed", "projection"):
            out.append(f"channel_identity must be 'none', 'embed' or 'projection', got {self.channel_identity!r}")
        if not self.learning_rate > 0:
            out.append("learning_rate must be > 0")
        return out

    def validate(self):
        bad = self.violations()
        if bad:
            raise ConfigError("invalid ExoTST config: " + "; ".join(bad))
        return self

    @property
    def d_k(self):
        return self.d_model // self.heads

    @property
    def n_past_patches(self):
        return num_patches(self.lookback, self.patch_length, self.stride)

    @property
    def n_future_patches(self):
        return num_patches(self.horizon, self.patch_length, self.stride)

    @property
    def n_memory_tokens(self):
        return self.n_exogenous * ((self.n_past_patches + 1) + (self.n_future_patches + 1))

    def to_lines(self):
        return [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]

    @classmethod
    def from_mapping(cls, mapping):
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for k, v in mapping.items():
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}")
            kind = types[k]
            kwargs[k] = float(v) if kind == "float" else (str(v) if kind == "str" else int(v))
        return cls(**kwargs)


@dataclass
class WindowBatch:
    y_past: np.ndarray      # (B, L)
    X_past: np.ndarray      # (B, M, L)
    X_future: np.ndarray    # (B, M, f)
    y_future: np.ndarray    # (B, f)

    @classmethod
    def stack(cls, samples):
        return cls(np.stack([s.y_past for s in samples]),
                   np.stack([s.X_past for s in samples]),
                   np.stack([s.X_future for s in samples]),
                   np.stack([s.y_future for s in samples]))

    def __len__(self):
        return self.y_past.shape[0]


@dataclass
class ForecastResult:
    y_hat: np.ndarray           # (f,) in the window's input units
    y_hat_std: np.ndarray       # (f,) in instance-normalized units
    mean: float
    std: float
    attention: AttentionStore | None = None


@dataclass(eq=False)
class ExoTSTModel:
    cfg: ExoTSTConfig
    exo_embed: EmbeddingParams
    agg_past: nx.Tensor
    agg_future: nx.Tensor
    endo_embed: EmbeddingParams
    enc_past: list
    enc_future: list
    fusion: list
    decoder: list
    head_w: nx.Tensor
    head_b: nx.Tensor
    channel_emb: nx.Tensor | None = None     # (M, 1, D) added to every exogenous token
    channel_wp: nx.Tensor | None = None      # (M, P, D) per-channel patch projection
    ablate: bool = False
    _params: dict = field(default=None, repr=False)

    def parameters(self):
        """Name -> Tensor for every trainable tensor, each listed once."""
        if self._params is None:
            self._params = dict(_walk_params(self))
        return self._params

    def norms(self):
        """Name -> NormParams for every normalization carrying running stats."""
        out = {}
        for prefix, layers, attrs in (("enc_past", self.enc_past, ("norm1", "norm2")),
                                      ("enc_future", self.enc_future, ("norm1", "norm2")),
                                      ("dec", self.decoder, ("norm1", "norm2", "norm3"))):
            for i, layer in enumerate(layers):
                for a in attrs:
                    out[f"{prefix}.{i}.{a}"] = getattr(layer, a)
        return out

    def parameter_count(self):
        return sum(p.size for p in self.parameters().values())

    def predict(self, batch: WindowBatch, training=False, store=None):
        return predict_batch(self, batch, training, store)[0]


def ablate_future(model: ExoTSTModel) -> ExoTSTModel:
    """A view sharing ``model``'s tensors whose future-encoder input tokens are zero."""
    view = ExoTSTModel(**{f.name: getattr(model, f.name) for f in fields(model)
                          if f.name not in ("ablate", "_params")})
    view.ablate = True
    view._params = model.parameters()
    return view


def _attn_items(prefix, a):
    yield f"{prefix}.wq", a.wq
    yield f"{prefix}.wk", a.wk
    yield f"{prefix}.wv", a.wv
    if a.wo is not None:
        yield f"{prefix}.wo", a.wo


def _ffn_items(prefix, f):
    yield from ((f"{prefix}.w1", f.w1), (f"{prefix}.b1", f.b1),
                (f"{prefix}.w2", f.w2), (f"{prefix}.b2", f.b2))


def _norm_items(prefix, n):
    yield f"{prefix}.gamma", n.gamma
    yield f"{prefix}.beta", n.beta


def _walk_params(m: ExoTSTModel):
    if m.channel_wp is None:
        yield "exo_embed.w_p", m.exo_embed.w_p
    else:
        yield "exo_embed.channel_w_p", m.channel_wp
    if m.channel_emb is not None:
        yield "exo_embed.channel", m.channel_emb
    yield "exo_embed.w_pos", m.exo_embed.w_pos
    yield "enc_past.agg", m.agg_past
    yield "enc_future.agg", m.agg_future
    yield "endo_embed.w_p", m.endo_embed.w_p
    yield "endo_embed.w_pos", m.endo_embed.w_pos
    for prefix, layers in (("enc_past", m.enc_past), ("enc_future", m.enc_future)):
        for i, layer in enumerate(layers):
            yield from _attn_items(f"{prefix}.{i}.attn", layer.attn)
            yield from _ffn_items(f"{prefix}.{i}.ffn", layer.ffn)
            yield from _norm_items(f"{prefix}.{i}.norm1", layer.norm1)
            yield from _norm_items(f"{prefix}.{i}.norm2", layer.norm2)
    for i, layer in enumerate(m.fusion):
        for side in ("past", "future"):
            d = getattr(layer, side)
            yield from _attn_items(f"fusion.{i}.{side}.attn", d.attn)
            yield f"fusion.{i}.{side}.ln.gamma", d.ln_gamma
            yield f"fusion.{i}.{side}.ln.beta", d.ln_beta
    for i, layer in enumerate(m.decoder):
        yield from _attn_items(f"dec.{i}.self_attn", layer.self_attn)
        yield from _attn_items(f"dec.{i}.cross_attn", layer.cross_attn)
        yield from _ffn_items(f"dec.{i}.ffn", layer.ffn)
        for a in ("norm1", "norm2", "norm3"):
            yield from _norm_items(f"dec.{i}.{a}", getattr(layer, a))
    yield "head.w", m.head_w
    yield "head.b", m.head_b


def expected_parameter_count(cfg: ExoTSTConfig):
    """Closed-form parameter count for ``cfg``."""
    D, P, F = cfg.d_model, cfg.patch_length, cfg.d_ff
    n_p, n_f = cfg.n_past_patches, cfg.n_future_patches
    attn = 4 * D * D
    ffn = 2 * D * F + F + D
    norm = 2 * D
    embed = (D * P + D * (max(n_p, n_f) + 1)) + 2 * D + (D * P + D * n_p)
    encoders = 2 * cfg.n_encoder * (attn + ffn + 2 * norm)
    fusion = cfg.n_fusion * 2 * (3 * D * D + 2 * D)
    decoder = cfg.n_decoder * (2 * attn + ffn + 3 * norm)
    head = n_p * D * cfg.horizon + cfg.horizon
    if cfg.channel_identity == "embed":
        embed += cfg.n_exogenous * D
    elif cfg.channel_identity == "projection":
        embed += (cfg.n_exogenous - 1) * D * P
    return embed + encoders + fusion + decoder + head


def init_model(cfg: ExoTSTConfig, seed=None) -> ExoTSTModel:
    """Glorot-uniform weights, zero biases, sinusoid-initialized positions."""
    cfg.validate()
    rng = nx.make_rng(cfg.seed if seed is None else seed)
    D, H = cfg.d_model, cfg.heads
    n_p, n_f = cfg.n_past_patches, cfg.n_future_patches
    exo = init_embedding(rng, D, cfg.patch_length, max(n_p, n_f), agg_slot=True)
    agg_past = nx.parameter(nx.glorot_uniform(rng, (1, D))[0])
    agg_future = nx.parameter(nx.glorot_uniform(rng, (1, D))[0])
    endo = init_embedding(rng, D, cfg.patch_length, n_p, agg_slot=False)
    enc_past = [init_encoder_layer(rng, D, H, cfg.d_ff, cfg.norm) for _ in range(cfg.n_encoder)]
    enc_future = [init_encoder_layer(rng, D, H, cfg.d_ff, cfg.norm) for _ in range(cfg.n_encoder)]
    fusion = [init_fusion_layer(rng, D, H) for _ in range(cfg.n_fusion)]
    decoder = [init_decoder_layer(rng, D, H, cfg.d_ff, cfg.norm) for _ in range(cfg.n_decoder)]
    head_w = nx.parameter(nx.glorot_uniform(rng, (n_p * D, cfg.horizon)))
    head_b = nx.parameter(np.zeros(cfg.horizon))
    channel_emb = channel_wp = None
    if cfg.channel_identity == "embed":
        channel_emb = nx.parameter(nx.glorot_uniform(rng, (cfg.n_exogenous, 1, D)))
    elif cfg.channel_identity == "projection":
        channel_wp = nx.parameter(nx.glorot_uniform(rng, (cfg.n_exogenous, cfg.patch_length, D),
                                                    fan_in=cfg.patch_length, fan_out=D))
    return ExoTSTModel(cfg, exo, agg_past, agg_future, endo, enc_past, enc_future,
                       fusion, decoder, head_w, head_b, channel_emb, channel_wp)


def _check_batch(cfg, batch):
    B = len(batch)
    want = {"y_past": (B, cfg.lookback), "X_past": (B, cfg.n_exogenous, cfg.lookback),
            "X_future": (B, cfg.n_exogenous, cfg.horizon)}
    for name, shape in want.items():
        got = getattr(batch, name).shape
        if got != shape:
            raise ShapeError(f"{name} has shape {got}, config expects {shape}")


def _embed_exogenous(model, patches, agg):
    """(B, M, N, P) patches -> (B, M, N+1, D) tokens, aggregation token first."""
    emb = model.exo_embed
    if model.channel_wp is None:
        tokens = embed_patches(patches, EmbeddingParams(emb.w_p, emb.w_pos, agg), attach_agg=True)
    else:
        n = patches.shape[-2]
        if n > emb.max_patches:
            raise ConfigError(f"{n} patches exceed the positional table size {emb.max_patches}")
        body = nx.add(nx.matmul(nx.tensor(patches), model.channel_wp), nx.transpose(emb.w_pos[:, :n]))
        head = nx.reshape(nx.add(agg, emb.w_pos[:, -1]), (1, 1, 1, -1))
        head = nx.add(head, np.zeros(body.shape[:-2] + (1, body.shape[-1])))
        tokens = nx.concat([head, body], axis=-2)
    if model.channel_emb is not None:
        tokens = nx.add(tokens, model.channel_emb)
    return tokens


def predict_batch(model: ExoTSTModel, batch: WindowBatch, training=False, store=None):
    """Full forward pass.

    Returns ``(y_hat, y_hat_std, mean, std)`` where ``y_hat`` is a (B, f)
    Tensor in the window's input units and ``y_hat_std`` its instance-
    normalized counterpart. Each exogenous channel is normalized with the
    mean/std of its past and future windows taken together, so both
    segments share one affine map and a fully masked lookback stays
    well-conditioned.
    """
    cfg = model.cfg
    _check_batch(cfg, batch)
    y_n, mu_y, sd_y = instance_normalize(batch.y_past)
    if cfg.exo_norm == "past":
        xp_n, mu_x, sd_x = instance_normalize(batch.X_past)
        xf_n = (batch.X_future - mu_x[..., None]) / sd_x[..., None]
    elif cfg.exo_norm == "window" and not model.ablate:
        full, _, _ = instance_normalize(np.concatenate([batch.X_past, batch.X_future], axis=-1))
        xp_n, xf_n = full[..., :cfg.lookback], full[..., cfg.lookback:]
    elif cfg.exo_norm == "window":
        # the ablated view must not see future drivers, not even through the statistics
        xp_n, xf_n = instance_normalize(batch.X_past)[0], None
    else:
        xp_n, xf_n = batch.X_past, batch.X_future

    P, S = cfg.patch_length, cfg.stride
    e_p = _embed_exogenous(model, patchify_batch(xp_n, P, S), model.agg_past)
    if model.ablate:
        n_tok = cfg.n_future_patches + 1
        e_f = nx.tensor(np.zeros((len(batch), cfg.n_exogenous, n_tok, cfg.d_model)))
    else:
        e_f = _embed_exogenous(model, patchify_batch(xf_n, P, S), model.agg_future)

    for i, layer in enumerate(model.enc_past):
        e_p = encoder_layer_forward(e_p, layer, training, store, f"enc_past.{i}")
    for i, layer in enumerate(model.enc_future):
        e_f = encoder_layer_forward(e_f, layer, training, store, f"enc_future.{i}")
    h_p, h_f = fuse_stack(e_p, e_f, model.fusion, store)
    memory = assemble_decoder_memory(h_p, h_f).o_flat            # (B, C*T, D)

    z = embed_patches(patchify_batch(y_n, P, S), model.endo_embed)  # (B, N, D)
    for i, layer in enumerate(model.decoder):
        z = decoder_layer_forward(z, memory, layer, training, store, f"dec.{i}")
    B, N, D = z.shape
    y_std = nx.add(nx.matmul(nx.reshape(z, (B, N * D)), model.head_w), model.head_b)
    y_hat = nx.add(nx.mul(y_std, sd_y[:, None]), mu_y[:, None])
    return y_hat, y_std, mu_y, sd_y


def forward(model: ExoTSTModel, sample: WindowSample, mode="eval", store=None) -> ForecastResult:
    """Forecast a single window. ``mode`` is ``"train"`` or ``"eval"``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    batch = WindowBatch.stack([sample])
    if mode == "eval":
        with nx.no_grad():
            y_hat, y_std, mu, sd = predict_batch(model, batch, False, store)
    else:
        y_hat, y_std, mu, sd = predict_batch(model, batch, True, store)
    return ForecastResult(y_hat.data[0].copy(), y_std.data[0].copy(), float(mu[0]), float(sd[0]), store)


def loss(y_hat, y_true):
    """Mean squared error, averaged over the horizon and then the batch."""
    y_hat = y_hat if isinstance(y_hat, nx.Tensor) else nx.tensor(y_hat)
    y_true = y_true.data if isinstance(y_true, nx.Tensor) else np.asarray(y_true, dtype=np.float64)
    if y_hat.shape != y_true.shape:
        raise ShapeError(f"prediction shape {y_hat.shape} != target shape {y_true.shape}")
    sq = nx.square(nx.sub(y_hat, y_true))
    if sq.ndim == 1:
        return nx.mean(sq)
    return nx.mean(nx.mean(sq, axis=-1))
