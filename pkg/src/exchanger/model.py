"""Collect-update-distribute temporal encoder.

A bank of ``N`` learnable cluster queries, split into a content half and a
position half, exchanges information with ``T`` temporal tokens:

* collect: clusters cross-attend to tokens (content and position logits are
  summed, never mixed into one embedding);
* update: an MLP-Mixer block mixes across clusters, then across channels;
* distribute: tokens cross-attend back to the updated clusters.

Tensors carry arbitrary leading batch axes: ``V`` is ``(..., T, d)`` and the
per-stage query banks are ``(N, d)``. ``P`` and the mask only need to
broadcast against ``V``'s leading axes, so a pixel set can share one
position embedding per parcel.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError


@dataclass
class ExchangerConfig:
    d: int = 64
    n_clusters: int = 8
    heads: int = 4
    stages: int = 2
    ffn_expansion: int = 4
    position_queries: bool = True
    in_channels: int = 4
    max_period: float = 10000.0

    def validate(self) -> None:
        for name in ("d", "n_clusters", "heads", "stages", "ffn_expansion", "in_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d % self.heads:
            raise ConfigError(f"width d={self.d} is not divisible by heads={self.heads}")
        if self.d % 2:
            raise ConfigError(f"width d={self.d} must be even for the sinusoidal embedding")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExchangerConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model fields: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class ExchangerStageParams:
    content_queries: Tensor  # N x d
    position_queries: Tensor  # N x d
    collect_wq: Tensor
    collect_wk: Tensor
    collect_wv: Tensor
    collect_uq: Tensor
    collect_uk: Tensor
    token_norm_gamma: Tensor
    token_norm_beta: Tensor
    token_w1: Tensor  # N x d
    token_b1: Tensor
    token_w2: Tensor  # d x N
    token_b2: Tensor
    channel_norm_gamma: Tensor
    channel_norm_beta: Tensor
    channel_w1: Tensor  # d x ed
    channel_b1: Tensor
    channel_w2: Tensor  # ed x d
    channel_b2: Tensor
    dist_wq: Tensor
    dist_wk: Tensor
    dist_wv: Tensor
    dist_uq: Tensor
    dist_uk: Tensor
    dist_proj: Tensor  # 2d x d
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor

    POSITION_FIELDS = ("position_queries", "collect_uq", "collect_uk", "dist_uq", "dist_uk")

    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named().items() if t.requires_grad}


def _gauss(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


def init_stage_params(cfg: ExchangerConfig, rng: np.random.Generator) -> ExchangerStageParams:
    """Queries ~ N(0, 0.02); projections ~ N(0, 1/fan_in); biases zero, norms identity."""
    d, n, e = cfg.d, cfg.n_clusters, cfg.ffn_expansion

    def proj(fan_in, fan_out):
        return _gauss(rng, (fan_in, fan_out), 1.0 / math.sqrt(fan_in))

    raw = dict(
        content_queries=_gauss(rng, (n, d), 0.02),
        position_queries=_gauss(rng, (n, d), 0.02),
        collect_wq=proj(d, d), collect_wk=proj(d, d), collect_wv=proj(d, d),
        collect_uq=proj(d, d), collect_uk=proj(d, d),
        token_norm_gamma=np.ones(d), token_norm_beta=np.zeros(d),
        # token-mixing hidden width is d, so cost stays linear in N
        token_w1=proj(n, d), token_b1=np.zeros(d),
        token_w2=proj(d, n), token_b2=np.zeros(n),
        channel_norm_gamma=np.ones(d), channel_norm_beta=np.zeros(d),
        channel_w1=proj(d, e * d), channel_b1=np.zeros(e * d),
        channel_w2=proj(e * d, d), channel_b2=np.zeros(d),
        dist_wq=proj(d, d), dist_wk=proj(d, d), dist_wv=proj(d, d),
        dist_uq=proj(d, d), dist_uk=proj(d, d),
        dist_proj=proj(2 * d, d),
        ffn_w1=proj(d, e * d), ffn_b1=np.zeros(e * d),
        ffn_w2=proj(e * d, d), ffn_b2=np.zeros(d),
    )
    if not cfg.position_queries:
        for name in ExchangerStageParams.POSITION_FIELDS:
            raw[name] = np.zeros_like(raw[name])
    params = {}
    for name, value in raw.items():
        trainable = cfg.position_queries or name not in ExchangerStageParams.POSITION_FIELDS
        params[name] = Tensor(value, requires_grad=trainable, name=name)
    return ExchangerStageParams(**params)


def stage_params_from_arrays(arrays: dict[str, np.ndarray], cfg: ExchangerConfig) -> ExchangerStageParams:
    params = {}
    for f in fields(ExchangerStageParams):
        if f.name not in arrays:
            raise ConfigError(f"stage parameters missing {f.name!r}")
        trainable = cfg.position_queries or f.name not in ExchangerStageParams.POSITION_FIELDS
        params[f.name] = Tensor(arrays[f.name], requires_grad=trainable, name=f.name)
    return ExchangerStageParams(**params)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def split_heads(x: Tensor, heads: int) -> Tensor:
    """``(..., L, d) -> (..., heads, L, d / heads)``."""
    *lead, length, width = x.shape
    return x.reshape(*lead, length, heads, width // heads).swapaxes(-3, -2)


def merge_heads(x: Tensor) -> Tensor:
    """``(..., heads, L, dh) -> (..., L, heads * dh)``."""
    *lead, heads, length, dh = x.shape
    return x.swapaxes(-3, -2).reshape(*lead, length, heads * dh)


def mask_bias(mask: np.ndarray, dtype) -> np.ndarray:
    """Additive logit bias broadcasting as ``(..., 1, 1, T)`` over head/query axes."""
    bias = np.where(np.asarray(mask, dtype=bool), 0.0, ad.MASK_VALUE).astype(dtype)
    return bias[..., None, None, :]


def _check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise DataError("every sequence needs at least one valid time step")
    return mask


def mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return ad.gelu(x @ w1 + b1) @ w2 + b2


def collect(cv: Tensor, cp: Tensor, v: Tensor, p: Tensor, mask, params: ExchangerStageParams,
            heads: int, use_position: bool = True, return_attention: bool = False):
    """Clusters gather from valid tokens; returns ``cv + Concat_h(attn_h V W^V_h)``."""
    mask = _check_mask(mask)
    d = v.shape[-1]
    scale = 1.0 / math.sqrt(2 * d)
    q = split_heads(cv @ params.collect_wq, heads)
    k = split_heads(v @ params.collect_wk, heads)
    logits = (q @ k.T) * scale
    if use_position:
        qp = split_heads(cp @ params.collect_uq, heads)
        kp = split_heads(p @ params.collect_uk, heads)
        logits = logits + (qp @ kp.T) * scale
    logits = logits + mask_bias(mask, logits.dtype)
    attn = ad.softmax(logits, axis=-1)
    out = cv + merge_heads(attn @ split_heads(v @ params.collect_wv, heads))
    return (out, attn) if return_attention else out


def update(cv: Tensor, params: ExchangerStageParams) -> Tensor:
    """Token mixing across clusters, then channel mixing, each residual."""
    y = ad.layer_norm(cv, params.token_norm_gamma, params.token_norm_beta)
    cv = cv + mlp(y.T, params.token_w1, params.token_b1, params.token_w2, params.token_b2).T
    y = ad.layer_norm(cv, params.channel_norm_gamma, params.channel_norm_beta)
    return cv + mlp(y, params.channel_w1, params.channel_b1, params.channel_w2, params.channel_b2)


def distribute(v: Tensor, p: Tensor, cv: Tensor, cp: Tensor, mask, params: ExchangerStageParams,
               heads: int, use_position: bool = True, return_assignment: bool = False):
    """Tokens read back from the clusters; masked token rows come out as zero."""
    mask = np.asarray(mask, dtype=bool)
    d = v.shape[-1]
    scale = 1.0 / math.sqrt(2 * d)
    q = split_heads(v @ params.dist_wq, heads)
    k = split_heads(cv @ params.dist_wk, heads)
    logits = (q @ k.T) * scale
    if use_position:
        qp = split_heads(p @ params.dist_uq, heads)
        kp = split_heads(cp @ params.dist_uk, heads)
        logits = logits + (qp @ kp.T) * scale
    assign = ad.softmax(logits, axis=-1)
    z = merge_heads(assign @ split_heads(cv @ params.dist_wv, heads))
    zp = ad.concat([z, v], axis=-1) @ params.dist_proj
    out = zp + mlp(zp, params.ffn_w1, params.ffn_b1, params.ffn_w2, params.ffn_b2)
    out = out * mask[..., None].astype(out.dtype)
    return (out, assign) if return_assignment else out


def exchanger_stage(v: Tensor, p: Tensor, mask, params: ExchangerStageParams, cfg: ExchangerConfig) -> Tensor:
    cv = collect(params.content_queries, params.position_queries, v, p, mask, params,
                 cfg.heads, cfg.position_queries)
    cv = update(cv, params)
    return distribute(v, p, cv, params.position_queries, mask, params, cfg.heads, cfg.position_queries)


def exchanger_forward(v: Tensor, p: Tensor, mask, stages: list[ExchangerStageParams], cfg: ExchangerConfig,
                      return_stages: bool = False):
    """Run every stage in order; ``P`` stays fixed while ``V`` is rewritten."""
    if not stages:
        raise ConfigError("exchanger_forward needs at least one stage")
    outputs = []
    for params in stages:
        v = exchanger_stage(v, p, mask, params, cfg)
        outputs.append(v)
    return (v, outputs) if return_stages else v


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------

def count_flops(cfg: ExchangerConfig, T: int) -> int:
    """Multiply-accumulates of the matrix products in all stages for one sequence.

    Softmax, normalisation and activations are not counted. The count is
    affine in ``T``: the only ``T``-independent terms are products that touch
    nothing but the cluster queries.
    """
    d, n, e = cfg.d, cfg.n_clusters, cfg.ffn_expansion
    pos = 1 if cfg.position_queries else 0
    collect_cost = (
        n * d * d  # Cv W^Q
        + T * d * d  # V W^K
        + T * d * d  # V W^V
        + n * T * d  # content logits
        + n * T * d  # attention-weighted values
        + pos * (n * d * d + T * d * d + n * T * d)  # Cp U^Q, P U^K, position logits
    )
    update_cost = 2 * n * d * d + 2 * e * n * d * d
    distribute_cost = (
        T * d * d  # V W~^Q
        + n * d * d  # Cv W~^K
        + n * d * d  # Cv W~^V
        + T * n * d  # content logits
        + T * n * d  # assignment-weighted values
        + pos * (T * d * d + n * d * d + T * n * d)
        + T * 2 * d * d  # W~_proj
        + T * 2 * e * d * d  # FFN
    )
    return int(cfg.stages * (collect_cost + update_cost + distribute_cost))


# ---------------------------------------------------------------------------
# backbone: input embedding + position embedding + stacked stages
# ---------------------------------------------------------------------------

class Backbone:
    """Embeds raw band values, builds ``P`` from timestamps and runs the stages.

    Inputs are token-major: ``values`` is ``(..., T, C)`` and ``timestamps`` /
    ``mask`` are ``(..., T)`` with leading axes that broadcast against it.
    """

    def __init__(self, cfg: ExchangerConfig, embed_weight: Tensor, embed_bias: Tensor,
                 stages: list[ExchangerStageParams]):
        cfg.validate()
        self.cfg = cfg
        self.embed_weight = embed_weight
        self.embed_bias = embed_bias
        self.stages = stages

    @classmethod
    def init(cls, cfg: ExchangerConfig, rng: np.random.Generator) -> "Backbone":
        cfg.validate()
        w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(cfg.in_channels), (cfg.in_channels, cfg.d)),
                   requires_grad=True, name="embed.weight")
        b = Tensor(np.zeros(cfg.d), requires_grad=True, name="embed.bias")
        return cls(cfg, w, b, [init_stage_params(cfg, rng) for _ in range(cfg.stages)])

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embed.weight": self.embed_weight, "embed.bias": self.embed_bias}
        for i, stage in enumerate(self.stages):
            for name, t in stage.named().items():
                out[f"stage{i}.{name}"] = t
        return out

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_parameters().items() if t.requires_grad}

    @classmethod
    def from_arrays(cls, cfg: ExchangerConfig, arrays: dict[str, np.ndarray]) -> "Backbone":
        try:
            w = Tensor(arrays["embed.weight"], requires_grad=True, name="embed.weight")
            b = Tensor(arrays["embed.bias"], requires_grad=True, name="embed.bias")
        except KeyError as exc:
            raise ConfigError(f"backbone parameters missing {exc}") from None
        stages = []
        for i in range(cfg.stages):
            prefix = f"stage{i}."
            sub = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
            stages.append(stage_params_from_arrays(sub, cfg))
        return cls(cfg, w, b, stages)

    def position_embedding(self, timestamps: np.ndarray, mask: np.ndarray) -> np.ndarray:
        from .encoding import TimeAxis, sinusoidal_pe

        stamps = np.asarray(timestamps, dtype=np.float32)
        mask = np.asarray(mask, dtype=bool)
        flat_t, flat_m = stamps.reshape(-1, stamps.shape[-1]), mask.reshape(-1, mask.shape[-1])
        rows = [sinusoidal_pe(TimeAxis(np.where(m, t, 0.0), m), self.cfg.d, self.cfg.max_period)
                for t, m in zip(flat_t, flat_m)]
        return np.stack(rows).reshape(stamps.shape + (self.cfg.d,))

    def encode(self, values, timestamps: np.ndarray, mask: np.ndarray, return_stages: bool = False):
        v = ad.as_tensor(values) @ self.embed_weight + self.embed_bias
        p = Tensor(self.position_embedding(timestamps, mask))
        return exchanger_forward(v, p, mask, self.stages, self.cfg, return_stages=return_stages)
