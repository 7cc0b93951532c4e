"""Cost comparison between the exchanger encoder and temporal self-attention.

The baseline is a plain multi-head self-attention block over the ``T``
tokens, with the same untied content/position logits, width and head count
as the exchanger, followed by an output projection and a residual FFN.

``run_scaling`` times forward passes over a geometric range of sequence
lengths and fits log-log slopes to both the wall clock and the analytic
multiply-accumulate counts.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .model import (
    ExchangerConfig,
    _check_mask,
    count_flops,
    exchanger_forward,
    init_stage_params,
    mask_bias,
    merge_heads,
    mlp,
    split_heads,
)


@dataclass
class BaselineParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    uq: Tensor
    uk: Tensor
    wo: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor

    @classmethod
    def init(cls, cfg: ExchangerConfig, rng: np.random.Generator) -> "BaselineParams":
        d, hidden = cfg.d, cfg.ffn_expansion * cfg.d

        def w(fan_in, fan_out):
            return Tensor(rng.normal(0, 1 / math.sqrt(fan_in), (fan_in, fan_out)), requires_grad=True)

        def zeros(n):
            return Tensor(np.zeros(n), requires_grad=True)

        return cls(wq=w(d, d), wk=w(d, d), wv=w(d, d), uq=w(d, d), uk=w(d, d), wo=w(d, d),
                   ffn_w1=w(d, hidden), ffn_b1=zeros(hidden), ffn_w2=w(hidden, d), ffn_b2=zeros(d))


def self_attention_baseline(v: Tensor, p: Tensor, mask, params: BaselineParams, heads: int) -> Tensor:
    """One self-attention block: ``V + MHSA(V)`` then ``+ FFN``; masked rows are zero."""
    mask = _check_mask(mask)
    d = v.shape[-1]
    scale = 1.0 / math.sqrt(2 * d)
    q = split_heads(v @ params.wq, heads)
    k = split_heads(v @ params.wk, heads)
    qp = split_heads(p @ params.uq, heads)
    kp = split_heads(p @ params.uk, heads)
    logits = (q @ k.T + qp @ kp.T) * scale + mask_bias(mask, v.dtype)
    attn = ad.softmax(logits, axis=-1)
    h = v + merge_heads(attn @ split_heads(v @ params.wv, heads)) @ params.wo
    out = h + mlp(h, params.ffn_w1, params.ffn_b1, params.ffn_w2, params.ffn_b2)
    return out * mask[..., None].astype(out.dtype)


def baseline_flops(cfg: ExchangerConfig, T: int) -> int:
    """Multiply-accumulates of one baseline stack (``cfg.stages`` blocks) for one sequence."""
    d, e = cfg.d, cfg.ffn_expansion
    per_block = (
        5 * T * d * d  # Q, K, V and both position projections
        + 2 * T * T * d  # content and position logits
        + T * T * d  # attention-weighted values
        + T * d * d  # output projection
        + 2 * e * T * d * d  # FFN
    )
    return int(cfg.stages * per_block)


# ---------------------------------------------------------------------------
# encoders under test
# ---------------------------------------------------------------------------

@dataclass
class Encoder:
    name: str
    forward: Callable[[Tensor, Tensor, np.ndarray], Tensor]
    flops: Callable[[int], int]


def make_encoders(cfg: ExchangerConfig, seed: int = 0) -> list[Encoder]:
    cfg.validate()
    rng = np.random.default_rng([seed, 7])
    stages = [init_stage_params(cfg, rng) for _ in range(cfg.stages)]
    blocks = [BaselineParams.init(cfg, rng) for _ in range(cfg.stages)]

    def baseline(v, p, mask):
        for params in blocks:
            v = self_attention_baseline(v, p, mask, params, cfg.heads)
        return v

    return [
        Encoder("exchanger", lambda v, p, m: exchanger_forward(v, p, m, stages, cfg), lambda T: count_flops(cfg, T)),
        Encoder("self-attention", baseline, lambda T: baseline_flops(cfg, T)),
    ]


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------

@dataclass
class BenchRecord:
    encoder: str
    T: int
    n_clusters: int
    d: int
    heads: int
    flops: int
    median_seconds: float
    min_seconds: float
    repeats: int

    def __post_init__(self):
        if self.median_seconds <= 0 or self.min_seconds <= 0:
            raise ConfigError("wall-clock times must be positive")
        if self.flops <= 0:
            raise ConfigError("FLOP count must be positive")
        if self.repeats < 5:
            raise ConfigError("at least 5 repeats are required")


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


def _time_calls(fn, min_seconds: float) -> tuple[int, float]:
    """Pick an inner loop count so one timed window lasts at least ``min_seconds``."""
    inner = 1
    while True:
        start = time.perf_counter()
        for _ in range(inner):
            fn()
        elapsed = time.perf_counter() - start
        if elapsed >= min_seconds:
            return inner, elapsed
        inner = max(inner * 2, math.ceil(inner * min_seconds / max(elapsed, 1e-9)))


def run_scaling(encoders: list[Encoder], T_list, cfg: ExchangerConfig, repeats: int = 5,
                tokens_per_call: int = 4096, warmup: int = 1, min_seconds: float = 0.05,
                threads: int = 1, seed: int = 0) -> tuple[list[BenchRecord], dict]:
    """Time forward passes per sequence and fit scaling slopes.

    Each call processes ``max(1, tokens_per_call // T)`` sequences so that
    interpreter overhead does not dominate at short lengths; reported times
    are per sequence.
    """
    T_list = [int(t) for t in T_list]
    if len(T_list) < 5:
        raise ConfigError("need at least 5 sequence lengths")
    if any(b <= a for a, b in zip(T_list, T_list[1:])):
        raise ConfigError("sequence lengths must be strictly increasing")
    ratios = np.array(T_list[1:], float) / np.array(T_list[:-1], float)
    if not np.allclose(ratios, ratios[0], rtol=1e-6):
        raise ConfigError("sequence lengths must form a geometric series")
    if repeats < 5:
        raise ConfigError("repeats must be >= 5")
    rng = np.random.default_rng([seed, 11])
    records = []
    with threadpool_limits(limits=threads), ad.no_grad():
        for T in T_list:
            batch = max(1, tokens_per_call // T)
            v = Tensor(rng.normal(size=(batch, T, cfg.d)))
            p = Tensor(rng.normal(size=(1, T, cfg.d)))
            mask = np.ones((1, T), dtype=bool)
            for enc in encoders:
                def call():
                    enc.forward(v, p, mask)

                for _ in range(warmup):
                    call()
                inner, _ = _time_calls(call, min_seconds)
                samples = []
                for _ in range(repeats):
                    start = time.perf_counter()
                    for _ in range(inner):
                        call()
                    samples.append((time.perf_counter() - start) / (inner * batch))
                records.append(BenchRecord(enc.name, T, cfg.n_clusters, cfg.d, cfg.heads, enc.flops(T),
                                           float(np.median(samples)), float(np.min(samples)), repeats))
    return records, fit_slopes(records)


def fit_slopes(records: list[BenchRecord]) -> dict:
    out = {}
    for name in dict.fromkeys(r.encoder for r in records):
        rows = [r for r in records if r.encoder == name]
        Ts = [r.T for r in rows]
        out[name] = {
            "wallclock_slope": loglog_slope(Ts, [r.median_seconds for r in rows]),
            "flops_slope": loglog_slope(Ts, [r.flops for r in rows]),
            "T": Ts,
        }
    return out


def records_to_csv(records: list[BenchRecord], header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    names = list(asdict(records[0])) if records else [f for f in BenchRecord.__dataclass_fields__]
    writer = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
    writer.writeheader()
    for r in records:
        writer.writerow(asdict(r))
    return buf.getvalue()


def slopes_to_json(slopes: dict, **extra) -> str:
    return json.dumps({**extra, "slopes": slopes}, indent=2, sort_keys=True)
