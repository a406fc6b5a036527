"""Compact pre-norm transformer encoder with adapter-ready projections.

A stack of standard pre-norm blocks (norm -> multi-head attention ->
residual; norm -> GELU feed-forward -> residual) over a cls-prefixed token
sequence, plus a learned additive positional table and a two-way linear head
reading the cls row. Every projection is an ``AdaptedLinear`` so low-rank
adapters can be attached to any of them; by default only the attention query
and value projections are adapted. The backbone is randomly initialized and
deterministic: no dropout, fixed reduction order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lora import AdaptedLinear, init_adapter
from .numerics import Parameter, Tensor, layer_norm, matmul, softmax_rows, gelu
from .stfe import TokenSequence

__all__ = [
    "LORA_TARGETS",
    "EncoderConfig",
    "LayerParams",
    "EncoderParams",
    "init_encoder",
    "encoder_forward",
    "classify",
    "attach_lora",
]

LORA_TARGETS = ("wq", "wk", "wv", "wo", "ffn1", "ffn2")
DEFAULT_LORA_TARGETS = ("wq", "wv")


@dataclass
class EncoderConfig:
    layers: int = 2
    d: int = 64
    heads: int = 4
    ffn_mult: int = 4
    max_tokens: int = 1 + 23 * 10
    dropout: float = 0.0  # kept at 0 so runs are deterministic

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError("hidden size %d not divisible by %d heads" % (self.d, self.heads))
        if self.dropout != 0.0:
            raise ValueError("dropout is pinned to 0")


@dataclass
class LayerParams:
    wq: AdaptedLinear
    wk: AdaptedLinear
    wv: AdaptedLinear
    wo: AdaptedLinear
    ffn1: AdaptedLinear
    ffn2: AdaptedLinear
    ln1_gamma: Parameter
    ln1_beta: Parameter
    ln2_gamma: Parameter
    ln2_beta: Parameter

    def projection(self, name: str) -> AdaptedLinear:
        if name not in LORA_TARGETS:
            raise ValueError("unknown projection %r; expected one of %s" % (name, LORA_TARGETS))
        return getattr(self, name)


@dataclass
class EncoderParams:
    layers: list[LayerParams]
    pos: Parameter          # [max_tokens, d]
    final_gamma: Parameter
    final_beta: Parameter
    head: AdaptedLinear     # d -> 2


def _init_adapted(rng, d_out: int, d_in: int) -> AdaptedLinear:
    bound = 1.0 / math.sqrt(d_in)
    return AdaptedLinear(Parameter(rng.uniform(-bound, bound, size=(d_out, d_in))),
                         Parameter(np.zeros(d_out)))


def init_encoder(config: EncoderConfig, seed: int) -> EncoderParams:
    """Seeded random backbone; the head starts at exactly zero."""
    rng = np.random.default_rng(seed)
    d, m = config.d, config.ffn_mult
    layers = []
    for _ in range(config.layers):
        layers.append(LayerParams(
            wq=_init_adapted(rng, d, d),
            wk=_init_adapted(rng, d, d),
            wv=_init_adapted(rng, d, d),
            wo=_init_adapted(rng, d, d),
            ffn1=_init_adapted(rng, m * d, d),
            ffn2=_init_adapted(rng, d, m * d),
            ln1_gamma=Parameter(np.ones(d)),
            ln1_beta=Parameter(np.zeros(d)),
            ln2_gamma=Parameter(np.ones(d)),
            ln2_beta=Parameter(np.zeros(d)),
        ))
    return EncoderParams(
        layers=layers,
        pos=Parameter(rng.normal(0.0, 0.02, size=(config.max_tokens, d))),
        final_gamma=Parameter(np.ones(d)),
        final_beta=Parameter(np.zeros(d)),
        head=AdaptedLinear(Parameter(np.zeros((2, d))), Parameter(np.zeros(2))),
    )


def reinit_head(params: EncoderParams) -> None:
    """Reset the classification head to zeros (fresh task, unbiased logits)."""
    params.head.base.data = np.zeros_like(params.head.base.data)
    if params.head.bias is not None:
        params.head.bias.data = np.zeros_like(params.head.bias.data)
    params.head.adapters.clear()


def _attention(x: Tensor, layer: LayerParams, config: EncoderConfig,
               attn_sink: list | None) -> Tensor:
    b, n, d = x.shape
    h, dh = config.heads, d // config.heads
    scale = 1.0 / math.sqrt(dh)

    def split(t: Tensor) -> Tensor:
        return t.reshape(b, n, h, dh).swapaxes(1, 2)  # [B, H, n, dh]

    q = split(layer.wq(x))
    k = split(layer.wk(x))
    v = split(layer.wv(x))
    scores = matmul(q, k.swapaxes(-1, -2)) * scale
    probs = softmax_rows(scores)
    if attn_sink is not None:
        attn_sink.append(probs.data.copy())
    ctx = matmul(probs, v).swapaxes(1, 2).reshape(b, n, d)
    return layer.wo(ctx)


def _feed_forward(x: Tensor, layer: LayerParams) -> Tensor:
    return layer.ffn2(gelu(layer.ffn1(x)))


def encode_tokens(tokens: Tensor, params: EncoderParams, config: EncoderConfig,
                  collect_attention: list | None = None) -> Tensor:
    """Core forward over [B, n, d] token batches (or a single [n, d] sequence)."""
    single = tokens.ndim == 2
    x = tokens.reshape(1, *tokens.shape) if single else tokens
    n = x.shape[1]
    if n > config.max_tokens:
        raise ValueError("token count %d exceeds maximum %d" % (n, config.max_tokens))
    x = x + params.pos[:n]
    for layer in params.layers:
        attn_in = layer_norm(x, layer.ln1_gamma, layer.ln1_beta)
        x = x + _attention(attn_in, layer, config, collect_attention)
        ffn_in = layer_norm(x, layer.ln2_gamma, layer.ln2_beta)
        x = x + _feed_forward(ffn_in, layer)
    if params.layers:
        x = layer_norm(x, params.final_gamma, params.final_beta)
    return x[0] if single else x


def encoder_forward(seq: TokenSequence | Tensor, params: EncoderParams,
                    config: EncoderConfig,
                    collect_attention: list | None = None) -> Tensor:
    tokens = seq.tokens if isinstance(seq, TokenSequence) else seq
    return encode_tokens(tokens, params, config, collect_attention)


def classify(hidden: Tensor, head: AdaptedLinear) -> Tensor:
    """Logits from the cls row only: [.., n, d] -> [.., 2]."""
    cls_row = hidden[0] if hidden.ndim == 2 else hidden[:, 0]
    return head(cls_row)


def attach_lora(params: EncoderParams, targets=DEFAULT_LORA_TARGETS,
                r: int = 8, alpha: float = 32.0, seed: int = 0) -> EncoderParams:
    """Attach a fresh (exact no-op) adapter to each named projection per layer.

    Adapter seeds are derived from ``seed`` by layer and slot so two attach
    passes with different seeds create independent factors.
    """
    targets = tuple(targets)
    for name in targets:
        if name not in LORA_TARGETS:
            raise ValueError("unknown target %r; expected subset of %s" % (name, LORA_TARGETS))
    for i, layer in enumerate(params.layers):
        for j, name in enumerate(LORA_TARGETS):
            if name not in targets:
                continue
            proj = layer.projection(name)
            proj.attach(init_adapter(proj.out_features, proj.in_features, r, alpha,
                                     seed=seed + 101 * i + j))
    return params
