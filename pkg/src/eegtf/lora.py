"""Low-rank adapter algebra for frozen linear layers.

An adapter is a pair (B, A_lo) of rank-r factors whose scaled product
``(alpha/r) * B @ A_lo`` is added to a frozen base matrix at forward time.
Merging folds that product into the base so the function computed is
unchanged; a fresh adapter can then be stacked on top for the next training
stage. B starts at zero, so a newly attached adapter is an exact no-op.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Parameter, Tensor, linear

__all__ = [
    "LoraAdapter",
    "AdaptedLinear",
    "MergeRecord",
    "init_adapter",
    "lora_forward",
    "merge_adapter",
    "count_trainable",
]


class LoraAdapter:
    """Rank-r delta B @ A_lo attached to one d x k base matrix."""

    def __init__(self, B: Parameter, A_lo: Parameter, rank: int, alpha: float):
        d, r = B.shape
        r2, k = A_lo.shape
        if r != rank or r2 != rank:
            raise ValueError("adapter factors disagree with rank %d: B %s, A_lo %s"
                             % (rank, B.shape, A_lo.shape))
        if rank > min(d, k):
            raise ValueError("rank %d exceeds min(d, k) = %d" % (rank, min(d, k)))
        self.B = B
        self.A_lo = A_lo
        self.rank = rank
        self.alpha = float(alpha)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        """Densified contribution, for merging and for oracle tests."""
        return self.scaling * (self.B.data @ self.A_lo.data)


def init_adapter(d: int, k: int, r: int, alpha: float, seed: int) -> LoraAdapter:
    """Fresh adapter: B = 0 exactly, A_lo ~ N(0, 0.02) from the given seed."""
    if r < 1 or r > min(d, k):
        raise ValueError("rank %d exceeds min(d, k) = %d" % (r, min(d, k)))
    rng = np.random.default_rng(seed)
    b = Parameter(np.zeros((d, r)))
    a = Parameter(rng.normal(0.0, 0.02, size=(r, k)))
    return LoraAdapter(b, a, r, alpha)


@dataclass
class MergeRecord:
    stage: str
    rank: int
    alpha: float


@dataclass
class AdaptedLinear:
    """Linear layer with a (possibly frozen) base and stacked low-rank adapters."""

    base: Parameter
    bias: Parameter | None = None
    adapters: list[LoraAdapter] = field(default_factory=list)
    merge_log: list[MergeRecord] = field(default_factory=list)

    @property
    def out_features(self) -> int:
        return self.base.shape[0]

    @property
    def in_features(self) -> int:
        return self.base.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        out = linear(x, self.base, self.bias)
        for ad in self.adapters:
            out = out + linear(linear(x, ad.A_lo), ad.B) * ad.scaling
        return out

    __call__ = forward

    def attach(self, adapter: LoraAdapter) -> None:
        if adapter.A_lo.shape[1] != self.in_features or adapter.B.shape[0] != self.out_features:
            raise ValueError("adapter %sx%s does not fit layer %sx%s"
                             % (adapter.B.shape[0], adapter.A_lo.shape[1],
                                self.out_features, self.in_features))
        self.adapters.append(adapter)

    def merge(self, which: int = 0, stage: str = "") -> "AdaptedLinear":
        """Fold adapter ``which`` into the base; the forward map is unchanged."""
        if not 0 <= which < len(self.adapters):
            raise IndexError("no adapter at index %d (have %d)" % (which, len(self.adapters)))
        ad = self.adapters.pop(which)
        self.base.data = self.base.data + ad.delta()
        self.merge_log.append(MergeRecord(stage, ad.rank, ad.alpha))
        return self

    def merge_all(self, stage: str = "") -> "AdaptedLinear":
        while self.adapters:
            self.merge(0, stage)
        return self

    def parameters(self) -> list[Parameter]:
        out = [self.base]
        if self.bias is not None:
            out.append(self.bias)
        for ad in self.adapters:
            out.extend([ad.B, ad.A_lo])
        return out


def lora_forward(layer: AdaptedLinear, x: Tensor) -> Tensor:
    return layer.forward(x)


def merge_adapter(layer: AdaptedLinear, which: int = 0, stage: str = "") -> AdaptedLinear:
    return layer.merge(which, stage)


def count_trainable(params) -> tuple[int, int]:
    """(trainable scalar count, total scalar count) over a parameter collection.

    Accepts anything with ``named_parameters()``/``parameters()`` or an
    iterable of Parameters (a mapping iterates over its values).
    """
    if hasattr(params, "named_parameters"):
        items = list(params.named_parameters().values())
    elif hasattr(params, "parameters"):
        items = list(params.parameters())
    elif hasattr(params, "values"):
        items = list(params.values())
    else:
        items = list(params)
    trainable = sum(p.size for p in items if p.trainable)
    total = sum(p.size for p in items)
    return trainable, total
