"""Dual-branch patch embedding with a gated frequency pathway.

Each 1-second, 200-sample patch is mapped to a d-dimensional token two ways:
a stack of three strided conv blocks over the raw samples (kernels 15/3/3,
strides 8/2/2), and a stack of four conv blocks over the 129-bin amplitude
spectrum (kernels 3/15/3/3, strides 1/4/2/2). Each block is conv -> GELU ->
group norm, every conv uses padding K//2, and both branches mean-pool over
the remaining positions to a d/2 vector. The frequency vector is scaled by a
gate in [0, 1] before the two halves are concatenated and projected to d.

With the gate at exactly 0 the frequency branch is skipped outright: the
fused token is bit-identical to using a zero vector, and no gradient reaches
frequency-branch parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    Parameter,
    Tensor,
    concat,
    conv1d,
    gelu,
    group_norm,
    linear,
    rfft_amplitude,
)

__all__ = [
    "PATCH_SAMPLES",
    "PATCHES_PER_SEGMENT",
    "SPECTRUM_BINS",
    "ConvBlock",
    "StfeParams",
    "TokenSequence",
    "init_stfe",
    "temporal_embed",
    "frequency_embed",
    "selective_fuse",
    "embed_segment",
    "embed_patches",
]

PATCH_SAMPLES = 200          # 1 s at 200 Hz
PATCHES_PER_SEGMENT = 10     # 10 s segment
SPECTRUM_BINS = 129          # 200 samples zero-padded to 256 -> 129 bins

TEMPORAL_KERNELS = (15, 3, 3)
TEMPORAL_STRIDES = (8, 2, 2)
FREQUENCY_KERNELS = (3, 15, 3, 3)
FREQUENCY_STRIDES = (1, 4, 2, 2)


@dataclass
class ConvBlock:
    weight: Parameter  # [Cout, Cin, K]
    bias: Parameter
    gamma: Parameter
    beta: Parameter
    stride: int
    padding: int
    groups: int

    def apply(self, x: Tensor) -> Tensor:
        h = conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
        return group_norm(gelu(h), self.groups, self.gamma, self.beta)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias, self.gamma, self.beta]


@dataclass
class StfeParams:
    temporal: list[ConvBlock]
    frequency: list[ConvBlock]
    fusion_w: Parameter        # [d, d]
    fusion_b: Parameter        # [d]
    cls: Parameter             # [d]
    lambda_f: float = 0.0
    d: int = 64

    def __post_init__(self):
        if not 0.0 <= self.lambda_f <= 1.0:
            raise ValueError("gate must lie in [0, 1], got %r" % (self.lambda_f,))
        kt = tuple(b.weight.shape[2] for b in self.temporal)
        kf = tuple(b.weight.shape[2] for b in self.frequency)
        if kt != TEMPORAL_KERNELS or kf != FREQUENCY_KERNELS:
            raise ValueError("kernel sizes must be %s and %s, got %s and %s"
                             % (TEMPORAL_KERNELS, FREQUENCY_KERNELS, kt, kf))

    def set_gate(self, value: float) -> None:
        if not 0.0 <= value <= 1.0:
            raise ValueError("gate must lie in [0, 1], got %r" % (value,))
        self.lambda_f = float(value)

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for blk in self.temporal + self.frequency:
            out.extend(blk.parameters())
        out.extend([self.fusion_w, self.fusion_b, self.cls])
        return out

    def frequency_parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for blk in self.frequency:
            out.extend(blk.parameters())
        return out

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag


@dataclass
class TokenSequence:
    tokens: Tensor                      # [(1 + M), d], cls at row 0
    provenance: list[tuple[int, int]]   # (channel, patch) per non-cls token

    @property
    def count(self) -> int:
        return self.tokens.shape[0]


def _norm_groups(channels: int) -> int:
    return math.gcd(4, channels)


def _init_block(rng, cin: int, cout: int, kernel: int, stride: int) -> ConvBlock:
    bound = 1.0 / math.sqrt(cin * kernel)
    return ConvBlock(
        weight=Parameter(rng.uniform(-bound, bound, size=(cout, cin, kernel))),
        bias=Parameter(np.zeros(cout)),
        gamma=Parameter(np.ones(cout)),
        beta=Parameter(np.zeros(cout)),
        stride=stride,
        padding=kernel // 2,
        groups=_norm_groups(cout),
    )


def init_stfe(d: int, seed: int, lambda_f: float = 0.0) -> StfeParams:
    """Seeded parameter set for hidden size ``d`` (must be divisible by 4)."""
    if d % 4 != 0:
        raise ValueError("hidden size must be divisible by 4, got %d" % d)
    rng = np.random.default_rng(seed)
    t_widths = (d // 4, d // 2, d // 2)
    f_widths = (d // 4, d // 2, d // 2, d // 2)
    temporal = []
    cin = 1
    for cout, k, s in zip(t_widths, TEMPORAL_KERNELS, TEMPORAL_STRIDES):
        temporal.append(_init_block(rng, cin, cout, k, s))
        cin = cout
    frequency = []
    cin = 1
    for cout, k, s in zip(f_widths, FREQUENCY_KERNELS, FREQUENCY_STRIDES):
        frequency.append(_init_block(rng, cin, cout, k, s))
        cin = cout
    bound = 1.0 / math.sqrt(d)
    return StfeParams(
        temporal=temporal,
        frequency=frequency,
        fusion_w=Parameter(rng.uniform(-bound, bound, size=(d, d))),
        fusion_b=Parameter(np.zeros(d)),
        cls=Parameter(rng.normal(0.0, 0.02, size=d)),
        lambda_f=lambda_f,
        d=d,
    )


def _branch(x: Tensor, blocks: list[ConvBlock]) -> Tensor:
    """Run [N, L] rows through conv blocks and mean-pool to [N, width]."""
    h = x.reshape(x.shape[0], 1, x.shape[1])
    for blk in blocks:
        h = blk.apply(h)
    return h.mean(axis=2)


def _as_rows(patch) -> tuple[Tensor, bool]:
    t = patch if isinstance(patch, Tensor) else Tensor(patch)
    if t.ndim == 1:
        return t.reshape(1, t.shape[0]), True
    if t.ndim == 2:
        return t, False
    raise ValueError("expected a patch [T] or batch [N, T], got %s" % (t.shape,))


def temporal_embed(patch, params: StfeParams) -> Tensor:
    """Raw-sample branch: [T] -> [d/2] (or [N, T] -> [N, d/2])."""
    rows, single = _as_rows(patch)
    if rows.shape[1] != PATCH_SAMPLES:
        raise ValueError("patch length %d != %d samples" % (rows.shape[1], PATCH_SAMPLES))
    out = _branch(rows, params.temporal)
    return out[0] if single else out


def frequency_embed(patch, params: StfeParams) -> Tensor:
    """Amplitude-spectrum branch: [T] -> [d/2] (or [N, T] -> [N, d/2])."""
    rows, single = _as_rows(patch)
    if rows.shape[1] != PATCH_SAMPLES:
        raise ValueError("patch length %d != %d samples" % (rows.shape[1], PATCH_SAMPLES))
    out = _branch(rfft_amplitude(rows), params.frequency)
    return out[0] if single else out


def selective_fuse(z_time: Tensor, z_freq: Tensor, lambda_f: float,
                   fusion_w: Parameter, fusion_b: Parameter) -> Tensor:
    """Concatenate the time half with the gated frequency half, then project."""
    if not 0.0 <= lambda_f <= 1.0:
        raise ValueError("gate must lie in [0, 1], got %r" % (lambda_f,))
    fused = concat([z_time, z_freq * lambda_f], axis=-1)
    return linear(fused, fusion_w, fusion_b)


def embed_patches(patches, params: StfeParams) -> Tensor:
    """Token per patch row: [N, T] -> [N, d], honoring the gate.

    A gate of exactly 0 skips the frequency branch; the result is identical
    (bitwise) to fusing against a zero vector, and frequency parameters stay
    out of the autodiff graph.
    """
    rows, _ = _as_rows(patches)
    z_time = temporal_embed(rows, params)
    if params.lambda_f == 0.0:
        z_freq = Tensor(np.zeros(z_time.shape))
    else:
        z_freq = frequency_embed(rows, params)
    return selective_fuse(z_time, z_freq, params.lambda_f, params.fusion_w, params.fusion_b)


def embed_segment(patches, params: StfeParams) -> TokenSequence:
    """[C, A, T] patch grid -> cls-prefixed token sequence of C*A + 1 rows.

    Tokens are emitted channel-major: all patches of channel 0, then
    channel 1, and so on; the cls embedding sits at row 0.
    """
    x = patches.data if isinstance(patches, Tensor) else np.asarray(patches, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError("expected patches [C, A, T], got shape %s" % (x.shape,))
    c, a, t = x.shape
    if c < 1:
        raise ValueError("need at least one channel")
    if a != PATCHES_PER_SEGMENT or t != PATCH_SAMPLES:
        raise ValueError("expected %d patches of %d samples, got %d of %d"
                         % (PATCHES_PER_SEGMENT, PATCH_SAMPLES, a, t))
    src = patches if isinstance(patches, Tensor) else Tensor(x)
    tokens = embed_patches(src.reshape(c * a, t), params)
    seq = concat([params.cls.reshape(1, params.d), tokens], axis=0)
    provenance = [(ch, p) for ch in range(c) for p in range(a)]
    return TokenSequence(tokens=seq, provenance=provenance)
