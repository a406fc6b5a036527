"""Differentiable numeric core.

All values are 64-bit floats in row-major numpy arrays. Operations are pure
functions: inputs are never mutated, and each op returns a ``Tensor`` whose
``_backward`` closure scatters gradients to its parents. ``Tensor.backward``
runs a reverse topological sweep over the recorded graph. Every backward rule
in this module is validated against central finite differences (see
``finite_diff_check``).

Conventions pinned here so results are reproducible bit-for-bit:
  * GELU uses the exact erf form, x * Phi(x), not the tanh approximation.
  * ``rfft_amplitude`` zero-pads to the next power of two and returns the raw
    modulus of the unnormalized forward DFT (bins 0..N/2).
  * group/layer normalization use biased variance and a caller-supplied eps.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "Parameter",
    "GradientCheckError",
    "no_grad",
    "matmul",
    "linear",
    "conv1d",
    "gelu",
    "group_norm",
    "layer_norm",
    "rfft_amplitude",
    "softmax_rows",
    "cross_entropy",
    "concat",
    "finite_diff_check",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block; forward values are unchanged."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """Dense float64 array with optional reverse-mode gradient tracking."""

    __slots__ = ("data", "grad", "_requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._requires_grad = bool(requires_grad)
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same values, cut off from the graph."""
        return Tensor(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output, got shape %s" % (self.shape,))
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, key):
        return _getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return _reduce(self, axis, keepdims, mean=False)

    def mean(self, axis=None, keepdims: bool = False):
        return _reduce(self, axis, keepdims, mean=True)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return _swapaxes(self, a, b)


class Parameter(Tensor):
    """Model weight: a Tensor plus a ``trainable`` flag honored by optimizers."""

    __slots__ = ("trainable",)

    def __init__(self, data, trainable: bool = True):
        super().__init__(data)
        self.data = np.ascontiguousarray(self.data)
        self.trainable = bool(trainable)

    @property
    def requires_grad(self) -> bool:
        return self.trainable

    def __repr__(self) -> str:
        return f"Parameter(shape={self.data.shape}, trainable={self.trainable})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result; record the graph only when it can matter."""
    live = tuple(p for p in parents if p.requires_grad)
    out = Tensor(data)
    if _grad_enabled and live:
        out._requires_grad = True
        out._parents = live
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise and shape ops -----------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return _node(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        a._accum(_unbroadcast(g * b.data, a.shape))
        b._accum(_unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s

    def backward(g):
        a._accum(g * s)

    return _node(out, (a,), backward)


def _reduce(a: Tensor, axis, keepdims: bool, mean: bool) -> Tensor:
    if mean:
        out = a.data.mean(axis=axis, keepdims=keepdims)
    else:
        out = a.data.sum(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else int(np.prod([a.data.shape[ax] for ax in np.atleast_1d(axis)]))

    def backward(g):
        gg = np.asarray(g)
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        grad = np.broadcast_to(gg, a.shape)
        a._accum(grad / count if mean else grad.copy())

    return _node(out, (a,), backward)


def _reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        a._accum(g.reshape(a.shape))

    return _node(out, (a,), backward)


def _swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = np.swapaxes(a.data, ax1, ax2)

    def backward(g):
        a._accum(np.swapaxes(g, ax1, ax2))

    return _node(out, (a,), backward)


def _getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, key, g)
        a._accum(buf)

    return _node(out, (a,), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            p._accum(g[tuple(idx)])

    return _node(out, tuple(parts), backward)


# -- linear algebra ----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects >=2-d operands, got %s and %s" % (a.shape, b.shape))
    out = a.data @ b.data

    def backward(g):
        a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the trailing axis: x[..., k] @ weight[d, k].T (+ bias[d])."""
    x = _as_tensor(x)
    d, k = weight.shape
    if x.shape[-1] != k:
        raise ValueError(
            "linear: trailing input dim %d does not match weight k=%d" % (x.shape[-1], k)
        )
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (d,):
            raise ValueError("linear: bias shape %s, expected (%d,)" % (bias.shape, d))
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, d)
        x2 = x.data.reshape(-1, k)
        x._accum((g2 @ weight.data).reshape(x.shape))
        weight._accum(g2.T @ x2)
        if bias is not None:
            bias._accum(g2.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward)


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Strided cross-correlation along the last axis.

    ``x`` is [Cin, L] or [N, Cin, L]; ``kernel`` is [Cout, Cin, K]; output has
    Lout = floor((L + 2*padding - K)/stride) + 1 positions.
    """
    x = _as_tensor(x)
    squeeze = x.ndim == 2
    if x.ndim not in (2, 3):
        raise ValueError("conv1d: input must be [Cin, L] or [N, Cin, L], got %s" % (x.shape,))
    if kernel.ndim != 3:
        raise ValueError("conv1d: kernel must be [Cout, Cin, K], got %s" % (kernel.shape,))
    if stride < 1 or padding < 0:
        raise ValueError("conv1d: stride must be >=1 and padding >=0")
    xb = x.data[None] if squeeze else x.data
    n, cin, length = xb.shape
    cout, kc, ksize = kernel.shape
    if kc != cin:
        raise ValueError(
            "conv1d: kernel expects %d input channels, input has %d" % (kc, cin)
        )
    if ksize > length + 2 * padding:
        raise ValueError(
            "conv1d: kernel size %d exceeds padded length %d" % (ksize, length + 2 * padding)
        )
    lout = (length + 2 * padding - ksize) // stride + 1
    if lout < 1:
        raise ValueError("conv1d: empty output (L=%d, K=%d, stride=%d)" % (length, ksize, stride))
    if bias is not None and bias.shape != (cout,):
        raise ValueError("conv1d: bias shape %s, expected (%d,)" % (bias.shape, cout))

    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding))) if padding else xb
    # One GEMM per tap keeps memory flat; taps are few (K <= 15 here).
    acc = np.zeros((n, lout, cout))
    for k in range(ksize):
        seg = xp[:, :, k:k + stride * lout:stride]
        acc += np.swapaxes(seg, 1, 2) @ kernel.data[:, :, k].T
    out = np.swapaxes(acc, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None]
    if squeeze:
        out = out[0]

    def backward(g):
        gb = g[None] if squeeze else g
        g_nlo = np.swapaxes(gb, 1, 2)
        g2 = g_nlo.reshape(-1, cout)
        dxp = np.zeros((n, cin, length + 2 * padding))
        dker = np.zeros_like(kernel.data)
        for k in range(ksize):
            seg2 = np.swapaxes(xp[:, :, k:k + stride * lout:stride], 1, 2).reshape(-1, cin)
            dker[:, :, k] = g2.T @ seg2
            dseg = (g2 @ kernel.data[:, :, k]).reshape(n, lout, cin)
            dxp[:, :, k:k + stride * lout:stride] += np.swapaxes(dseg, 1, 2)
        dx = dxp[:, :, padding:padding + length] if padding else dxp
        x._accum(dx[0] if squeeze else dx)
        kernel._accum(dker)
        if bias is not None:
            bias._accum(g2.sum(axis=0))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out, parents, backward)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x) with Phi the standard normal CDF."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + _erf(x.data / _SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        x._accum(g * (cdf + x.data * pdf))

    return _node(out, (x,), backward)


def _moments_norm(xg: np.ndarray, eps: float):
    mean = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return (xg - mean) * inv, inv


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalize over (channel, position) within each channel group, then
    apply a per-channel affine. ``x`` is [C, L] or [N, C, L]."""
    x = _as_tensor(x)
    squeeze = x.ndim == 2
    xb = x.data[None] if squeeze else x.data
    n, c, length = xb.shape
    if groups < 1 or c % groups != 0:
        raise ValueError("group_norm: %d channels not divisible by %d groups" % (c, groups))
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError("group_norm: affine params must have shape (%d,)" % c)
    xg = xb.reshape(n, groups, (c // groups) * length)
    xhat_g, inv = _moments_norm(xg, eps)
    xhat = xhat_g.reshape(n, c, length)
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]
    if squeeze:
        out = out[0]

    def backward(g):
        gb = g[None] if squeeze else g
        gamma._accum((gb * xhat).sum(axis=(0, 2)))
        beta._accum(gb.sum(axis=(0, 2)))
        dxhat = (gb * gamma.data[None, :, None]).reshape(n, groups, -1)
        xh = xhat_g
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xh).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xh * m2)
        dx = dx.reshape(n, c, length)
        x._accum(dx[0] if squeeze else dx)

    return _node(out, (x, gamma, beta), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing axis with a per-feature affine."""
    x = _as_tensor(x)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError("layer_norm: affine params must have shape (%d,)" % d)
    xhat, inv = _moments_norm(x.data, eps)
    out = gamma.data * xhat + beta.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        gamma._accum((g * xhat).sum(axis=red))
        beta._accum(g.sum(axis=red))
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        x._accum(inv * (dxhat - m1 - xhat * m2))

    return _node(out, (x, gamma, beta), backward)


# -- spectra -----------------------------------------------------------

_FFT_PLANS: dict[int, tuple[np.ndarray, list[np.ndarray]]] = {}


def _fft_plan(n: int) -> tuple[np.ndarray, list[np.ndarray]]:
    plan = _FFT_PLANS.get(n)
    if plan is None:
        bits = n.bit_length() - 1
        idx = np.arange(n)
        rev = np.zeros(n, dtype=np.intp)
        for b in range(bits):
            rev = (rev << 1) | ((idx >> b) & 1)
        twiddles = []
        size = 2
        while size <= n:
            half = size // 2
            twiddles.append(np.exp(-2j * np.pi * np.arange(half) / size))
            size *= 2
        plan = (rev, twiddles)
        _FFT_PLANS[n] = plan
    return plan


def fft_radix2(x: np.ndarray) -> np.ndarray:
    """Unnormalized forward DFT over the last axis; length must be a power of two.

    Iterative decimation-in-time Cooley-Tukey, vectorized over leading axes.
    """
    n = x.shape[-1]
    if n < 1 or n & (n - 1):
        raise ValueError("fft_radix2: length %d is not a power of two" % n)
    rev, twiddles = _fft_plan(n)
    y = np.asarray(x, dtype=np.complex128)[..., rev]
    size = 2
    for tw in twiddles:
        half = size // 2
        v = y.reshape(y.shape[:-1] + (n // size, size))
        even = v[..., :half]
        odd = v[..., half:] * tw
        y = np.concatenate([even + odd, even - odd], axis=-1).reshape(y.shape)
        size *= 2
    return y


def next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def rfft_amplitude(x: Tensor) -> Tensor:
    """Amplitude spectrum |X[k]| for k = 0..N/2 of the zero-padded input.

    N is the next power of two >= len(x); the DFT is unnormalized and no
    window is applied. ``x`` is [L] or [N, L] (batched over the first axis).
    """
    x = _as_tensor(x)
    length = x.shape[-1]
    if length < 2:
        raise ValueError("rfft_amplitude: need at least 2 samples, got %d" % length)
    n = next_pow2(length)
    nbins = n // 2 + 1
    if n == length:
        xp = x.data
    else:
        pad = [(0, 0)] * (x.ndim - 1) + [(0, n - length)]
        xp = np.pad(x.data, pad)
    spec = fft_radix2(xp)
    bins = spec[..., :nbins]
    amp = np.abs(bins)

    def backward(g):
        # d|X_k|/dx_n = Re(conj(X_k) e^{-2pi i kn/N}) / |X_k|; summing over the
        # retained bins is itself a forward DFT of the weighted spectrum.
        u = np.zeros_like(bins)
        np.divide(g * np.conj(bins), amp, out=u, where=amp > 0)
        v = np.zeros(g.shape[:-1] + (n,), dtype=np.complex128)
        v[..., :nbins] = u
        gx = fft_radix2(v).real
        x._accum(gx[..., :length])

    return _node(amp, (x,), backward)


# -- classifier-side ops -----------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Row-stable softmax over the trailing axis; rows sum to 1."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        x._accum(out * (g - inner))

    return _node(out, (x,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` [N, K]."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError("cross_entropy: logits must be [N, K], got %s" % (logits.shape,))
    y = np.asarray(labels, dtype=np.intp)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = -logp[np.arange(n), y].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), y] -= 1.0
        logits._accum(g * p / n)

    return _node(out, (logits,), backward)


# -- gradient checking ---------------------------------------------------


class GradientCheckError(ValueError):
    """Raised when a checked computation produces non-finite values."""


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter] | Mapping[str, Parameter],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a zero-argument callable returning a scalar Tensor built from
    ``params``. Each parameter coordinate is perturbed by +/- eps in place and
    the analytic gradient from one backward pass is compared against
    (f(p+eps) - f(p-eps)) / (2 eps) using |analytic - fd| / max(1, |fd|).
    ``max_coords`` caps the number of coordinates sampled per parameter
    (None checks all of them).
    """
    if isinstance(params, Mapping):
        named = list(params.items())
    else:
        named = [(f"param{i}", p) for i, p in enumerate(params)]

    for _, p in named:
        p.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise GradientCheckError("finite_diff_check: f() returned a non-finite value")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for _, p in named]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for (name, p), g in zip(named, analytic):
            flat = p.data.ravel()
            if flat.base is None and p.data.ndim > 1:  # pragma: no cover - params are contiguous
                raise ValueError("finite_diff_check: parameter %r is not contiguous" % name)
            n = flat.size
            if max_coords is None or n <= max_coords:
                coords = range(n)
            else:
                coords = rng.choice(n, size=max_coords, replace=False)
            gflat = g.ravel()
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(f().data)
                flat[i] = orig - eps
                lo = float(f().data)
                flat[i] = orig
                if not (math.isfinite(hi) and math.isfinite(lo)):
                    raise GradientCheckError(
                        "finite_diff_check: non-finite value at %s[%d]" % (name, i)
                    )
                fd = (hi - lo) / (2.0 * eps)
                err = abs(gflat[i] - fd) / max(1.0, abs(fd))
                if err > worst:
                    worst = err
    return worst
