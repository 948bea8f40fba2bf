"""Dense float64 numerics: 2-D convolution, singular values, Gaussian kernels,
nearest-neighbour upsampling, and reproducible counter-based random streams.

Everything operates on plain ``numpy.ndarray`` tensors in float64, row-major.
All public operations are pure functions and raise :class:`ContractViolation`
when a documented precondition is broken.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ContractViolation(ValueError):
    """A documented precondition or shape contract was violated."""


def as_tensor(data) -> np.ndarray:
    """Coerce ``data`` to a contiguous float64 array."""
    return np.ascontiguousarray(np.asarray(data, dtype=np.float64))


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{what} contains non-finite values")
    return arr


@dataclass(frozen=True)
class ConvKernel:
    """4-D convolution weights of shape [out_channels, in_channels, kh, kw].

    kh and kw must be odd so that "same" zero padding is symmetric.
    """

    weights: np.ndarray

    def __post_init__(self):
        w = as_tensor(self.weights)
        if w.ndim != 4:
            raise ContractViolation(f"kernel weights must be 4-D, got shape {w.shape}")
        if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
            raise ContractViolation(f"kernel spatial dims must be odd, got {w.shape[2]}x{w.shape[3]}")
        object.__setattr__(self, "weights", w)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kh(self) -> int:
        return self.weights.shape[2]

    @property
    def kw(self) -> int:
        return self.weights.shape[3]


def im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Unfold a [C,H,W] tensor into patch columns [C*kh*kw, H*W] under
    symmetric zero "same" padding.

    Column p = y*W + x holds the receptive field of output pixel (y, x), so
    a convolution is ``weights.reshape(C_out, -1) @ im2col(x, kh, kw)``.
    """
    c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xpad = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    xpad[:, ph:ph + h, pw:pw + w] = x
    cols = np.empty((c, kh, kw, h, w), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            cols[:, u, v] = xpad[:, u:u + h, v:v + w]
    return cols.reshape(c * kh * kw, h * w)


def conv2d(x: np.ndarray, kernel: ConvKernel, stride: int = 1) -> np.ndarray:
    """Multi-channel 2-D cross-correlation with zero "same" padding.

    Input [C_in,H,W] -> output [C_out,H,W]; linear in both arguments.
    Only stride 1 is supported (strided convolution is out of scope).
    """
    x = as_tensor(x)
    if stride != 1:
        raise ContractViolation(f"only stride 1 is supported, got stride={stride}")
    if x.ndim != 3:
        raise ContractViolation(f"conv2d input must be [C,H,W], got shape {x.shape}")
    if x.shape[0] != kernel.in_channels:
        raise ContractViolation(
            f"input has {x.shape[0]} channels but kernel expects {kernel.in_channels}"
        )
    _, h, w = x.shape
    cols = im2col(x, kernel.kh, kernel.kw)
    out = kernel.weights.reshape(kernel.out_channels, -1) @ cols
    return check_finite(out.reshape(kernel.out_channels, h, w), "conv2d output")


def conv2d_input_grad(grad_out: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """Gradient of conv2d w.r.t. its input: correlation of the upstream
    gradient with the 180-degree-rotated, channel-transposed kernel."""
    flipped = kernel.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    return conv2d(grad_out, ConvKernel(flipped))


def conv2d_kernel_grad(x: np.ndarray, grad_out: np.ndarray, kh: int, kw: int,
                       cols: np.ndarray | None = None) -> np.ndarray:
    """Gradient of conv2d w.r.t. the kernel, shape [C_out, C_in, kh, kw].

    ``cols`` may pass a cached ``im2col(x, kh, kw)`` to avoid recomputation.
    """
    c_in = x.shape[0]
    c_out, h, w = grad_out.shape
    if cols is None:
        cols = im2col(x, kh, kw)
    g = grad_out.reshape(c_out, h * w) @ cols.T
    return g.reshape(c_out, c_in, kh, kw)


def im2col_batched(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Batched :func:`im2col`: [N,C,H,W] -> [N, C*kh*kw, H*W]."""
    n, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xpad = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    xpad[:, :, ph:ph + h, pw:pw + w] = x
    cols = np.empty((n, c, kh, kw, h, w), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xpad[:, :, u:u + h, v:v + w]
    return cols.reshape(n, c * kh * kw, h * w)


def conv2d_batched(x: np.ndarray, kernel: ConvKernel,
                   cols: np.ndarray | None = None) -> np.ndarray:
    """Same-padded cross-correlation on a batch: [N,C_in,H,W] -> [N,C_out,H,W]."""
    if x.shape[1] != kernel.in_channels:
        raise ContractViolation(
            f"input has {x.shape[1]} channels but kernel expects {kernel.in_channels}"
        )
    n, _, h, w = x.shape
    if cols is None:
        cols = im2col_batched(x, kernel.kh, kernel.kw)
    out = np.matmul(kernel.weights.reshape(kernel.out_channels, -1), cols)
    return out.reshape(n, kernel.out_channels, h, w)


def conv2d_batched_input_grad(grad_out: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """Batched gradient of conv2d_batched w.r.t. its input."""
    flipped = kernel.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    return conv2d_batched(grad_out, ConvKernel(np.ascontiguousarray(flipped)))


def conv2d_batched_kernel_grad(grad_out: np.ndarray, cols: np.ndarray,
                               c_in: int, kh: int, kw: int) -> np.ndarray:
    """Batched gradient of conv2d_batched w.r.t. the kernel (summed over batch)."""
    n, c_out, h, w = grad_out.shape
    g = np.matmul(grad_out.reshape(n, c_out, h * w), cols.transpose(0, 2, 1)).sum(axis=0)
    return g.reshape(c_out, c_in, kh, kw)


def conv2d_naive(x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """Direct quadruple-loop reference convolution. Slow; used as an oracle."""
    c_in, h, w = x.shape
    c_out, kh, kw = kernel.out_channels, kernel.kh, kernel.kw
    ph, pw = kh // 2, kw // 2
    out = np.zeros((c_out, h, w), dtype=np.float64)
    for o in range(c_out):
        for y in range(h):
            for xx in range(w):
                acc = 0.0
                for c in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            yy, xv = y + u - ph, xx + v - pw
                            if 0 <= yy < h and 0 <= xv < w:
                                acc += kernel.weights[o, c, u, v] * x[c, yy, xv]
                out[o, y, xx] = acc
    return out


def singular_values(m: np.ndarray) -> np.ndarray:
    """Singular values of a 2-D matrix, sorted descending."""
    m = as_tensor(m)
    if m.ndim != 2:
        raise ContractViolation(f"singular_values requires a 2-D matrix, got shape {m.shape}")
    return np.linalg.svd(m, compute_uv=False)


def gaussian_kernel(k: int, sigma: float) -> np.ndarray:
    """Discrete K x K Gaussian low-pass kernel, renormalized to sum to one.

    Taps are exp(-(u^2+v^2)/(2 sigma^2)) on the centered integer grid; the
    continuous 1/(2 pi sigma^2) normalizer cancels in the renormalization,
    which guarantees constant signals are preserved exactly.
    """
    if k % 2 == 0 or k < 1:
        raise ContractViolation(f"kernel size must be odd and >= 1, got {k}")
    if sigma <= 0:
        raise ContractViolation(f"sigma must be > 0, got {sigma}")
    half = k // 2
    u = np.arange(-half, half + 1, dtype=np.float64)
    g1 = np.exp(-(u ** 2) / (2.0 * sigma ** 2))
    g = np.outer(g1, g1)
    return g / g.sum()


def upsample_nearest(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour (block replication) upsampling of [C,h,w] to [C,H,W].

    Target dims must be integer multiples of the source dims.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ContractViolation(f"upsample input must be [C,h,w], got shape {x.shape}")
    _, h, w = x.shape
    if out_h < h or out_w < w or out_h % h != 0 or out_w % w != 0:
        raise ContractViolation(
            f"target {out_h}x{out_w} must be an integer multiple of source {h}x{w}"
        )
    return np.repeat(np.repeat(x, out_h // h, axis=1), out_w // w, axis=2)


def upsample_nearest_grad(grad_out: np.ndarray, h: int, w: int) -> np.ndarray:
    """Adjoint of nearest upsampling: sum each replication block."""
    c, out_h, out_w = grad_out.shape
    fh, fw = out_h // h, out_w // w
    return grad_out.reshape(c, h, fh, w, fw).sum(axis=(2, 4))


def downsample_mean(x: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool [C,H,W] over non-overlapping factor x factor blocks."""
    if factor == 1:
        return x
    c, h, w = x.shape
    if h % factor != 0 or w % factor != 0:
        raise ContractViolation(f"spatial dims {h}x{w} not divisible by factor {factor}")
    return x.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def downsample_mean_grad(grad_out: np.ndarray, factor: int) -> np.ndarray:
    """Adjoint of mean pooling: spread gradient uniformly over each block."""
    if factor == 1:
        return grad_out
    scaled = grad_out / float(factor * factor)
    return np.repeat(np.repeat(scaled, factor, axis=1), factor, axis=2)


def upsample_nearest_batched(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Batched nearest upsampling: [N,C,h,w] -> [N,C,H,W]."""
    _, _, h, w = x.shape
    return np.repeat(np.repeat(x, out_h // h, axis=2), out_w // w, axis=3)


def upsample_nearest_batched_grad(grad_out: np.ndarray, h: int, w: int) -> np.ndarray:
    n, c, out_h, out_w = grad_out.shape
    fh, fw = out_h // h, out_w // w
    return grad_out.reshape(n, c, h, fh, w, fw).sum(axis=(3, 5))


def downsample_mean_batched(x: np.ndarray, factor: int) -> np.ndarray:
    """Batched average pooling over factor x factor blocks."""
    if factor == 1:
        return x
    n, c, h, w = x.shape
    return x.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


def downsample_mean_batched_grad(grad_out: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return grad_out
    scaled = grad_out / float(factor * factor)
    return np.repeat(np.repeat(scaled, factor, axis=2), factor, axis=3)


@dataclass
class RandomStream:
    """Counter-based deterministic random stream keyed by (seed, stream_id).

    Backed by the Philox 4x64 generator, whose 128-bit key is exactly the
    (seed, stream_id) pair, so identical keys reproduce bit-identical
    sequences on any platform and distinct stream_ids give statistically
    independent streams. Instances are single-owner: obtain parallelism by
    deriving substreams, never by sharing one stream.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        key = np.array([self.seed % (1 << 64), self.stream_id % (1 << 64)], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def substream(self, k: int) -> "RandomStream":
        """Derive an independent stream; deterministic in (self, k)."""
        mixed = (self.stream_id * 0x9E3779B97F4A7C15 + k + 1) % (1 << 64)
        return RandomStream(self.seed, mixed)

    def normal(self, shape, sigma: float = 1.0) -> np.ndarray:
        if sigma <= 0:
            raise ContractViolation(f"sigma must be > 0, got {sigma}")
        return sigma * self._gen.standard_normal(size=shape, dtype=np.float64)

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def sample_gaussian(stream: RandomStream, shape, sigma: float) -> np.ndarray:
    """Draw i.i.d. N(0, sigma^2) entries; deterministic in (stream, call order)."""
    return stream.normal(shape, sigma)
