"""Low-rank adapter machinery: AWB kernel fusion, sinusoidal frequency
modulation, Gaussian smoothing of modulated kernels, the clock net that maps
task tokens to bounded frequencies, and analytic backward passes for each.

The central object is the fused kernel M = B W A^T (per spatial offset): a
channel-reduce / spatial-conv / channel-expand pipeline collapsed into one
convolution. A task-specific kernel is obtained by the elementwise map
sin(omega * M) followed by an optional Gaussian low-pass over the kernel's
flattened matrix view.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    ContractViolation,
    ConvKernel,
    as_tensor,
    conv2d,
    gaussian_kernel,
)


@dataclass(frozen=True)
class LowRankFactors:
    """Thin factor pair A [m,r], B [n,r] with r <= min(m, n)."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a, b = as_tensor(self.a), as_tensor(self.b)
        if a.ndim != 2 or b.ndim != 2:
            raise ContractViolation(f"factors must be 2-D, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[1]:
            raise ContractViolation(f"rank mismatch: A has r={a.shape[1]}, B has r={b.shape[1]}")
        if a.shape[1] > min(a.shape[0], b.shape[0]):
            raise ContractViolation(
                f"rank {a.shape[1]} exceeds min(m={a.shape[0]}, n={b.shape[0]})"
            )
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def m(self) -> int:
        return self.a.shape[0]

    @property
    def n(self) -> int:
        return self.b.shape[0]

    @property
    def r(self) -> int:
        return self.a.shape[1]


@dataclass(frozen=True)
class MidKernel:
    """Spatial convolution weights [r, r, kw, kw] acting on the r rank channels."""

    w: np.ndarray

    def __post_init__(self):
        w = as_tensor(self.w)
        if w.ndim != 4 or w.shape[0] != w.shape[1]:
            raise ContractViolation(f"mid kernel must be [r,r,k,k], got shape {w.shape}")
        if w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
            raise ContractViolation(f"mid kernel spatial size must be odd square, got {w.shape[2:]}")
        object.__setattr__(self, "w", w)

    @property
    def r(self) -> int:
        return self.w.shape[0]

    @property
    def kw(self) -> int:
        return self.w.shape[2]


@dataclass(frozen=True)
class FusedKernel:
    """The shared base kernel in two views.

    ``kernel4d`` is a ConvKernel [n, m, kw, kw] mapping m input channels to n
    output channels. ``matrix_view`` is the [m, n*kw*kw] flattening under the
    fixed bijection matrix_view[c, o*kw*kw + u*kw + v] == kernel4d[o, c, u, v];
    both views hold the same values.
    """

    kernel4d: ConvKernel
    matrix_view: np.ndarray


def kernel4d_to_matrix_view(weights: np.ndarray) -> np.ndarray:
    """Flatten [n,m,kw,kw] kernel weights to the [m, n*kw*kw] matrix view."""
    n, m, kh, kw = weights.shape
    return weights.transpose(1, 0, 2, 3).reshape(m, n * kh * kw)


def matrix_view_to_kernel4d(view: np.ndarray, n: int, kw: int) -> np.ndarray:
    """Inverse of :func:`kernel4d_to_matrix_view`."""
    m = view.shape[0]
    return view.reshape(m, n, kw, kw).transpose(1, 0, 2, 3)


@dataclass
class ClockNetParams:
    """Parameters of the task-to-frequency translator.

    omega = s * (tanh(w_q @ relu(token)) + c). The tanh keeps every produced
    frequency strictly inside (s*(c-1), s*(c+1)); s must be nonzero or the
    frequency range degenerates to a point.
    """

    w_q: np.ndarray
    s: float
    c: float

    def __post_init__(self):
        w_q = as_tensor(self.w_q)
        if w_q.ndim != 2 or w_q.shape[0] != 1:
            raise ContractViolation(f"w_q must be [1, C], got shape {w_q.shape}")
        if self.s == 0.0:
            raise ContractViolation("scale s must be nonzero (frozen-frequency regime rejected)")
        self.w_q = w_q
        self.s = float(self.s)
        self.c = float(self.c)

    @property
    def token_dim(self) -> int:
        return self.w_q.shape[1]


@dataclass
class TaskToken:
    """Learnable per-task identity vector fed to the clock net."""

    values: np.ndarray
    task_id: int

    def __post_init__(self):
        v = as_tensor(self.values)
        if v.ndim != 1:
            raise ContractViolation(f"task token must be 1-D, got shape {v.shape}")
        self.values = v


@dataclass(frozen=True)
class ModulatedKernel:
    """A task-specific kernel with its modulation provenance.

    ``omega`` is the frequency that produced it; ``filter_spec`` is the
    (K, sigma) of the Gaussian low-pass applied afterwards, or None. Without
    a filter, sine-modulated kernels lie entirely in [-1, 1]; the linear
    scaling ablation path is exempt from that range.
    """

    kernel: ConvKernel
    omega: float
    filter_spec: tuple[int, float] | None = None

    @property
    def matrix_view(self) -> np.ndarray:
        return kernel4d_to_matrix_view(self.kernel.weights)


def fuse_awb(f: LowRankFactors, w: MidKernel) -> FusedKernel:
    """Fuse reduce/conv/expand factors into one kernel.

    Per spatial offset (u, v): kernel4d[:, :, u, v] = B @ W[:, :, u, v] @ A^T,
    an n x m matrix, so conv2d with the fused kernel equals the three-stage
    pipeline exactly (convolution is linear). Trainable parameters behind the
    fused kernel: m*r + n*r + r^2*kw^2.
    """
    if w.r != f.r:
        raise ContractViolation(f"rank mismatch: factors have r={f.r}, mid kernel has r={w.r}")
    wa = np.tensordot(w.w, f.a, axes=([1], [1]))        # [r, kw, kw, m]
    k4 = np.tensordot(f.b, wa, axes=([1], [0]))         # [n, kw, kw, m]
    k4 = np.ascontiguousarray(k4.transpose(0, 3, 1, 2))
    return FusedKernel(ConvKernel(k4), kernel4d_to_matrix_view(k4))


def pipeline_apply(f: LowRankFactors, w: MidKernel, x: np.ndarray) -> np.ndarray:
    """Reference three-stage path: per-pixel A^T projection (m -> r channels),
    spatial convolution by W, per-pixel expansion by B (r -> n channels).

    Serves as the ground-truth oracle for :func:`fuse_awb`.
    """
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[0] != f.m:
        raise ContractViolation(f"input has shape {x.shape}, expected [{f.m}, H, W]")
    z = np.einsum("mj,mhw->jhw", f.a, x)
    mid = conv2d(z, ConvKernel(w.w))
    return np.einsum("ni,ihw->nhw", f.b, mid)


def sine_modulate(base: FusedKernel, omega: float) -> ModulatedKernel:
    """Elementwise sin(omega * entry); output entries lie in [-1, 1]."""
    return ModulatedKernel(ConvKernel(np.sin(omega * base.kernel4d.weights)), float(omega))


def linear_scale(base: FusedKernel, omega: float) -> ModulatedKernel:
    """Elementwise omega * entry: the sine-free ablation/baseline path.

    All linear scalings of one base are perfectly correlated (they lie in the
    same one-dimensional subspace), which is exactly what the sine map avoids.
    """
    return ModulatedKernel(ConvKernel(omega * base.kernel4d.weights), float(omega))


_GAUSS_CACHE: dict[tuple[int, float], ConvKernel] = {}


def _gauss_filter_kernel(k: int, sigma: float) -> ConvKernel:
    key = (k, float(sigma))
    if key not in _GAUSS_CACHE:
        _GAUSS_CACHE[key] = ConvKernel(gaussian_kernel(k, sigma)[np.newaxis, np.newaxis])
    return _GAUSS_CACHE[key]


def gauss_filter_grid(grid: np.ndarray, k: int, sigma: float) -> np.ndarray:
    """Same-padded 2-D Gaussian filtering of an arbitrary [rows, cols] grid."""
    out = conv2d(grid[np.newaxis], _gauss_filter_kernel(k, sigma))
    return out[0]


def lowpass_filter(mk: ModulatedKernel, k: int, sigma: float) -> ModulatedKernel:
    """Gaussian low-pass over the kernel's flattened matrix view.

    The [m, n*kw^2] view is convolved ("same" zero padding) with the
    normalized K x K Gaussian and reshaped back to 4-D. Filtering the matrix
    view rather than the kw x kw spatial dims keeps K=7 meaningful for small
    spatial kernels.
    """
    weights = mk.kernel.weights
    n, _, _, kw = weights.shape
    filtered = gauss_filter_grid(kernel4d_to_matrix_view(weights), k, sigma)
    return ModulatedKernel(
        ConvKernel(matrix_view_to_kernel4d(filtered, n, kw)),
        mk.omega,
        (k, float(sigma)),
    )


def lowpass_backward(grad_weights: np.ndarray, k: int, sigma: float) -> np.ndarray:
    """Gradient of :func:`lowpass_filter` w.r.t. its input kernel weights.

    The Gaussian is symmetric, so the adjoint of same-padded correlation is
    the same filtering applied to the upstream gradient on the matrix view.
    """
    n, _, _, kw = grad_weights.shape
    filtered = gauss_filter_grid(kernel4d_to_matrix_view(grad_weights), k, sigma)
    return matrix_view_to_kernel4d(filtered, n, kw)


def clocknet_forward(p: ClockNetParams, token: TaskToken) -> float:
    """omega = s * (tanh(w_q @ relu(token)) + c), bounded in (s(c-1), s(c+1))."""
    if token.values.shape[0] != p.token_dim:
        raise ContractViolation(
            f"token width {token.values.shape[0]} does not match w_q width {p.token_dim}"
        )
    z = float(p.w_q[0] @ np.maximum(token.values, 0.0))
    return float(p.s * (np.tanh(z) + p.c))


@dataclass
class ClockNetGrads:
    w_q: np.ndarray
    s: float
    c: float
    token: np.ndarray


def clocknet_backward(p: ClockNetParams, token: TaskToken, grad_omega: float) -> ClockNetGrads:
    """Chain rule through the clock net; relu mask uses the p > 0 subgradient."""
    if token.values.shape[0] != p.token_dim:
        raise ContractViolation(
            f"token width {token.values.shape[0]} does not match w_q width {p.token_dim}"
        )
    relu = np.maximum(token.values, 0.0)
    z = float(p.w_q[0] @ relu)
    t = np.tanh(z)
    dz = grad_omega * p.s * (1.0 - t * t)
    return ClockNetGrads(
        w_q=(dz * relu)[np.newaxis, :],
        s=grad_omega * (t + p.c),
        c=grad_omega * p.s,
        token=dz * p.w_q[0] * (token.values > 0.0),
    )


def sine_backward(base: FusedKernel, omega: float, upstream: np.ndarray) -> tuple[np.ndarray, float]:
    """Gradients of sin(omega * M) w.r.t. M (same shape) and omega (scalar)."""
    m = base.kernel4d.weights
    upstream = as_tensor(upstream)
    if upstream.shape != m.shape:
        raise ContractViolation(f"upstream shape {upstream.shape} != base shape {m.shape}")
    cosm = np.cos(omega * m)
    grad_base = upstream * (omega * cosm)
    grad_omega = float(np.sum(upstream * m * cosm))
    return grad_base, grad_omega


def linear_scale_backward(base: FusedKernel, omega: float, upstream: np.ndarray) -> tuple[np.ndarray, float]:
    """Gradients of omega * M w.r.t. M and omega."""
    m = base.kernel4d.weights
    upstream = as_tensor(upstream)
    if upstream.shape != m.shape:
        raise ContractViolation(f"upstream shape {upstream.shape} != base shape {m.shape}")
    return omega * upstream, float(np.sum(upstream * m))


def fuse_backward(f: LowRankFactors, w: MidKernel, grad_fused: np.ndarray
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of the fused kernel w.r.t. (A, B, W).

    With G = grad_fused[:, :, u, v] per offset: dB += G A W^T, dW = B^T G A,
    dA += G^T B W, accumulated over offsets for the factor gradients.
    """
    grad_fused = as_tensor(grad_fused)
    expected = (f.n, f.m, w.kw, w.kw)
    if grad_fused.shape != expected:
        raise ContractViolation(f"grad_fused shape {grad_fused.shape} != fused shape {expected}")
    bw = np.tensordot(f.b, w.w, axes=([1], [0]))                       # [n, j, kw, kw]
    grad_a = np.tensordot(grad_fused, bw, axes=([0, 2, 3], [0, 2, 3]))  # [m, j]
    wa = np.tensordot(w.w, f.a, axes=([1], [1]))                       # [i, kw, kw, m]
    grad_b = np.tensordot(grad_fused, wa, axes=([1, 2, 3], [3, 1, 2]))  # [n, i]
    bg = np.tensordot(f.b, grad_fused, axes=([0], [0]))                # [i, m, kw, kw]
    grad_w = np.ascontiguousarray(
        np.tensordot(bg, f.a, axes=([1], [0])).transpose(0, 3, 1, 2))  # [i, j, kw, kw]
    return grad_a, grad_b, grad_w
