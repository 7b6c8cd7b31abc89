"""Dense float64 tensor ops with hand-derived backward passes.

Arrays are plain ``numpy.ndarray`` objects laid out as (batch, channel,
height, width).  Every forward op is a pure function; every backward op
takes the forward inputs plus the upstream gradient and returns analytic
gradients for the inputs and parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import InvalidArgumentError, TrainingDivergenceError

BETA_MIN = 1e-6


@dataclass
class ConvParams:
    """Kernels, bias, stride and (before, after) zero padding.

    For ``conv2d_*`` kernels are (out, in, kH, kW).  For ``tconv2d_*`` the
    same layout is read as (in, out, kH, kW), so a transposed conv built from
    a conv's kernels is its exact adjoint.
    """

    kernels: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.stride < 1:
            raise InvalidArgumentError(f"stride must be >= 1, got {self.stride}")
        if self.kernels.ndim != 4:
            raise InvalidArgumentError("kernels must be 4-D")
        kh, kw = self.kernels.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise InvalidArgumentError(f"kernel extents must be odd, got {kh}x{kw}")
        if min(self.padding) < 0:
            raise InvalidArgumentError("padding must be non-negative")

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[2]


@dataclass
class GdnParams:
    beta: np.ndarray
    gamma: np.ndarray

    @property
    def channels(self) -> int:
        return self.beta.shape[0]

    @classmethod
    def initial(cls, channels: int) -> "GdnParams":
        return cls(np.ones(channels), 0.1 * np.eye(channels))

    def project(self) -> None:
        np.maximum(self.beta, BETA_MIN, out=self.beta)
        np.maximum(self.gamma, 0.0, out=self.gamma)


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """TF-style "same" padding for an input of ``size`` divisible by ``stride``."""
    total = max((size // stride - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def conv_output_size(size: int, kernel: int, stride: int, padding: tuple[int, int]) -> int:
    return (size + padding[0] + padding[1] - kernel) // stride + 1


def tconv_output_size(size: int, kernel: int, stride: int, padding: tuple[int, int]) -> int:
    return (size - 1) * stride - padding[0] - padding[1] + kernel


def _windows(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    return as_strided(xp, (b, c, ho, wo, k, k), (sb, sc, sh * s, sw * s, sh, sw), writeable=False)


def _scatter(cols: np.ndarray, out: np.ndarray, s: int) -> None:
    # cols: (B, h, w, C, k, k) accumulated into out: (B, C, Hp, Wp)
    _, h, w, _, k, _ = cols.shape
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + s * (h - 1) + 1:s, j:j + s * (w - 1) + 1:s] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2))


def _check_4d(x: np.ndarray, name: str = "x") -> None:
    if x.ndim != 4:
        raise InvalidArgumentError(f"{name} must be 4-D (batch, channels, height, width), got shape {x.shape}")


def conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    _check_4d(x)
    if x.shape[1] != p.kernels.shape[1]:
        raise InvalidArgumentError(
            f"channels: input has {x.shape[1]}, kernels expect {p.kernels.shape[1]}")
    k, s, (pb, pa) = p.kernel_size, p.stride, p.padding
    for axis, size in (("height", x.shape[2]), ("width", x.shape[3])):
        if size + pb + pa < k:
            raise InvalidArgumentError(f"{axis}: padded extent {size + pb + pa} < kernel {k}")
    xp = np.pad(x, ((0, 0), (0, 0), (pb, pa), (pb, pa)))
    ho = conv_output_size(x.shape[2], k, s, p.padding)
    wo = conv_output_size(x.shape[3], k, s, p.padding)
    win = _windows(xp, k, s, ho, wo)
    out = np.tensordot(win, p.kernels, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2) + p.bias[None, :, None, None]


def conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_kernels, grad_bias)``."""
    k, s, (pb, pa) = p.kernel_size, p.stride, p.padding
    ho = conv_output_size(x.shape[2], k, s, p.padding)
    wo = conv_output_size(x.shape[3], k, s, p.padding)
    expected = (x.shape[0], p.kernels.shape[0], ho, wo)
    if grad_out.shape != expected:
        raise InvalidArgumentError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    xp = np.pad(x, ((0, 0), (0, 0), (pb, pa), (pb, pa)))
    win = _windows(xp, k, s, ho, wo)
    grad_k = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = grad_out.sum(axis=(0, 2, 3))
    cols = np.tensordot(grad_out, p.kernels, axes=([1], [0]))
    gxp = np.zeros_like(xp)
    _scatter(cols, gxp, s)
    grad_x = gxp[:, :, pb:pb + x.shape[2], pb:pb + x.shape[3]]
    return np.ascontiguousarray(grad_x), grad_k, grad_b


def tconv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    _check_4d(x)
    if x.shape[1] != p.kernels.shape[0]:
        raise InvalidArgumentError(
            f"channels: input has {x.shape[1]}, kernels expect {p.kernels.shape[0]}")
    k, s, (pb, pa) = p.kernel_size, p.stride, p.padding
    b, _, h, w = x.shape
    hp, wp = (h - 1) * s + k, (w - 1) * s + k
    if hp - pb - pa < 1 or wp - pb - pa < 1:
        raise InvalidArgumentError("padding removes the entire output")
    cols = np.tensordot(x, p.kernels, axes=([1], [0]))
    full = np.zeros((b, p.kernels.shape[1], hp, wp))
    _scatter(cols, full, s)
    out = full[:, :, pb:hp - pa, pb:wp - pa]
    return out + p.bias[None, :, None, None]


def tconv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_kernels, grad_bias)``."""
    k, s, (pb, pa) = p.kernel_size, p.stride, p.padding
    b, _, h, w = x.shape
    expected = (b, p.kernels.shape[1], tconv_output_size(h, k, s, p.padding),
                tconv_output_size(w, k, s, p.padding))
    if grad_out.shape != expected:
        raise InvalidArgumentError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    gp = np.pad(grad_out, ((0, 0), (0, 0), (pb, pa), (pb, pa)))
    win = _windows(gp, k, s, h, w)
    grad_x = np.tensordot(win, p.kernels, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    grad_k = np.tensordot(x, win, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(grad_x), grad_k, grad_b


def _gdn_norm(x: np.ndarray, g: GdnParams) -> np.ndarray:
    _check_4d(x)
    if x.shape[1] != g.channels:
        raise InvalidArgumentError(f"channels: input has {x.shape[1]}, GDN has {g.channels}")
    return g.beta[None, :, None, None] + np.einsum("ij,bjhw->bihw", g.gamma, x * x)


def gdn_forward(x: np.ndarray, g: GdnParams) -> np.ndarray:
    return x / np.sqrt(_gdn_norm(x, g))


def gdn_backward(x: np.ndarray, g: GdnParams, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_beta, grad_gamma)``."""
    norm = _gdn_norm(x, g)
    # d y_i / d norm_i = -x_i / 2 * norm_i^(-3/2)
    t = -0.5 * grad_out * x * norm ** -1.5
    grad_x = grad_out / np.sqrt(norm) + 2.0 * x * np.einsum("ik,bihw->bkhw", g.gamma, t)
    grad_beta = t.sum(axis=(0, 2, 3))
    grad_gamma = np.einsum("bihw,bjhw->ij", t, x * x)
    return grad_x, grad_beta, grad_gamma


def igdn_forward(x: np.ndarray, g: GdnParams) -> np.ndarray:
    return x * np.sqrt(_gdn_norm(x, g))


def igdn_backward(x: np.ndarray, g: GdnParams, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_beta, grad_gamma)``."""
    norm = _gdn_norm(x, g)
    root = np.sqrt(norm)
    t = 0.5 * grad_out * x / root
    grad_x = grad_out * root + 2.0 * x * np.einsum("ik,bihw->bkhw", g.gamma, t)
    grad_beta = t.sum(axis=(0, 2, 3))
    grad_gamma = np.einsum("bihw,bjhw->ij", t, x * x)
    return grad_x, grad_beta, grad_gamma


@dataclass
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, learning_rate=None, lower_bounds=None):
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``lower_bounds`` maps parameter names to a floor that is enforced by
    projection right after the update (used for GDN beta and gamma).
    """
    if set(params) != set(grads):
        raise InvalidArgumentError("params and grads have different keys")
    for name in params:
        if params[name].shape != grads[name].shape:
            raise InvalidArgumentError(f"{name}: grad shape {grads[name].shape} != param shape {params[name].shape}")
        if not np.all(np.isfinite(grads[name])):
            raise TrainingDivergenceError(f"non-finite gradient for parameter {name!r}", name=name)
    lr = state.learning_rate if learning_rate is None else learning_rate
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.first_moment.setdefault(name, np.zeros_like(p))
        v = state.second_moment.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        if lower_bounds and name in lower_bounds:
            np.maximum(p, lower_bounds[name], out=p)
    return params, state
