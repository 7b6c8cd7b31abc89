"""Learned factorized prior over quantized latents.

Each latent channel gets its own monotone cumulative function built from a
chain of affine maps with positive (softplus) weights and tanh-gated
residual nonlinearities, squashed by a final sigmoid.  Positive weights and
gates bounded in (-1, 1) make the CDF strictly increasing with the correct
limits at both infinities, whatever the raw parameter values are.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import InvalidArgumentError, ModelError

LIKELIHOOD_FLOOR = 1e-12
PRECISION = 16
TOTAL = 1 << PRECISION
TAIL_MASS = 2.0 ** -PRECISION
MAX_SUPPORT = 1 << 15


def _softplus(x):
    return np.logaddexp(0.0, x)


class EntropyModel:
    """Per-channel monotone CDF ``c_k(t)``; parameters live in ``self.params``."""

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 10.0, rng=None):
        if channels < 1:
            raise InvalidArgumentError("channels must be positive")
        self.channels = channels
        self.filters = tuple(filters)
        rng = np.random.default_rng(0) if rng is None else rng
        dims = (1,) + self.filters + (1,)
        scale = init_scale ** (1.0 / (len(self.filters) + 1))
        self.params: dict[str, np.ndarray] = {}
        for i in range(len(dims) - 1):
            init = np.log(np.expm1(1.0 / scale / dims[i + 1]))
            self.params[f"matrix{i}"] = np.full((channels, dims[i + 1], dims[i]), init)
            self.params[f"bias{i}"] = rng.uniform(-0.5, 0.5, (channels, dims[i + 1], 1))
            if i < len(self.filters):
                self.params[f"factor{i}"] = np.zeros((channels, dims[i + 1], 1))
        self._cdf = None

    @property
    def num_stages(self) -> int:
        return len(self.filters) + 1

    def invalidate(self) -> None:
        """Drop the cached frozen table after a parameter update."""
        self._cdf = None

    def cdf_table(self) -> "CdfTable":
        if self._cdf is None:
            self._cdf = freeze_cdf(self)
        return self._cdf

    def set_cdf_table(self, table: "CdfTable") -> None:
        self._cdf = table

    def logits(self, t: np.ndarray):
        """Pre-sigmoid CDF values for ``t`` of shape (channels, n) plus a backward cache."""
        h = t[:, None, :]
        cache = []
        for i in range(self.num_stages):
            w = _softplus(self.params[f"matrix{i}"])
            a = np.matmul(w, h) + self.params[f"bias{i}"]
            if i < len(self.filters):
                th = np.tanh(a)
                f = np.tanh(self.params[f"factor{i}"])
                cache.append((h, w, th, f))
                h = a + f * th
            else:
                cache.append((h, w, None, None))
                h = a
        return h[:, 0, :], cache

    def logits_backward(self, cache, grad_logits: np.ndarray):
        """Returns ``(grad_t, grad_params)`` for an upstream gradient on the logits."""
        g = grad_logits[:, None, :]
        grads = {}
        for i in reversed(range(self.num_stages)):
            h, w, th, f = cache[i]
            if th is not None:
                grads[f"factor{i}"] = np.sum(g * th, axis=2, keepdims=True) * (1.0 - f * f)
                g = g * (1.0 + f * (1.0 - th * th))
            grads[f"bias{i}"] = np.sum(g, axis=2, keepdims=True)
            grads[f"matrix{i}"] = np.matmul(g, h.transpose(0, 2, 1)) * expit(self.params[f"matrix{i}"])
            g = np.matmul(w.transpose(0, 2, 1), g)
        return g[:, 0, :], {k: grads[k] for k in self.params}

    def cdf(self, t: np.ndarray) -> np.ndarray:
        return expit(self.logits(t)[0])

    def copy(self) -> "EntropyModel":
        other = EntropyModel.__new__(EntropyModel)
        other.channels = self.channels
        other.filters = self.filters
        other.params = {k: v.copy() for k, v in self.params.items()}
        other._cdf = self._cdf
        return other

    def to_bytes(self) -> bytes:
        out = [struct.pack("<HB", self.channels, len(self.filters)),
               bytes(self.filters)]
        for arr in self.params.values():
            out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        out.append(self.cdf_table().to_bytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0):
        """Parses a serialized model; returns ``(model, new_offset)``."""
        channels, nf = struct.unpack_from("<HB", buf, offset)
        offset += 3
        filters = tuple(buf[offset:offset + nf])
        offset += nf
        m = cls.__new__(cls)
        m.channels, m.filters, m.params = channels, filters, {}
        dims = (1,) + filters + (1,)
        for i in range(len(dims) - 1):
            shapes = [("matrix", (channels, dims[i + 1], dims[i])), ("bias", (channels, dims[i + 1], 1))]
            if i < len(filters):
                shapes.append(("factor", (channels, dims[i + 1], 1)))
            for name, shape in shapes:
                n = int(np.prod(shape))
                m.params[f"{name}{i}"] = np.frombuffer(buf, "<f8", n, offset).astype(np.float64).reshape(shape)
                offset += 8 * n
        table, offset = CdfTable.from_bytes(buf, channels, offset)
        m._cdf = table
        return m, offset


def _per_channel(v: np.ndarray) -> np.ndarray:
    # (B, C, H, W) -> (C, B*H*W)
    return v.transpose(1, 0, 2, 3).reshape(v.shape[1], -1)


def _from_per_channel(a: np.ndarray, shape) -> np.ndarray:
    b, c, h, w = shape
    return a.reshape(c, b, h, w).transpose(1, 0, 2, 3)


def _interval_mass(upper, lower):
    # sigmoid(upper) - sigmoid(lower), evaluated on the side with less cancellation
    s = np.where(upper + lower > 0, -1.0, 1.0)
    return np.abs(expit(s * upper) - expit(s * lower))


def add_uniform_noise(q: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Training surrogate for rounding; the noise is a constant for gradients."""
    return q + rng.uniform(-0.5, 0.5, size=q.shape)


def quantize(q: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    r = np.floor(np.abs(q) + 0.5)
    return (np.sign(q) * r).astype(np.int64)


def _check_channels(v, m):
    if v.ndim != 4 or v.shape[1] != m.channels:
        raise InvalidArgumentError(f"latent has shape {v.shape}, entropy model expects {m.channels} channels")


def likelihood(v: np.ndarray, m: EntropyModel) -> np.ndarray:
    """Probability mass of the unit interval centred on each entry of ``v``."""
    _check_channels(v, m)
    t = _per_channel(np.asarray(v, dtype=np.float64))
    n = t.shape[1]
    lg, _ = m.logits(np.concatenate([t + 0.5, t - 0.5], axis=1))
    p = np.maximum(_interval_mass(lg[:, :n], lg[:, n:]), LIKELIHOOD_FLOOR)
    return _from_per_channel(p, v.shape)


def likelihood_backward(v: np.ndarray, m: EntropyModel, grad_p: np.ndarray):
    """Returns ``(p, grad_v, grad_params)`` for an upstream gradient on the likelihoods.

    Below the floor the gradient only passes when it pushes the likelihood
    back up, so clamped entries can still recover.
    """
    _check_channels(v, m)
    t = _per_channel(np.asarray(v, dtype=np.float64))
    n = t.shape[1]
    lg, cache = m.logits(np.concatenate([t + 0.5, t - 0.5], axis=1))
    upper, lower = lg[:, :n], lg[:, n:]
    raw = _interval_mass(upper, lower)
    g = _per_channel(grad_p)
    g = np.where((raw >= LIKELIHOOD_FLOOR) | (g < 0), g, 0.0)
    d_upper = g * expit(upper) * expit(-upper)
    d_lower = -g * expit(lower) * expit(-lower)
    grad_t2, grads = m.logits_backward(cache, np.concatenate([d_upper, d_lower], axis=1))
    grad_v = _from_per_channel(grad_t2[:, :n] + grad_t2[:, n:], v.shape)
    p = _from_per_channel(np.maximum(raw, LIKELIHOOD_FLOOR), v.shape)
    return p, grad_v, grads


def rate_from_likelihoods(p: np.ndarray, num_pixels: int) -> float:
    return float(-np.sum(np.log2(p)) / num_pixels)


def rate_bits(v: np.ndarray, m: EntropyModel, num_pixels: int) -> float:
    """Estimated bits per pixel: total -log2 likelihood over ``num_pixels``.

    ``num_pixels`` counts pixels of the original image, not latent elements.
    """
    return rate_from_likelihoods(likelihood(v, m), num_pixels)


def rate_bits_backward(v: np.ndarray, m: EntropyModel, num_pixels: int):
    """Returns ``(rate_bpp, grad_v, grad_params)`` of the rate estimate."""
    p0 = likelihood(v, m)
    grad_p = -1.0 / (np.log(2.0) * p0 * num_pixels)
    p, grad_v, grads = likelihood_backward(v, m, grad_p)
    return rate_from_likelihoods(p, num_pixels), grad_v, grads


@dataclass
class CdfTable:
    """Frozen integer cumulative counts, one strictly increasing array per channel."""

    symbol_min: np.ndarray
    cumulative: list

    @property
    def channels(self) -> int:
        return len(self.cumulative)

    @property
    def symbol_max(self) -> np.ndarray:
        return np.array([lo + len(c) - 2 for lo, c in zip(self.symbol_min, self.cumulative)])

    def clamp(self, symbols: np.ndarray) -> np.ndarray:
        """Clip a (B, C, H, W) integer latent into each channel's support."""
        lo = self.symbol_min[None, :, None, None]
        hi = self.symbol_max[None, :, None, None]
        return np.clip(symbols, lo, hi)

    def probabilities(self, channel: int) -> np.ndarray:
        return np.diff(self.cumulative[channel]) / TOTAL

    def to_bytes(self) -> bytes:
        out = []
        for lo, cum in zip(self.symbol_min, self.cumulative):
            deltas = np.diff(cum)
            out.append(struct.pack("<iI", int(lo), len(deltas)))
            out.append(deltas.astype("<u2").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes, channels: int, offset: int = 0):
        mins, cums = [], []
        for _ in range(channels):
            lo, n = struct.unpack_from("<iI", buf, offset)
            offset += 8
            deltas = np.frombuffer(buf, "<u2", n, offset).astype(np.int64)
            offset += 2 * n
            if np.any(deltas == 0) or deltas.sum() != TOTAL:
                raise ModelError("corrupt CDF table: counts must be positive and sum to 2^16")
            mins.append(lo)
            cums.append(np.concatenate([[0], np.cumsum(deltas)]))
        return cls(np.array(mins, dtype=np.int64), cums), offset


def _channel_logits(m: EntropyModel, channel: int, t: np.ndarray) -> np.ndarray:
    sub = EntropyModel.__new__(EntropyModel)
    sub.channels, sub.filters = 1, m.filters
    sub.params = {k: v[channel:channel + 1] for k, v in m.params.items()}
    return sub.logits(t[None, :])[0][0]


def _support(m: EntropyModel, channel: int):
    grid = np.arange(-MAX_SUPPORT, MAX_SUPPORT + 2, dtype=np.float64) - 0.5
    lg = _channel_logits(m, channel, grid)
    lower_ok = np.nonzero(expit(lg) < TAIL_MASS)[0]
    upper_ok = np.nonzero(expit(-lg) < TAIL_MASS)[0]
    if lower_ok.size == 0 or upper_ok.size == 0:
        raise ModelError(f"channel {channel}: support exceeds +/-2^15")
    # grid[i] = i - 2^15 - 0.5, the lower edge of symbol i - 2^15
    lo = int(lower_ok[-1]) - MAX_SUPPORT
    hi = int(upper_ok[0]) - MAX_SUPPORT - 1
    if hi <= lo:
        hi = lo + 1
    return lo, hi


def quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """Integer counts summing to 2^16, every bucket at least 1, largest-remainder rounding."""
    n = pmf.size
    if n > TOTAL // 2:
        raise ModelError(f"support of {n} symbols is too wide for 16-bit counts")
    pmf = pmf / pmf.sum()
    scaled = pmf * (TOTAL - n)
    counts = np.floor(scaled).astype(np.int64) + 1
    frac = scaled - np.floor(scaled)
    short = TOTAL - int(counts.sum())
    if short > 0:
        counts[np.argsort(-frac, kind="stable")[:short]] += 1
    return counts


def freeze_cdf(m: EntropyModel) -> CdfTable:
    """Discretize the learned CDFs into integer tables for the range coder.

    Tail mass beyond the support is folded into the edge symbols, matching
    the clamp applied to out-of-support symbols before coding.
    """
    mins, cums = [], []
    for k in range(m.channels):
        lo, hi = _support(m, k)
        edges = np.arange(lo, hi + 2, dtype=np.float64) - 0.5
        lg = _channel_logits(m, k, edges)
        pmf = _interval_mass(lg[1:], lg[:-1])
        pmf[0] += expit(lg[0])
        pmf[-1] += expit(-lg[-1])
        counts = quantize_pmf(pmf)
        mins.append(lo)
        cums.append(np.concatenate([[0], np.cumsum(counts)]))
    return CdfTable(np.array(mins, dtype=np.int64), cums)
