"""Quality metrics and Bjontegaard curve comparison."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError, MetricError, PreconditionError

PSNR_CAP = 100.0

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03
MIN_SIDE = WINDOW * 2 ** (len(MS_SSIM_WEIGHTS) - 1)


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr_db: float
    ms_ssim: float

    def __post_init__(self):
        if self.bpp < 0:
            raise InvalidArgumentError(f"bpp must be >= 0, got {self.bpp}")
        if not math.isnan(self.ms_ssim) and not 0.0 <= self.ms_ssim <= 1.0:
            raise InvalidArgumentError(f"ms_ssim must lie in [0, 1], got {self.ms_ssim}")


def _as_nchw(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 3:  # (H, W, C) image
        return a.transpose(2, 0, 1)[None]
    if a.ndim != 4:
        raise InvalidArgumentError(f"expected an (H, W, C) image or (B, C, H, W) tensor, got shape {a.shape}")
    return a


def psnr(x, y, data_range: float = 255.0) -> float:
    """PSNR in dB with MSE pooled over all channels; identical inputs give 100 dB."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidArgumentError(f"shape mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range ** 2 / mse))


def _gaussian_window() -> np.ndarray:
    t = np.arange(WINDOW) - (WINDOW - 1) / 2
    g = np.exp(-(t * t) / (2 * SIGMA * SIGMA))
    return g / g.sum()


_G = _gaussian_window()


def _blur(x: np.ndarray) -> np.ndarray:
    # separable valid-mode Gaussian filter over the last two axes
    h = sliding_window_view(x, WINDOW, axis=2) @ _G
    return sliding_window_view(h, WINDOW, axis=3) @ _G


def _blur_t(d: np.ndarray) -> np.ndarray:
    # adjoint of _blur: full-mode correlation with the (symmetric) kernel
    p = WINDOW - 1
    d = np.pad(d, ((0, 0), (0, 0), (0, 0), (p, p)))
    d = sliding_window_view(d, WINDOW, axis=3) @ _G[::-1]
    d = np.pad(d, ((0, 0), (0, 0), (p, p), (0, 0)))
    return sliding_window_view(d, WINDOW, axis=2) @ _G[::-1]


def _pool(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    x = x[:, :, :h - h % 2, :w - w % 2]
    return 0.25 * (x[:, :, 0::2, 0::2] + x[:, :, 1::2, 0::2] + x[:, :, 0::2, 1::2] + x[:, :, 1::2, 1::2])


def _pool_t(d: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape)
    h, w = 2 * d.shape[2], 2 * d.shape[3]
    up = 0.25 * np.repeat(np.repeat(d, 2, axis=2), 2, axis=3)
    out[:, :, :h, :w] = up
    return out


def _ms_ssim_forward(x, y, data_range):
    if x.shape != y.shape:
        raise InvalidArgumentError(f"shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape[2:]) < MIN_SIDE:
        raise PreconditionError(f"MS-SSIM needs both sides >= {MIN_SIDE}, got {x.shape[2:]}")
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    scales = []
    vals = []
    for j in range(len(MS_SSIM_WEIGHTS)):
        if j:
            x, y = _pool(x), _pool(y)
        mx, my = _blur(x), _blur(y)
        sxx = _blur(x * x) - mx * mx
        syy = _blur(y * y) - my * my
        sxy = _blur(x * y) - mx * my
        num = 2 * sxy + c2
        den = sxx + syy + c2
        cs = num / den
        s = dict(x=x, y=y, mx=mx, my=my, num=num, den=den, cs=cs)
        if j == len(MS_SSIM_WEIGHTS) - 1:
            ln = 2 * mx * my + c1
            ld = mx * mx + my * my + c1
            s.update(ln=ln, ld=ld, lum=ln / ld)
            vals.append(np.mean(s["lum"] * cs, axis=(2, 3)))
        else:
            vals.append(np.mean(cs, axis=(2, 3)))
        scales.append(s)
    vals = np.maximum(np.stack(vals, axis=-1), 0.0)
    per_channel = np.prod(vals ** np.array(MS_SSIM_WEIGHTS), axis=-1)
    return per_channel, vals, scales


def ms_ssim(x, y, data_range: float = 255.0) -> float:
    """Five-scale MS-SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels.

    Accepts (H, W, C) images or (B, C, H, W) tensors.  Contrast-structure
    terms are clipped at zero, which keeps the score in [0, 1].
    """
    per_channel, _, _ = _ms_ssim_forward(_as_nchw(x), _as_nchw(y), data_range)
    return float(per_channel.mean())


def ms_ssim_backward(x, y, data_range: float = 255.0):
    """Returns ``(ms_ssim(x, y), d ms_ssim / d y)`` for (B, C, H, W) inputs."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    per_channel, vals, scales = _ms_ssim_forward(x, y, data_range)
    w = np.array(MS_SSIM_WEIGHTS)
    g_pc = np.full(per_channel.shape, 1.0 / per_channel.size)
    safe = np.where(vals > 0, vals, 1.0)
    g_vals = np.where(vals > 0, g_pc[..., None] * per_channel[..., None] * w / safe, 0.0)

    grad_y = None
    for j in reversed(range(len(scales))):
        s = scales[j]
        area = s["cs"].shape[2] * s["cs"].shape[3]
        g_map = np.broadcast_to(g_vals[..., j][..., None, None] / area, s["cs"].shape)
        g_my = np.zeros_like(s["my"])
        if "lum" in s:
            g_cs = g_map * s["lum"]
            g_lum = g_map * s["cs"]
            g_my += g_lum * (2 * s["mx"] / s["ld"] - s["ln"] * 2 * s["my"] / s["ld"] ** 2)
        else:
            g_cs = g_map
        g_sxy = g_cs * 2 / s["den"]
        g_syy = -g_cs * s["num"] / s["den"] ** 2
        g_my += -g_sxy * s["mx"] - 2 * s["my"] * g_syy
        g = _blur_t(g_sxy) * s["x"] + 2 * s["y"] * _blur_t(g_syy) + _blur_t(g_my)
        if grad_y is not None:
            g = g + _pool_t(grad_y, g.shape)
        grad_y = g
    return float(per_channel.mean()), grad_y


# ---------------------------------------------------------------------------
# Bjontegaard deltas


def _curve_arrays(curve, quality: str):
    if len(curve) < 4:
        raise MetricError(f"Bjontegaard metrics need >= 4 points per curve, got {len(curve)}")
    rates, quals = [], []
    for p in curve:
        if isinstance(p, RDPoint):
            rates.append(p.bpp)
            quals.append(p.psnr_db if quality == "psnr" else p.ms_ssim)
        else:
            rates.append(p[0])
            quals.append(p[1])
    rates = np.asarray(rates, dtype=np.float64)
    if np.any(rates <= 0):
        raise MetricError("rates must be positive for log-rate fitting")
    return np.log10(rates), np.asarray(quals, dtype=np.float64)


def _avg_poly_gap(xa, ya, xb, yb, what):
    lo = max(xa.min(), xb.min())
    hi = min(xa.max(), xb.max())
    if hi <= lo:
        raise MetricError(
            f"no {what} overlap: [{xa.min():.4g}, {xa.max():.4g}] vs [{xb.min():.4g}, {xb.max():.4g}]")
    ia = np.polyint(np.polyfit(xa, ya, 3))
    ib = np.polyint(np.polyfit(xb, yb, 3))
    area_a = np.polyval(ia, hi) - np.polyval(ia, lo)
    area_b = np.polyval(ib, hi) - np.polyval(ib, lo)
    return (area_b - area_a) / (hi - lo)


def bd_rate(curve_a, curve_b, quality: str = "psnr") -> float:
    """Average bitrate change of ``curve_b`` relative to ``curve_a`` in percent.

    Curves are sequences of :class:`RDPoint` or ``(rate, quality)`` pairs.
    Negative values mean ``curve_b`` needs fewer bits for the same quality.
    """
    la, qa = _curve_arrays(curve_a, quality)
    lb, qb = _curve_arrays(curve_b, quality)
    avg = _avg_poly_gap(qa, la, qb, lb, "quality")
    return float((10.0 ** avg - 1.0) * 100.0)


def bd_psnr(curve_a, curve_b, quality: str = "psnr") -> float:
    """Average quality gain of ``curve_b`` over ``curve_a`` (dB for PSNR)."""
    la, qa = _curve_arrays(curve_a, quality)
    lb, qb = _curve_arrays(curve_b, quality)
    return float(_avg_poly_gap(la, qa, lb, qb, "rate"))


# ---------------------------------------------------------------------------
# rate-distortion curves


def rd_curve(model, images, max_layers: int | None = None) -> list[RDPoint]:
    """One averaged R-D point per cumulative layer over ``images`` (uint8 HxWx3).

    Rates come from actual payload byte counts.  MS-SSIM is NaN for images
    smaller than the five-scale minimum.
    """
    from .pipeline import sae_decode, sae_encode, stream_bpp

    k_max = model.num_layers if max_layers is None else max_layers
    images = list(images)
    if not images:
        raise InvalidArgumentError("rd_curve needs at least one image")
    acc = np.zeros((k_max, 3))
    for img in images:
        stream = sae_encode(img, model, k_max)
        bpps = np.cumsum(stream_bpp(stream))
        for k in range(1, k_max + 1):
            rec = sae_decode(stream, model, k)
            q = ms_ssim(img, rec) if min(img.shape[:2]) >= MIN_SIDE else float("nan")
            acc[k - 1] += (bpps[k - 1], psnr(img, rec), q)
    acc /= len(images)
    points = [RDPoint(*map(float, row)) for row in acc]
    for a, b in zip(points, points[1:]):
        if not b.bpp > a.bpp:
            raise MetricError("cumulative bpp is not strictly increasing across layers")
    return points


def write_curve_csv(points, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "bpp", "psnr_db", "ms_ssim"])
        for i, p in enumerate(points):
            w.writerow([i, f"{p.bpp:.6f}", f"{p.psnr_db:.4f}", f"{p.ms_ssim:.6f}"])


def read_curve_csv(path) -> list[RDPoint]:
    with open(path, newline="") as fh:
        return [RDPoint(float(r["bpp"]), float(r["psnr_db"]), float(r["ms_ssim"])) for r in csv.DictReader(fh)]
