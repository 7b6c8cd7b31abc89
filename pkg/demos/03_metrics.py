"""
Quality metrics and Bjontegaard deltas
======================================

PSNR and MS-SSIM on a distorted picture, then the average rate and quality
gaps between two rate-distortion curves.
"""

import numpy as np

from saecodec import bd_psnr, bd_rate, ms_ssim, psnr
from saecodec.synthetic import synthetic_images

x = synthetic_images(1, 192, seed=0)[0]
rng = np.random.default_rng(0)
noisy = np.clip(x + rng.normal(scale=6, size=x.shape), 0, 255).round().astype(np.uint8)

print("PSNR %.2f dB" % psnr(x, noisy))
print("MS-SSIM %.4f" % ms_ssim(x, noisy))  # needs at least 176 px per side

# two curves as (bpp, psnr) points; b reaches the same quality at 80% of the rate
a = [(0.1, 28.0), (0.2, 31.0), (0.4, 34.0), (0.8, 37.0)]
b = [(r * 0.8, q) for r, q in a]
print("BD-rate of b vs a: %.2f%%" % bd_rate(a, b))
print("BD-PSNR of b vs a: %.3f dB" % bd_psnr(a, b))
