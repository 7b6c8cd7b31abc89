"""The nine acceptance criteria, one test each; every test records a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they
happen; they are also repeated in the terminal summary.  Criteria 3 to 6
share one trained toy model (see tests/toy.py), trained once per session.
"""

import time

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from saecodec.entropy_model import (
    CdfTable, EntropyModel, likelihood, quantize_pmf, rate_bits, rate_bits_backward)
from saecodec.metrics import bd_rate, ms_ssim, ms_ssim_backward, psnr, rd_curve
from saecodec.numerics import (
    ConvParams, GdnParams, conv2d_backward, conv2d_forward, gdn_backward, gdn_forward, igdn_backward,
    igdn_forward, tconv2d_backward, tconv2d_forward)
from saecodec.pipeline import LayeredBitstream, encode_layers, sae_decode, sae_encode, stream_bpp, truncate
from saecodec.rangecoder import ideal_bits, rc_decode, rc_encode

from golden import model_problems, rangecoder_problems, stream_problems
from gradcheck import max_rel_error, numeric_grad
from toy import HELD_OUT, ITERATIONS


@pytest.fixture
def record(acceptance_log):
    def _record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"
        acceptance_log[n] = line
        print(line)
        return ok
    return _record


def _conv_errors(rng):
    errs = {}
    x = rng.normal(size=(1, 4, 8, 8))
    p = ConvParams(rng.normal(size=(4, 4, 5, 5)) / 10, rng.normal(size=4), 2, (1, 2))
    w = rng.normal(size=conv2d_forward(x, p).shape)
    gx, gk, gb = conv2d_backward(x, p, w)
    out = lambda: conv2d_forward(x, p)
    errs["conv"] = max(max_rel_error(gx, numeric_grad(out, x, weights=w)),
                       max_rel_error(gk, numeric_grad(out, p.kernels, weights=w)),
                       max_rel_error(gb, numeric_grad(out, p.bias, weights=w)))

    z = rng.normal(size=(1, 4, 4, 4))
    q = ConvParams(rng.normal(size=(4, 4, 5, 5)) / 10, rng.normal(size=4), 2, (1, 2))
    w = rng.normal(size=tconv2d_forward(z, q).shape)
    gz, gk, gb = tconv2d_backward(z, q, w)
    out = lambda: tconv2d_forward(z, q)
    errs["tconv"] = max(max_rel_error(gz, numeric_grad(out, z, weights=w)),
                        max_rel_error(gk, numeric_grad(out, q.kernels, weights=w)),
                        max_rel_error(gb, numeric_grad(out, q.bias, weights=w)))

    for name, fwd, bwd in (("gdn", gdn_forward, gdn_backward), ("igdn", igdn_forward, igdn_backward)):
        x = rng.normal(size=(1, 4, 8, 8))
        g = GdnParams(rng.uniform(0.5, 1.5, 4), rng.uniform(0, 0.2, (4, 4)))
        w = rng.normal(size=x.shape)
        gx, gbeta, ggamma = bwd(x, g, w)
        out = lambda: fwd(x, g)
        errs[name] = max(max_rel_error(gx, numeric_grad(out, x, weights=w)),
                         max_rel_error(gbeta, numeric_grad(out, g.beta, weights=w)),
                         max_rel_error(ggamma, numeric_grad(out, g.gamma, weights=w)))

    m = EntropyModel(4, rng=rng)
    for v in m.params.values():
        v += rng.normal(scale=0.3, size=v.shape)
    v = rng.normal(scale=3, size=(1, 4, 4, 4))
    _, gv, grads = rate_bits_backward(v, m, 64)
    per_elem = lambda: -np.log2(likelihood(v, m)) / 64
    one = np.ones_like(v)
    errs["rate"] = max([max_rel_error(gv, numeric_grad(per_elem, v, eps=1e-3, weights=one, order=4))]
                       + [max_rel_error(grads[k], numeric_grad(per_elem, a, eps=1e-3, weights=one, order=4))
                          for k, a in m.params.items()])
    return errs


def _ms_ssim_error(rng):
    base = gaussian_filter(rng.normal(size=(1, 3, 176, 176)), (0, 0, 2, 2)) * 1.2 + 0.5
    x = np.clip(base, 0, 1)
    y = np.clip(x + rng.normal(scale=0.05, size=x.shape), 0, 1)
    _, g = ms_ssim_backward(x, y, 1.0)
    worst = 0.0
    eps = 1e-5
    for _ in range(4):
        d = rng.normal(size=y.shape)
        num = (ms_ssim(x, y + eps * d, 1.0) - ms_ssim(x, y - eps * d, 1.0)) / (2 * eps)
        worst = max(worst, max_rel_error(np.sum(g * d), num))
    flat = y.reshape(-1)
    eps = 1e-3
    for i in np.argsort(-np.abs(g).ravel())[:4]:
        old = flat[i]
        flat[i] = old + eps
        fp = ms_ssim(x, y, 1.0)
        flat[i] = old - eps
        fm = ms_ssim(x, y, 1.0)
        flat[i] = old
        worst = max(worst, max_rel_error(g.ravel()[i], (fp - fm) / (2 * eps)))
    return worst


def test_criterion_1_gradient_suite(record):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    errs = _conv_errors(rng)
    msssim = _ms_ssim_error(rng)
    elapsed = time.perf_counter() - start
    ok = max(errs.values()) <= 1e-6 and msssim <= 1e-4 and elapsed <= 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    assert record(1, ok, f"{detail}, ms-ssim {msssim:.1e}; {elapsed:.1f}s")


def test_criterion_2_entropy_coder(record):
    rng = np.random.default_rng(7)
    channels = 32
    mins, cums = [], []
    for _ in range(channels):
        n = int(rng.integers(2, 64))
        cums.append(np.concatenate([[0], np.cumsum(quantize_pmf(rng.dirichlet(np.full(n, 0.7))))]))
        mins.append(int(rng.integers(-n, 1)))
    tables = CdfTable(np.array(mins, dtype=np.int64), [c.astype(np.int64) for c in cums])
    n = 10 ** 6
    ch = np.repeat(np.arange(channels), n // channels)
    sym = np.empty(n, dtype=np.int64)
    for c in range(channels):
        sel = ch == c
        sym[sel] = mins[c] + rng.choice(len(cums[c]) - 1, size=sel.sum(), p=np.diff(cums[c]) / 65536)
    start = time.perf_counter()
    payload = rc_encode(sym, ch, tables)
    back = rc_decode(payload, ch, tables)
    elapsed = time.perf_counter() - start
    ideal = ideal_bits(sym, ch, tables)
    actual = 8 * len(payload.data)
    exact = np.array_equal(back, sym)
    ok = exact and actual <= 1.01 * ideal + 128 and elapsed <= 30
    assert record(2, ok, f"round trip {'exact' if exact else 'BROKEN'}, {actual} bits vs ideal {ideal:.0f} "
                         f"(+{100 * (actual / ideal - 1):.3f}%), {elapsed:.1f}s")


def test_criterion_3_scalability(record, toy_run):
    model = toy_run.model
    mismatches = 0
    non_increasing = 0
    for img in toy_run.held_out:
        s = sae_encode(img, model)
        buf = s.to_bytes()
        for k in range(1, model.num_layers + 1):
            direct = sae_decode(s, model, k)
            cut = LayeredBitstream.from_bytes(truncate(LayeredBitstream.from_bytes(buf), k).to_bytes())
            if not np.array_equal(sae_decode(cut, model), direct):
                mismatches += 1
        if not np.all(np.diff(np.cumsum(stream_bpp(s))) > 0):
            non_increasing += 1
    ok = mismatches == 0 and non_increasing == 0 and toy_run.train_seconds <= 600
    assert record(3, ok, f"{mismatches} truncation mismatches, {non_increasing} images with non-increasing bpp, "
                         f"toy training {toy_run.train_seconds:.0f}s for {ITERATIONS} iterations/layer")


def test_criterion_4_layered_refinement(record, toy_run):
    assert len(toy_run.held_out) >= 20
    points = rd_curve(toy_run.model, toy_run.held_out)
    p = [pt.psnr_db for pt in points]
    q = [pt.ms_ssim for pt in points]
    ok = all(b > a for a, b in zip(p, p[1:])) and all(b >= a for a, b in zip(q, q[1:]))
    detail = "; ".join(f"k={i + 1}: {pt.bpp:.4f} bpp {pt.psnr_db:.2f} dB ms-ssim {pt.ms_ssim:.4f}"
                       for i, pt in enumerate(points))
    assert record(4, ok, f"{HELD_OUT} held-out images; {detail}")


def test_criterion_5_lambda_direction(record, toy_run):
    rows = []
    for lam, model in sorted(toy_run.sweep.items()):
        bpp, mse = [], []
        for img in toy_run.held_out:
            s = sae_encode(img, model)
            bpp.append(float(np.sum(stream_bpp(s))))
            mse.append(float(np.mean((sae_decode(s, model).astype(float) - img) ** 2)))
        rows.append((lam, np.mean(bpp), np.mean(mse)))
    bpps = [r[1] for r in rows]
    mses = [r[2] for r in rows]
    ok = all(b < a for a, b in zip(bpps, bpps[1:])) and all(b > a for a, b in zip(mses, mses[1:]))
    assert record(5, ok, "; ".join(f"lambda {l:g}: {b:.4f} bpp, MSE {m:.1f}" for l, b, m in rows))


def test_criterion_6_rate_fidelity(record, toy_run):
    model = toy_run.model
    worst = 0.0
    worst_case = ""
    for n, img in enumerate(toy_run.held_out):
        s = sae_encode(img, model)
        actual = stream_bpp(s)
        pixels = img.shape[0] * img.shape[1]
        for step in encode_layers(img, model, model.num_layers):
            i = step["index"]
            est = rate_bits(step["symbols"].astype(np.float64), model.layers[i].entropy, pixels)
            allowed = 0.02 * actual[i] + 64 * 8 / pixels
            ratio = abs(est - actual[i]) / allowed
            if ratio > worst:
                worst = ratio
                worst_case = f"image {n} layer {i}: est {est:.5f} vs coded {actual[i]:.5f} bpp"
    assert record(6, worst <= 1.0, f"worst |error| / allowance = {worst:.3f} ({worst_case})")


def test_criterion_7_bjontegaard(record):
    rates = np.array([0.1, 0.2, 0.4, 0.8, 1.6])
    a = [(r, 28 + 5 * np.log2(r / 0.1) - 0.2 * np.log2(r / 0.1) ** 2) for r in rates]
    halved = [(r / 2, q) for r, q in a]
    half = bd_rate(a, halved)
    same = bd_rate(a, a)
    ok = abs(half + 50.0) <= 0.1 and abs(same) <= 1e-9
    assert record(7, ok, f"halved-rate copy {half:.6f}%, identical curves {same:.1e}%")


def test_criterion_8_metric_identities(record):
    rng = np.random.default_rng(3)
    x = np.clip(gaussian_filter(rng.normal(size=(192, 200, 3)), (2, 2, 0)) * 400 + 128, 0, 255)
    self_score = ms_ssim(x, x)
    ref = np.zeros((8, 8, 3))
    p = psnr(ref, ref + 1.0)
    ok = abs(self_score - 1.0) <= 1e-9 and abs(p - 48.1308) <= 1e-3
    assert record(8, ok, f"MS-SSIM(x, x) = {self_score:.12f}, PSNR at MSE 1 = {p:.4f} dB")


def test_criterion_9_format_stability(record):
    problems = model_problems() + stream_problems() + rangecoder_problems()
    assert record(9, not problems, "golden model, stream and range-coder fixtures reproduce"
                  if not problems else "; ".join(problems))
