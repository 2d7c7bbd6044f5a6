"""Acceptance gate: one test per release criterion, one printed verdict each.

Run with `pytest tests/test_acceptance.py -v -s`.  Every test prints a single
`[criterion N] name: PASS/FAIL (measurements)` line so the gate can be read
off a CI log without opening the assertions.  Slow end-to-end checks
(4K rate control, desk-scale training) live here, not in the unit suite.
"""

import io
import time

import numpy as np
import pytest
from PIL import Image
from scipy import stats

import odiview.autodiff as ad
from odiview.autodiff import Tensor
from odiview.codec import (RateModel, decode, encode, fit_quant_tables,
                           forward_blocks, tables_for_quality)
from odiview.codec import QuantTables
from odiview.geometry import (ErpCoord, ViewportCoord, ViewportSpec,
                              erp_to_sphere, inverse_map)
from odiview.metrics import psnr, ssim, ws_psnr
from odiview.probes import _ERP_H, _ERP_W, _fd_descriptor, _probe_points, \
    check_roundtrip
from odiview.renderer import render_viewport_baseline
from odiview.resample import ErpImage, bicubic_downscale, crop_patch, sample_at
from odiview.sampling import (PatchSpec, denormalize, dis_samp,
                              filter_with_bounds, pick_view_for_patch)
from odiview.ssr import shape_2d_baseline, shape_at
from odiview.synthetic import make_panorama
from odiview.training import TrainConfig, build_model, draw_item, item_losses


def _verdict(num: int, name: str, ok: bool, detail: str):
    print(f"\n[criterion {num}] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num} {name}: {detail}"


# --------------------------------------------------------------------- 1 ---

def test_criterion_1_geometry_roundtrip():
    t0 = time.time()
    ok, detail = check_roundtrip(n_specs=100, tol=1e-9)
    dt = time.time() - t0
    _verdict(1, "geometry roundtrip", ok and dt < 10.0, f"{detail}; {dt:.2f}s")


# --------------------------------------------------------------------- 2 ---

def test_criterion_2_shape_descriptor_oracle():
    rng = np.random.default_rng(5)
    worst_j = worst_h = 0.0
    for _ in range(20):
        spec = ViewportSpec(
            theta_c=float(np.deg2rad(rng.uniform(-75, 75))),
            phi_c=float(rng.uniform(-np.pi, np.pi)),
            fov_h=float(np.deg2rad(rng.uniform(40, 110))),
            fov_v=float(np.deg2rad(rng.uniform(40, 110))),
            h_v=int(rng.integers(96, 225)), w_v=int(rng.integers(96, 225)))
        y = _probe_points(spec)
        erp = inverse_map(spec, y, _ERP_H, _ERP_W)
        lat = np.abs(erp_to_sphere(ErpCoord(x1=erp.x1, x2=erp.x2),
                                   _ERP_H, _ERP_W).theta)
        keep = lat <= np.deg2rad(75.0)
        jac, hess = _fd_descriptor(spec, y)
        d = shape_at(spec, y, _ERP_H, _ERP_W)
        worst_j = max(worst_j,
                      np.abs(d.jac - jac)[keep].max() / np.abs(jac).max())
        worst_h = max(worst_h,
                      np.abs(d.hess - hess)[keep].max() / np.abs(hess).max())

    # high-latitude ordering: the planar stencil must be >=10x worse
    ratios = []
    for lat in (80.0, 85.0, 88.0):
        spec = ViewportSpec(theta_c=float(np.deg2rad(lat)), phi_c=0.0,
                            fov_h=float(np.deg2rad(90)),
                            fov_v=float(np.deg2rad(90)), h_v=128, w_v=128)
        y = _probe_points(spec)
        jac, _ = _fd_descriptor(spec, y)
        s_err = np.abs(shape_at(spec, y, _ERP_H, _ERP_W).jac - jac).max()
        p_err = np.abs(shape_2d_baseline(spec, y, _ERP_H, _ERP_W).jac
                       - jac).max()
        ratios.append(p_err / s_err)

    # longitude-roll invariance vs. the planar stencil's seam discontinuity
    spec0 = ViewportSpec(theta_c=0.3, phi_c=0.4, fov_h=1.2, fov_v=1.0,
                         h_v=96, w_v=96)
    y = _probe_points(spec0)
    drift, jump = 0.0, np.inf
    for dphi in (1.0, np.pi):
        spec1 = ViewportSpec(theta_c=0.3, phi_c=spec0.phi_c + dphi,
                             fov_h=1.2, fov_v=1.0, h_v=96, w_v=96)
        drift = max(drift, float(np.abs(
            shape_at(spec1, y, _ERP_H, _ERP_W).jac
            - shape_at(spec0, y, _ERP_H, _ERP_W).jac).max()))
        if dphi == np.pi:  # this roll carries the viewport across the seam
            jump = float(np.abs(
                shape_2d_baseline(spec1, y, _ERP_H, _ERP_W).jac
                - shape_2d_baseline(spec0, y, _ERP_H, _ERP_W).jac).max())

    ok = (worst_j < 1e-3 and worst_h < 1e-2 and min(ratios) > 10.0
          and drift < 1e-9 and jump > 1.0)
    _verdict(2, "shape-descriptor oracle", ok,
             f"jac {worst_j:.2e} (<1e-3), hess {worst_h:.2e} (<1e-2), "
             f"planar/spherical err ratio >= {min(ratios):.0f} (>10), "
             f"roll drift {drift:.1e} (<1e-9), planar seam jump {jump:.1e}")


# --------------------------------------------------------------------- 3 ---

def test_criterion_3_sampler_conformance():
    pano = make_panorama(3, 128, 256)
    rng = np.random.default_rng(11)
    n_draws, n_req = 10_000, 64
    checked = equal_cases = 0
    worst_reeval = 0.0
    t0 = time.time()
    for i in range(n_draws):
        ps = PatchSpec(a=int(rng.integers(pano.w)),
                       b=int(rng.integers(pano.h - 32 + 1)), p=32, s=2)
        spec = pick_view_for_patch(ps, pano.h, pano.w, rng,
                                   (60.0, 90.0), (24, 48))
        try:
            ss, _ = dis_samp(pano, ps, spec, n_req, rng)
        except Exception:
            continue
        checked += 1
        c = denormalize(ss.coords, ps, pano.w)
        assert np.all(filter_with_bounds(c.x1, c.x2, ps, pano.w))
        assert np.all(ss.coords >= -1.0) and np.all(ss.coords < 1.0)
        assert ss.n <= n_req
        if i % 10 == 0:  # overlap recount is 100x the cost; spot-check
            full, _ = dis_samp(pano, ps, spec, 10 ** 7,
                               np.random.default_rng(0))
            assert ss.n == min(n_req, full.n)
            if full.n >= n_req:
                equal_cases += 1
                assert ss.n == n_req
            patch = ErpImage(pixels=crop_patch(pano, ps.a, ps.b, ps.p))
            local = (ss.coords + 1.0) * ps.p / 2.0
            again = sample_at(patch, ErpCoord(x1=local[:, 0], x2=local[:, 1]),
                              wrap_x=False)
            worst_reeval = max(worst_reeval,
                               float(np.abs(again - ss.pixels).max()))
    dt = time.time() - t0

    # uniform-inclusion chi^2 on a fixed draw with overlap > n
    ps = PatchSpec(a=168, b=40, p=48, s=2)  # centered under the boresight
    spec = ViewportSpec(0.0, np.pi / 2, 1.2, 1.2, 48, 48)
    full, _ = dis_samp(pano, ps, spec, 10 ** 7, np.random.default_rng(0))
    m, n, reps = full.n, 100, 2000
    counts = {}
    for r in range(reps):
        ss, _ = dis_samp(pano, ps, spec, n, np.random.default_rng(1000 + r))
        for key in map(tuple, np.round(ss.coords, 12)):
            counts[key] = counts.get(key, 0) + 1
    obs = np.array([counts.get(tuple(k), 0)
                    for k in np.round(full.coords, 12)])
    chi2 = float(((obs - n * reps / m) ** 2 / (n * reps / m)).sum())
    lo, hi = stats.chi2.ppf([0.001, 0.999], df=m - 1)

    a1, _ = dis_samp(pano, ps, spec, n, np.random.default_rng(77))
    a2, _ = dis_samp(pano, ps, spec, n, np.random.default_rng(77))
    bit_identical = (a1.coords.tobytes() == a2.coords.tobytes()
                     and a1.pixels.tobytes() == a2.pixels.tobytes())

    ok = (checked >= 9000 and worst_reeval < 1e-12 and equal_cases > 100
          and lo < chi2 < hi and bit_identical)
    _verdict(3, "sampler conformance", ok,
             f"{checked} draws in {dt:.1f}s, reeval {worst_reeval:.1e} "
             f"(<1e-12), {equal_cases} full-quota cases, chi2 {chi2:.0f} in "
             f"[{lo:.0f},{hi:.0f}] df={m - 1}, bit-identical {bit_identical}")


# --------------------------------------------------------------------- 4 ---

def test_criterion_4_zero_decoder_is_bilinear():
    rng = np.random.default_rng(21)
    worst = 0.0
    for k in range(10):
        pano = make_panorama(30 + k, 64, 128)
        lr = bicubic_downscale(pano, 2)
        cfg = TrainConfig(channels=8, freqs=8, hidden=16, enc_layers=1,
                          seed=k)
        model = build_model(cfg)
        spec = ViewportSpec(
            theta_c=float(rng.uniform(-1.0, 1.0)),
            phi_c=float(rng.uniform(-np.pi, np.pi)),
            fov_h=1.2, fov_v=1.0, h_v=40, w_v=48)
        got = model.rend.render_viewport(lr, spec)
        ref = render_viewport_baseline(lr, spec, "bilinear")
        worst = max(worst, float(np.abs(got - ref).max()))
    ok = worst < 1e-12
    _verdict(4, "untrained model reproduces bilinear skip", ok,
             f"max |render - bilinear| = {worst:.1e} over 10 fixtures")


# --------------------------------------------------------------------- 5 ---

def _fd(f, arr, idx, eps=1e-6):
    old = arr[idx]
    arr[idx] = old + eps
    hi = f()
    arr[idx] = old - eps
    lo = f()
    arr[idx] = old
    return (hi - lo) / (2 * eps)


def test_criterion_5_gradient_checks():
    rng = np.random.default_rng(31)

    def gradcheck(make_out, tensors, tol):
        ad.sum_(make_out()).backward()
        worst = 0.0
        for t in tensors:
            flat = t.data.reshape(-1)
            for idx in rng.choice(flat.size, size=min(4, flat.size),
                                  replace=False):
                num = _fd(lambda: float(make_out().data.sum()),
                          flat, int(idx))
                got = t.grad.reshape(-1)[int(idx)]
                worst = max(worst, abs(got - num) / max(1.0, abs(num)))
            t.grad = None
        return worst

    # one case per differentiable primitive
    a = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(3, 4)))
    m = Tensor(rng.normal(size=(4, 5)))
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)))
    xc = Tensor(rng.normal(size=(1, 2, 6, 6)))
    wc = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.3)
    bc = Tensor(rng.normal(size=3) * 0.1)
    tg = Tensor(rng.normal(size=(2, 5, 7)))
    fy = rng.uniform(0.2, 3.8, size=11)
    fx = rng.uniform(0.2, 5.8, size=11)
    cases = {
        "add": (lambda: ad.add(a, b), [a, b]),
        "sub": (lambda: ad.sub(a, b), [a, b]),
        "mul": (lambda: ad.mul(a, b), [a, b]),
        "div": (lambda: ad.div(a, pos), [a, pos]),
        "pow_const": (lambda: ad.pow_const(pos, 1.7), [pos]),
        "matmul": (lambda: ad.matmul(a, m), [a, m]),
        "sum": (lambda: ad.sum_(a, axis=1), [a]),
        "mean": (lambda: ad.mean_(a, axis=0), [a]),
        "abs": (lambda: ad.abs_(pos), [pos]),
        "exp": (lambda: ad.exp(a), [a]),
        "log": (lambda: ad.log(pos), [pos]),
        "sqrt": (lambda: ad.sqrt(pos), [pos]),
        "cos": (lambda: ad.cos(a), [a]),
        "sin": (lambda: ad.sin(a), [a]),
        "relu": (lambda: ad.relu(pos), [pos]),
        "gelu": (lambda: ad.gelu(a), [a]),
        "softplus": (lambda: ad.softplus(a), [a]),
        "sigmoid": (lambda: ad.sigmoid(a), [a]),
        "reshape": (lambda: ad.reshape(a, (4, 3)), [a]),
        "transpose": (lambda: ad.transpose(tg, (2, 0, 1)), [tg]),
        "concat": (lambda: ad.concat([a, b], axis=1), [a, b]),
        "slice": (lambda: ad.slice_(a, (slice(1, 3), slice(None))), [a]),
        "conv2d": (lambda: ad.conv2d(xc, wc, bc, padding=1), [xc, wc, bc]),
        "gather2d": (lambda: ad.gather2d(tg, np.array([0, 3, 4]),
                                         np.array([1, 6, 2])), [tg]),
        "bilinear_gather": (lambda: ad.bilinear_gather(tg, fy, fx), [tg]),
    }
    worst_prim, worst_name = 0.0, ""
    for name, (fn, tensors) in cases.items():
        e = gradcheck(fn, tensors, 1e-4)
        if e > worst_prim:
            worst_prim, worst_name = e, name

    # straight-through rounding: exact identity gradient by definition
    q = Tensor(rng.normal(size=8) * 5)
    ad.sum_(ad.round_ste(q)).backward()
    ste_ok = np.array_equal(q.grad, np.ones(8))

    # composed loss graph on a toy item, frozen-noise relaxation
    cfg = TrainConfig(patch=16, scale=2, n_samples=32, channels=4, freqs=4,
                      hidden=8, enc_layers=1, res_choices=(24, 32),
                      eval_view=24, quality=85.0)
    pano = make_panorama(8, 64, 128)
    model = build_model(cfg)
    for k in model.store.names():  # move off zero-init so all paths carry grad
        model.store[k].data += 0.01 * rng.normal(
            size=model.store[k].data.shape)
    item = draw_item([pano], cfg, np.random.default_rng(2))
    nb = (cfg.patch // cfg.scale // 8) ** 2
    noise = tuple(rng.uniform(-0.49, 0.49, size=(nb, 64)) for _ in range(3))

    def total():
        return item_losses(model, *item, mode="noise", noise=noise)["total"]

    total().backward()
    grads = {k: model.store[k].grad.copy() for k in model.store.names()}
    worst_e2e, down_reached = 0.0, False
    for k in model.store.names():
        flat = model.store[k].data.reshape(-1)
        gflat = grads[k].reshape(-1)
        order = np.argsort(-np.abs(gflat))[:3]  # largest-gradient entries
        for idx in order:
            num = _fd(lambda: float(total().data), flat, int(idx), eps=1e-5)
            rel = abs(gflat[int(idx)] - num) / max(1e-3, abs(num))
            worst_e2e = max(worst_e2e, rel)
        if k.startswith("down.") and np.abs(gflat).max() > 0:
            down_reached = True

    ok = worst_prim < 1e-4 and ste_ok and worst_e2e < 1e-3 and down_reached
    _verdict(5, "gradient checks", ok,
             f"primitives {worst_prim:.1e} (<1e-4, worst {worst_name}), "
             f"STE identity {ste_ok}, end-to-end {worst_e2e:.1e} (<1e-3), "
             f"downsampler reached {down_reached}")


# --------------------------------------------------------------------- 6 ---

def test_criterion_6_codec():
    # third-party decode of an emitted stream
    pano = make_panorama(7, 2048, 4096)
    lr = bicubic_downscale(pano, 2)
    tables, q, _, stream = fit_quant_tables(lr, 0.30, pano.h, pano.w)
    bpp = 8.0 * len(stream) / (pano.h * pano.w)
    bpp_rel = abs(bpp - 0.30) / 0.30

    pil = np.asarray(Image.open(io.BytesIO(stream)).convert("RGB"),
                     dtype=float).transpose(2, 0, 1) / 255.0
    ours = decode(stream).pixels
    third_party = float(np.abs(pil - ours).mean())

    # unit quantisation tables keep the roundtrip above 50 dB
    rng = np.random.default_rng(17)
    unit = QuantTables(luma=np.ones((8, 8), dtype=np.uint16),
                       chroma=np.ones((8, 8), dtype=np.uint16))
    worst_db = np.inf
    for _ in range(3):
        img = ErpImage(pixels=rng.uniform(0, 1, size=(3, 64, 128)))
        _, s = encode(img, unit)
        worst_db = min(worst_db, psnr(decode(s).pixels, img.pixels))

    # rate model fitted on held-out panoramas, scored on the 4K stream
    fit_blocks = [encode(bicubic_downscale(make_panorama(s, 512, 1024), 2),
                         tables)[0] for s in (1, 2)]
    model = RateModel()
    model.fit(fit_blocks)
    blocks, _ = encode(lr, tables)
    est = model.estimate_rate(Tensor(blocks.y.astype(float)),
                              Tensor(blocks.cb.astype(float)),
                              Tensor(blocks.cr.astype(float))).data
    rate_rel = abs(est - 8.0 * len(stream)) / (8.0 * len(stream))

    ok = (third_party < 0.01 and worst_db >= 50.0 and rate_rel < 0.15
          and bpp_rel < 0.05)
    _verdict(6, "codec", ok,
             f"independent decode mean|d| {third_party:.4f} (<0.01), "
             f"unit-table roundtrip {worst_db:.1f} dB (>=50), "
             f"rate estimate off by {rate_rel:.1%} (<15%), "
             f"4K target 0.30 bpp -> {bpp:.3f} at q={q:.1f} "
             f"({bpp_rel:.1%} <5%)")


# --------------------------------------------------------------------- 8 ---

def test_criterion_8_metric_fixtures():
    rng = np.random.default_rng(41)
    a = rng.uniform(0.2, 0.8, size=(3, 32, 64))
    uniform = psnr(a, a + 1.0 / 255.0)
    self_ssim = ssim(a, a)
    ws_delta = abs(ws_psnr(a, a + 1.0 / 255.0) - uniform)
    ok = (abs(uniform - 48.13) <= 0.01 and self_ssim == 1.0
          and ws_delta < 1e-9)
    _verdict(8, "metric fixtures", ok,
             f"uniform-error psnr {uniform:.4f} dB (48.13 +- 0.01), "
             f"ssim(a,a)={self_ssim}, |ws_psnr - psnr| {ws_delta:.1e} "
             f"(<1e-9)")


# --------------------------------------------------------------------- 9 ---

def test_criterion_9_seam_continuity():
    pano = make_panorama(9, 128, 256)
    rolled = ErpImage(pixels=np.roll(pano.pixels, pano.w // 2, axis=2))
    lr, lr_rolled = bicubic_downscale(pano, 2), bicubic_downscale(rolled, 2)
    spec = ViewportSpec(theta_c=0.2, phi_c=np.pi, fov_h=1.3, fov_v=1.1,
                        h_v=64, w_v=72)
    shifted = ViewportSpec(theta_c=0.2, phi_c=0.0, fov_h=1.3, fov_v=1.1,
                           h_v=64, w_v=72)

    worst_base = 0.0
    for method in ("bilinear", "bicubic"):
        d = np.abs(render_viewport_baseline(lr, spec, method)
                   - render_viewport_baseline(lr_rolled, shifted, method))
        worst_base = max(worst_base, float(d.max()))

    cfg = TrainConfig(channels=8, freqs=8, hidden=16, enc_layers=1)
    model = build_model(cfg)
    rng = np.random.default_rng(3)
    for k in model.store.names():  # non-zero residual exercises the full path
        model.store[k].data += 0.05 * rng.normal(
            size=model.store[k].data.shape)
    worst_learned = float(np.abs(
        model.rend.render_viewport(lr, spec)
        - model.rend.render_viewport(lr_rolled, shifted)).max())

    ok = worst_base < 1e-6 and worst_learned < 1e-6
    _verdict(9, "seam continuity", ok,
             f"baseline {worst_base:.1e}, learned {worst_learned:.1e} "
             f"(both <1e-6)")
