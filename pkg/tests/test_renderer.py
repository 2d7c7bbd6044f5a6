"""Renderer: residual identity, ensemble invariants, seam equivariance, grads."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odiview.autodiff import Tensor
from odiview.geometry import ViewportSpec
from odiview.nn import ParamStore
from odiview.renderer import (
    Downsampler,
    ModelConfig,
    ViewportRenderer,
    local_ensemble,
    render_viewport_baseline,
)
from odiview.resample import ErpImage, bicubic_downscale


def fresh_model(seed=0, **kw):
    cfg = ModelConfig(**kw)
    store = ParamStore(seed)
    return store, ViewportRenderer(store, cfg), cfg


def random_lr(seed, h=32, w=64):
    return ErpImage(pixels=np.random.default_rng(seed).random((3, h, w)))


class TestLocalEnsemble:
    @given(r=st.floats(0, 30.99), c=st.floats(0, 30.99))
    def test_partition_of_unity(self, r, c):
        ws = [w for _, _, w in local_ensemble(np.array([r]), np.array([c]))]
        assert np.isclose(sum(ws)[0], 1.0, atol=1e-12)
        assert all(w[0] >= 0 for w in ws)

    def test_containing_cell_saturates_at_center(self):
        ns = local_ensemble(np.array([5.0]), np.array([9.0]))
        by_corner = {(iy[0], ix[0]): w[0] for iy, ix, w in ns}
        assert by_corner[(5, 9)] == 1.0
        assert sum(by_corner.values()) == 1.0

    def test_matches_area_oracle(self):
        rng = np.random.default_rng(3)
        rows, cols = rng.uniform(0, 20, 50), rng.uniform(0, 20, 50)
        total = np.zeros(50)
        for iy, ix, w in local_ensemble(rows, cols):
            # weight = area of the rectangle diagonally opposite this corner
            oy, ox = np.where(iy == np.floor(rows), np.floor(rows) + 1, np.floor(rows)), \
                     np.where(ix == np.floor(cols), np.floor(cols) + 1, np.floor(cols))
            area = np.abs(rows - oy) * np.abs(cols - ox)
            assert np.allclose(w, area, atol=1e-12)
            total += w
        assert np.allclose(total, 1.0, atol=1e-12)


class TestResidualIdentity:
    def test_zero_decoder_is_bilinear_everywhere(self):
        # fresh models have a zeroed last decoder layer: output == skip, bitwise
        for seed in range(4):
            lr = random_lr(seed)
            store, model, _ = fresh_model(seed)
            spec = ViewportSpec(0.3 * seed - 0.5, 0.9 * seed, 1.3, 1.1, 24, 30)
            ours = model.render_viewport(lr, spec)
            base = render_viewport_baseline(lr, spec, "bilinear")
            assert np.array_equal(ours, base)

    def test_unit_residual_shifts_by_one(self):
        # force D(.) = (1,0,0): the ensemble sums its weights, so the red
        # channel moves by exactly 1 iff sum(w_j) == 1 at every query
        lr = random_lr(7)
        store, model, _ = fresh_model(7)
        store["dec.2.b"].data = np.array([1.0, 0.0, 0.0])
        spec = ViewportSpec(0.4, -2.0, 1.2, 1.0, 20, 26)
        out = model.render_viewport(lr, spec, clamp=False)
        base = render_viewport_baseline(lr, spec, "bilinear")
        assert np.allclose(out[0], base[0] + 1.0, atol=1e-12)
        assert np.allclose(out[1:], base[1:], atol=1e-12)


class TestRenderViewport:
    def test_shape_and_range(self):
        lr = random_lr(1)
        _, model, _ = fresh_model(1)
        spec = ViewportSpec(0.0, 0.0, 1.4, 1.2, 17, 23)
        out = model.render_viewport(lr, spec)
        assert out.shape == (3, 17, 23)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_matches_per_pixel_loop(self):
        lr = random_lr(2, h=16, w=32)
        store, model, _ = fresh_model(2)
        store["dec.2.w"].data = np.random.default_rng(0).normal(0, 0.2, size=(48, 3))
        spec = ViewportSpec(0.8, 2.5, 1.1, 1.1, 6, 7)
        full = model.render_viewport(lr, spec, clamp=False)
        z = model.encode(Tensor(lr.pixels))
        from odiview.geometry import ViewportCoord, inverse_map
        for k in [0, 9, 23, 41]:
            v, u = divmod(k, spec.w_v)
            y = ViewportCoord(u=np.array([float(u)]), v=np.array([float(v)]))
            c = inverse_map(spec, y, lr.h, lr.w)
            desc = model._descriptors(spec, y, lr.h, lr.w)
            one = model.query(z, Tensor(lr.pixels), c.x2, c.x1, desc).data
            assert np.allclose(one[:, 0], full[:, v, u], atol=1e-12)

    def test_seam_equivariance_with_live_decoder(self):
        lr = random_lr(5, h=16, w=64)
        store, model, _ = fresh_model(5)
        store["dec.2.w"].data = np.random.default_rng(1).normal(0, 0.3, size=(48, 3))
        spec = ViewportSpec(0.1, np.pi - 1e-3, 1.3, 1.1, 20, 28)  # straddles the seam
        rolled = ErpImage(pixels=np.roll(lr.pixels, 32, axis=2))  # half turn
        spec_r = ViewportSpec(0.1, spec.phi_c - np.pi, 1.3, 1.1, 20, 28)
        a = model.render_viewport(lr, spec)
        b = model.render_viewport(rolled, spec_r)
        assert np.max(np.abs(a - b)) < 1e-9

    def test_planar_descriptor_config(self):
        lr = random_lr(6)
        _, model, _ = fresh_model(6, descriptor="planar")
        spec = ViewportSpec(0.0, 0.0, 1.0, 1.0, 8, 8)
        assert model.render_viewport(lr, spec).shape == (3, 8, 8)
        with pytest.raises(ValueError):
            ModelConfig(descriptor="cubist")


class TestPredictSamples:
    def test_zero_decoder_matches_bilinear_on_patch(self):
        from odiview.autodiff import bilinear_gather
        rng = np.random.default_rng(8)
        store, model, cfg = fresh_model(8)
        lr_patch = Tensor(rng.random((3, 8, 8)))   # p = 16 at s = 2
        z = model.encode(lr_patch, wrap_x=False)
        coords = rng.uniform(-1, 0.99, size=(40, 2))
        desc = rng.normal(size=(40, 10))
        out = model.predict_samples(lr_patch, z, coords, desc)
        local = (coords + 1.0) * 16 / 2.0
        want = bilinear_gather(lr_patch, (local[:, 1] - 0.5) / 2,
                               (local[:, 0] - 0.5) / 2, wrap_x=False)
        assert np.array_equal(out.data, want.data)

    def test_gradients_reach_encoder_and_input(self):
        rng = np.random.default_rng(9)
        store, model, _ = fresh_model(9)
        store["dec.2.w"].data = rng.normal(0, 0.2, size=(48, 3))
        lr_patch = Tensor(rng.random((3, 8, 8)))
        z = model.encode(lr_patch, wrap_x=False)
        coords = rng.uniform(-1, 0.99, size=(25, 2))
        desc = rng.normal(size=(25, 10))
        loss = (model.predict_samples(lr_patch, z, coords, desc) ** 2).sum()
        loss.backward(params=store.tensors())
        assert lr_patch.grad is not None and np.any(lr_patch.grad != 0)
        for name in ("enc.in.w", "ha.w", "hf.w", "hp.w", "dec.0.w"):
            assert store[name].grad is not None and np.any(store[name].grad != 0), name


class TestDownsampler:
    def test_starts_as_exact_bicubic(self):
        img = random_lr(10, h=24, w=48)
        store = ParamStore(0)
        down = Downsampler(store, ModelConfig(scale=2))
        out = down(Tensor(img.pixels), wrap_x=True).data
        want = bicubic_downscale(img, 2).pixels
        assert np.allclose(out, want, atol=1e-12)

    def test_input_gradcheck(self):
        rng = np.random.default_rng(11)
        hr = rng.random((3, 8, 8))
        store = ParamStore(1)
        down = Downsampler(store, ModelConfig(scale=2))
        store["down.3.w"].data = rng.normal(0, 0.1, size=store["down.3.w"].shape)

        def f():
            return (down(Tensor(hr), wrap_x=False) ** 2).sum()

        hr_t = Tensor(hr)
        loss = (down(hr_t, wrap_x=False) ** 2).sum()
        loss.backward()
        eps = 1e-6
        for idx in [(0, 0, 0), (1, 3, 5), (2, 7, 7), (0, 4, 2)]:
            keep = hr[idx]
            hr[idx] = keep + eps
            fp = f().item()
            hr[idx] = keep - eps
            fm = f().item()
            hr[idx] = keep
            want = (fp - fm) / (2 * eps)
            assert abs(hr_t.grad[idx] - want) / max(1.0, abs(want)) < 1e-6

    def test_seam_equivariance(self):
        img = random_lr(12, h=16, w=32)
        store = ParamStore(2)
        down = Downsampler(store, ModelConfig(scale=2))
        store["down.3.w"].data = np.random.default_rng(3).normal(
            0, 0.1, size=store["down.3.w"].shape)
        a = down(Tensor(img.pixels), wrap_x=True).data
        b = down(Tensor(np.roll(img.pixels, 16, axis=2)), wrap_x=True).data
        assert np.allclose(np.roll(a, 8, axis=2), b, atol=1e-12)
