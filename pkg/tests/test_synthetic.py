import numpy as np
import pytest

from odiview.synthetic import make_band_panorama, make_panorama, sphere_directions


class TestSphereDirections:
    def test_unit_norm_grid(self):
        d = sphere_directions(32, 64)
        assert d.shape == (32, 64, 3)
        assert np.allclose(np.linalg.norm(d, axis=-1), 1.0, atol=1e-12)

    def test_pole_rows_point_up_down(self):
        d = sphere_directions(64, 128)
        # top row is near the +y pole, bottom near -y (half-pixel offset)
        assert np.all(d[0, :, 1] > 0.99)
        assert np.all(d[-1, :, 1] < -0.99)


class TestMakePanorama:
    def test_shape_range_and_determinism(self):
        a = make_panorama(7, 64, 128)
        b = make_panorama(7, 64, 128)
        c = make_panorama(8, 64, 128)
        assert a.pixels.shape == (3, 64, 128)
        assert a.pixels.min() >= 0.02 - 1e-12 and a.pixels.max() <= 0.98 + 1e-12
        assert np.array_equal(a.pixels, b.pixels)
        assert not np.array_equal(a.pixels, c.pixels)

    def test_rejects_non_equirect_dims(self):
        with pytest.raises(ValueError):
            make_panorama(0, 64, 100)
        with pytest.raises(ValueError):
            make_panorama(0, 63, 126)

    def test_longitude_seam_is_invisible(self):
        # the jump across the seam must look like any interior column step
        px = make_panorama(3, 128, 256).pixels
        seam = np.abs(px[:, :, 0] - px[:, :, -1]).max()
        interior = np.abs(np.diff(px, axis=2)).max()
        assert seam <= interior * 1.5

    def test_detail_increases_coded_rate(self):
        # busier parameterization must cost more bits through the real codec
        from odiview.codec import encode, tables_for_quality

        t = tables_for_quality(85.0)
        flat = make_panorama(5, 64, 128, detail=0.3)
        busy = make_panorama(5, 64, 128, detail=1.8, beta=0.15)
        assert len(encode(busy, t)[1]) > 1.3 * len(encode(flat, t)[1])


class TestBandPanorama:
    def test_range_seam_and_determinism(self):
        a = make_band_panorama(4, 64, 128)
        b = make_band_panorama(4, 64, 128)
        assert np.array_equal(a.pixels, b.pixels)
        assert a.pixels.min() >= 0.02 - 1e-12 and a.pixels.max() <= 0.98 + 1e-12
        seam = np.abs(a.pixels[:, :, 0] - a.pixels[:, :, -1]).max()
        assert seam <= np.abs(np.diff(a.pixels, axis=2)).max() * 1.5
        with pytest.raises(ValueError):
            make_band_panorama(0, 64, 100)

    def test_energy_concentrates_in_band(self):
        # row spectrum at the equator: band octaves dominate everything
        # above them, unlike the broad-spectrum generator
        px = make_band_panorama(2, 256, 512).pixels
        row = px[0, 128] - px[0, 128].mean()
        spec = np.abs(np.fft.rfft(row))
        # octaves 3..5 at w=512 -> spatial frequencies ~24..96 cycles/rev
        band = spec[20:110].sum()
        above = spec[110:].sum()
        assert band > 4.0 * above
