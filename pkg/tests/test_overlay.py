import numpy as np
import pytest

from gatn import global_net, overlay
from gatn.data import netpbm


def gray_image(seed=0):
    return np.random.default_rng(seed).random((3, 112, 56))


def outline_mask(px):
    return np.all(px == overlay.OUTLINE[:, None, None], axis=0)


class TestOverlay:
    def test_zero_map_no_patches_is_grayscale(self):
        img = gray_image()
        out = overlay.overlay_pixels(img, np.zeros((8, 4)), [])
        g = overlay.grayscale(img)
        for c in range(3):
            np.testing.assert_allclose(out[c], g, atol=1e-12)

    def test_blend_formula_sampled(self):
        rng = np.random.default_rng(1)
        img = gray_image(1)
        amap = rng.random((8, 4))
        out = overlay.overlay_pixels(img, amap, [])
        g = overlay.grayscale(img)
        for _ in range(10):
            y, x = rng.integers(0, 112), rng.integers(0, 56)
            a = 0.5 * amap[y // 14, x // 14] / amap.max()
            expected = (1 - a) * g[y, x] + a * overlay.HEAT
            np.testing.assert_allclose(out[:, y, x], expected, atol=1e-12)

    def test_eight_rectangles(self):
        amap = np.zeros((8, 4))
        cells = [(0, 0), (1, 2), (2, 1), (3, 3), (4, 0), (5, 2), (6, 1), (7, 3)]
        for n, (i, j) in enumerate(cells):
            amap[i, j] = n + 1
        img = np.zeros((3, 112, 56))
        ps = global_net.select_patches(amap, img, 8)
        out = overlay.overlay_pixels(img, amap, ps.rects)
        mask = outline_mask(out)
        for i, j in cells:
            t, l = i * 14, j * 14
            assert mask[t, l : l + 14].all() and mask[t + 13, l : l + 14].all()
            assert mask[t : t + 14, l].all() and mask[t : t + 14, l + 13].all()
            assert not mask[t + 1 : t + 13, l + 1 : l + 13].any()
        assert mask.sum() == 8 * (4 * 14 - 4)

    def test_file_written(self, tmp_path):
        img = gray_image(2)
        amap = np.random.default_rng(2).random((8, 4))
        ref = overlay.render_attention_overlay(img, amap, [(0, 0, 14, 14)], tmp_path / "o.ppm")
        back = netpbm.read_image(tmp_path / "o.ppm")
        assert back.shape == (3, 112, 56)
        assert np.max(np.abs(back - ref)) <= 0.5 / 255 + 1e-12

    def test_map_pgm(self, tmp_path):
        amap = np.array([[0.0, 2.0], [1.0, 4.0]])
        overlay.write_attention_map(amap, tmp_path / "m.pgm")
        px = netpbm.to_bytes(netpbm.read_image(tmp_path / "m.pgm"))[0]
        assert px.tolist() == [[0, 128], [64, 255]]

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            overlay.overlay_pixels(gray_image(), np.zeros((4, 4)), [])

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError):
            overlay.render_attention_overlay(gray_image(), np.zeros((8, 4)), None, tmp_path / "missing" / "o.ppm")
