import numpy as np
import pytest
from PIL import Image

from sarcnet.autodiff import Tensor
from sarcnet.errors import DimensionError
from sarcnet.explain import Heatmap, _normalize, gradcam, overlay, \
    read_heatmap, write_heatmap
from sarcnet.imageops import GrayImage
from sarcnet.model import SarcNetConfig, init_params


def tiny_params(seed=0):
    cfg = SarcNetConfig(input_size=32, stage_widths=(4, 4, 8, 8),
                        embed_dim=4, feature_dim=5, seed=seed)
    return init_params(cfg)


def random_inputs(rng):
    img = Tensor(rng.normal(size=(3, 32, 32)).astype(np.float32))
    feats = Tensor(rng.normal(size=(5,)).astype(np.float32))
    return img, feats


class TestGradcam:
    def test_shape_matches_model_input(self, rng):
        params = tiny_params()
        heatmap = gradcam(params, *random_inputs(rng))
        assert heatmap.values.shape == (32, 32)

    def test_bounded_and_finite_on_many_inputs(self, rng):
        params = tiny_params(seed=4)
        for _ in range(10):
            hm = gradcam(params, *random_inputs(rng))
            assert np.all(np.isfinite(hm.values))
            assert hm.values.min() >= 0.0
            assert hm.values.max() <= 1.0

    def test_max_is_one_unless_zero(self, rng):
        params = tiny_params(seed=1)
        hm = gradcam(params, *random_inputs(rng))
        if hm.values.any():
            assert hm.values.max() == pytest.approx(1.0)

    def test_all_zero_raw_map_stays_zero(self, rng):
        params = tiny_params(seed=2)
        # cutting the image embedding out of the head zeroes the gradient
        # flowing into the final stage, hence the raw map
        params.tensors["head.0.weight"].data[:, :4] = 0.0
        hm = gradcam(params, *random_inputs(rng))
        assert np.all(hm.values == 0.0)

    def test_clears_parameter_gradients(self, rng):
        params = tiny_params(seed=3)
        gradcam(params, *random_inputs(rng))
        for t in params.tensors.values():
            assert np.all(t.grad == 0.0)

    def test_batch_of_one_accepted(self, rng):
        params = tiny_params()
        img = Tensor(rng.normal(size=(1, 3, 32, 32)).astype(np.float32))
        feats = Tensor(rng.normal(size=(1, 5)).astype(np.float32))
        assert gradcam(params, img, feats).values.shape == (32, 32)

    def test_multi_cell_rejected(self, rng):
        params = tiny_params()
        img = Tensor(rng.normal(size=(2, 3, 32, 32)).astype(np.float32))
        feats = Tensor(rng.normal(size=(2, 5)).astype(np.float32))
        with pytest.raises(DimensionError):
            gradcam(params, img, feats)

    def test_normalize_scale_invariant(self, rng):
        raw = np.maximum(rng.normal(size=(8, 8)), 0.0)
        np.testing.assert_allclose(_normalize(raw), _normalize(3.7 * raw),
                                   atol=1e-12)

    def test_normalize_guards(self):
        assert np.all(_normalize(np.zeros((4, 4))) == 0.0)
        assert np.all(_normalize(np.full((4, 4), 2.0)) == 1.0)


class TestOverlay:
    def test_zero_heatmap_blue_tint(self, tmp_path, rng):
        img = GrayImage(rng.uniform(0.2, 0.8, size=(16, 16)))
        hm = Heatmap(np.zeros((16, 16), np.float32))
        path = tmp_path / "o.png"
        overlay(img, hm, path)
        arr = np.asarray(Image.open(path)).astype(float)
        assert arr.shape == (16, 16, 3)
        assert np.all(arr[:, :, 2] > arr[:, :, 0])  # blue beats red

    def test_saturated_heatmap_red_tint(self, tmp_path, rng):
        img = GrayImage(rng.uniform(0.2, 0.8, size=(16, 16)))
        hm = Heatmap(np.ones((16, 16), np.float32))
        path = tmp_path / "o.png"
        overlay(img, hm, path)
        arr = np.asarray(Image.open(path)).astype(float)
        assert np.all(arr[:, :, 0] > arr[:, :, 2])  # red beats blue

    def test_dimension_mismatch(self, tmp_path, rng):
        img = GrayImage(rng.uniform(size=(16, 16)))
        hm = Heatmap(np.zeros((8, 8), np.float32))
        with pytest.raises(DimensionError):
            overlay(img, hm, tmp_path / "o.png")

    def test_output_dimensions(self, tmp_path, rng):
        img = GrayImage(rng.uniform(size=(24, 20)))
        hm = Heatmap(rng.uniform(size=(24, 20)).astype(np.float32))
        path = tmp_path / "o.png"
        overlay(img, hm, path)
        assert Image.open(path).size == (20, 24)  # PIL reports (W, H)


class TestHeatmapDump:
    def test_round_trip(self, tmp_path, rng):
        hm = Heatmap(rng.uniform(size=(12, 9)).astype(np.float32))
        path = tmp_path / "h.hmap"
        write_heatmap(hm, path)
        assert path.read_bytes()[:4] == b"HMAP"
        assert len(path.read_bytes()) == 16 + 4 * 12 * 9
        back = read_heatmap(path)
        np.testing.assert_array_equal(back.values, hm.values)

    def test_heatmap_type_validation(self):
        with pytest.raises(DimensionError):
            Heatmap(np.full((4, 4), 1.5, np.float32))
        with pytest.raises(DimensionError):
            Heatmap(np.full((4, 4), np.nan, np.float32))
