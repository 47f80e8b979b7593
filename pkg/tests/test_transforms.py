import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from antiforge import transforms as T
from antiforge.harness.data import synthetic_faces
from antiforge.metrics import psnr

from oracles import gaussian_blur_loop


@pytest.fixture(scope="module")
def faces():
    return synthetic_faces(0, 3, 64)


def smooth_gradient(h=64, w=64):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    return np.stack([xx, yy, 0.5 * (xx + yy)], axis=-1)


class TestBlur:
    def test_kernel_sums_to_one(self):
        for sigma in (0.3, 1.0, 2.0, 3.0, 7.5):
            k = T.gaussian_kernel1d(sigma)
            assert abs(k.sum() - 1.0) < 1e-9
            assert len(k) == 2 * int(np.ceil(3 * sigma)) + 1

    def test_constant_unchanged(self):
        img = np.full((20, 17, 3), 0.37)
        np.testing.assert_allclose(T.gaussian_blur(img, 3.0), img, atol=1e-6)

    def test_impulse_gives_kernel(self):
        img = np.zeros((21, 21, 3))
        img[10, 10] = 1.0
        k = T.gaussian_kernel1d(1.5)
        r = len(k) // 2
        out = T.gaussian_blur(img, 1.5)
        np.testing.assert_allclose(out[10 - r : 11 + r, 10 - r : 11 + r, 1], np.outer(k, k), atol=1e-15)

    def test_near_delta(self, faces):
        assert np.abs(T.gaussian_blur(faces[0], 0.1) - faces[0]).max() < 1e-3

    def test_matches_loop_oracle(self):
        img = np.random.default_rng(0).uniform(0, 1, (16, 13, 3))
        np.testing.assert_allclose(T.gaussian_blur(img, 1.3), gaussian_blur_loop(img, 1.3), atol=1e-12)

    def test_vjp_is_adjoint(self):
        rng = np.random.default_rng(1)
        x, u = rng.normal(size=(2, 11, 9, 3))
        lhs = np.sum(u * T.blur_linear(x, 2.0))
        rhs = np.sum(T.blur_linear_vjp(u, 2.0) * x)
        assert abs(lhs - rhs) < 1e-10

    def test_invalid_sigma(self):
        with pytest.raises(ValueError):
            T.gaussian_kernel1d(0.0)
        with pytest.raises(ValueError):
            T.TransformSpec("gaussian_blur", {"sigma": -1})


class TestJpeg:
    def test_quality_100_smooth(self):
        img = smooth_gradient()
        assert psnr(img, T.jpeg_roundtrip(img, 100)) > 40.0

    def test_recompression_settles(self, faces):
        once = T.jpeg_roundtrip(faces[0], 75)
        twice = T.jpeg_roundtrip(once, 75)
        thrice = T.jpeg_roundtrip(twice, 75)
        assert np.abs(twice - thrice).max() <= 1.0 / 255 + 1e-12

    def test_constant_gray(self):
        img = np.full((16, 16, 3), 128 / 255)
        assert np.abs(T.jpeg_roundtrip(img, 75) - img).max() <= 1.0 / 255 + 1e-12

    def test_deterministic_and_batched(self, faces):
        a = T.jpeg_roundtrip(faces, 75)
        b = T.jpeg_roundtrip(faces, 75)
        assert a.tobytes() == b.tobytes()
        np.testing.assert_array_equal(a[1], T.jpeg_roundtrip(faces[1], 75))

    def test_errors(self):
        with pytest.raises(ValueError):
            T.jpeg_roundtrip(np.zeros((0, 4, 3)))
        with pytest.raises(ValueError):
            T.jpeg_roundtrip(np.zeros((4, 4, 3)), 0)
        with pytest.raises(ValueError):
            T.TransformSpec("jpeg", {"quality": 101})

    def test_codec_metadata(self):
        meta = T.codec_metadata()
        assert meta["jpeg_subsampling"] == "4:2:0" and meta["pillow"]


class TestReconstruct:
    def test_constant_on_quantisation_grid(self):
        # 5-bit levels k/31 survive the squeeze; off-grid constants move by up to 1/62
        img = np.full((16, 16, 3), 16 / 31)
        assert np.abs(T.reconstruct(img) - img).max() <= 1.0 / 255 + 1e-12
        assert np.abs(T.reconstruct(np.full((16, 16, 3), 0.5)) - 0.5).max() > 1.0 / 255

    def test_salt_and_pepper(self, faces):
        rng = np.random.default_rng(2)
        clean = faces[0]
        noisy = clean.copy()
        mask = rng.random(clean.shape[:2]) < 0.01
        noisy[mask] = rng.choice([0.0, 1.0], size=(mask.sum(), 1))
        out = T.reconstruct(noisy)
        restored = np.all(np.abs(out[mask] - clean[mask]) <= 0.1, axis=-1)
        assert restored.mean() >= 0.95

    @pytest.mark.xfail(
        strict=True,
        reason="JPEG output leaves the 5-bit grid, so a second pass re-quantises by up to one level "
        "(~8/255); measured max 13/255 at 128 px, 70/255 at 64 px",
    )
    def test_stable_under_repetition(self, faces):
        once = T.reconstruct(faces)
        assert np.abs(T.reconstruct(once) - once).max() <= 2.0 / 255 + 1e-12

    def test_second_pass_changes_less_than_the_first(self, faces):
        once = T.reconstruct(faces)
        first = np.abs(once - faces).mean()
        second = np.abs(T.reconstruct(once) - once).mean()
        assert second < first

    def test_pieces(self):
        img = np.random.default_rng(3).uniform(0, 1, (9, 9, 3))
        q = T.bit_quantize(img, 2)
        assert set(np.unique(np.round(q * 3, 9))) <= {0.0, 1.0, 2.0, 3.0}
        med = T.median_filter(img, 3)
        np.testing.assert_allclose(med[4, 4], np.median(img[3:6, 3:6].reshape(-1, 3), axis=0))
        with pytest.raises(ValueError):
            T.median_filter(img, 2)
        with pytest.raises(ValueError):
            T.bit_quantize(img, 0)


class TestChain:
    def test_empty_is_identity(self, faces):
        np.testing.assert_array_equal(T.apply_chain(faces[0], T.IDENTITY), faces[0])

    def test_singleton(self, faces):
        spec = T.TransformSpec.from_dict({"kind": "chain", "steps": [{"kind": "gaussian_blur", "sigma": 1}]})
        np.testing.assert_array_equal(T.apply_chain(faces[0], spec), T.gaussian_blur(faces[0], 1))

    def test_order_matters(self):
        img = np.random.default_rng(4).uniform(0, 1, (32, 32, 3))
        j, b = {"kind": "jpeg", "quality": 75}, {"kind": "gaussian_blur", "sigma": 1}
        first = T.apply_chain(img, T.TransformSpec.from_dict({"kind": "chain", "steps": [j, b]}))
        second = T.apply_chain(img, T.TransformSpec.from_dict({"kind": "chain", "steps": [b, j]}))
        assert np.abs(first - second).max() > 1e-3

    def test_dict_round_trip_and_labels(self):
        d = {"kind": "chain", "steps": [{"kind": "median_filter", "k": 3}, {"kind": "bit_quantize", "bits": 5}]}
        spec = T.TransformSpec.from_dict(d)
        assert spec.to_dict() == d
        assert spec.label == "median_k3+quant_5bit"

    def test_invalid(self):
        with pytest.raises(ValueError):
            T.TransformSpec("sharpen")
        with pytest.raises(ValueError):
            T.TransformSpec.from_dict({"quality": 3})
        with pytest.raises(ValueError):
            T.apply_chain(np.zeros((4, 4, 3)), {"kind": "jpeg"})


class TestSamplers:
    def test_blur_sampler_draws_from_set(self):
        s = T.BlurSampler((1.0, 2.0, 3.0))
        rng = np.random.default_rng(0)
        assert {s(rng).sigma for _ in range(50)} == {1.0, 2.0, 3.0}
        with pytest.raises(ValueError):
            T.BlurSampler(())

    def test_identity_sampler(self):
        t = T.IdentitySampler()(np.random.default_rng(0))
        x = np.ones((2, 2, 3))
        assert t.forward(x) is x and t.vjp(x, x) is x


@settings(max_examples=25, deadline=None)
@given(
    arrays(np.float64, (12, 12, 3), elements=st.floats(0.0, 1.0)),
    st.sampled_from([
        {"kind": "jpeg", "quality": 50},
        {"kind": "gaussian_blur", "sigma": 2.0},
        {"kind": "bit_quantize", "bits": 3},
        {"kind": "median_filter", "k": 5},
    ]),
)
def test_outputs_stay_in_range_and_repeat(img, d):
    spec = T.TransformSpec.from_dict(d)
    out = T.apply_chain(img, spec)
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert out.tobytes() == T.apply_chain(img, spec).tobytes()
