import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from antiforge.surrogate import (
    ConvNetGenerator,
    ConvNetSpec,
    IdentityGenerator,
    Layer,
    ToyGenerator,
    ToyGeneratorParams,
    WeightFileError,
    convnet_forward,
    convnet_input_vjp,
    load_weights,
    random_convnet,
    save_weights,
    toy_forward,
    toy_input_vjp,
)
from antiforge.transforms import blur_linear

from oracles import central_difference, gaussian_blur_loop, toy_pixel


def worst_fd_error(f, vjp, x, rng, n=100, step=1e-5):
    u = rng.normal(size=x.shape)
    grad = vjp(x, u)

    def scalar(z):
        return float(np.sum(u * f(z)))

    worst = 0.0
    for flat in rng.choice(x.size, size=n, replace=False):
        idx = np.unravel_index(flat, x.shape)
        fd = central_difference(scalar, x, idx, step)
        worst = max(worst, abs(grad[idx] - fd) / max(abs(grad[idx]), abs(fd), 1e-10))
    return worst


def identity_toy(n=2, sigma0=0.0):
    return ToyGeneratorParams(np.stack([np.eye(3)] * n), np.zeros((n, 3)), sigma0)


class TestToy:
    def test_zero_in_zero_out(self):
        np.testing.assert_array_equal(toy_forward(np.zeros((4, 4, 3)), 0, identity_toy()), 0.0)

    @pytest.mark.parametrize("sigma0", [0.0, 1.0, 2.5])
    def test_constant_in_constant_out(self, sigma0):
        p = ToyGeneratorParams.from_seed(3, sigma0=sigma0)
        y = toy_forward(np.full((9, 9, 3), 0.3), 2, p)
        np.testing.assert_allclose(y, np.broadcast_to(y[0, 0], y.shape), atol=1e-12)

    def test_matches_scalar_evaluation(self):
        rng = np.random.default_rng(0)
        p = ToyGeneratorParams.from_seed(5, sigma0=1.0)
        x = rng.uniform(-1, 1, (9, 9, 3))
        blurred = gaussian_blur_loop(x, 1.0)
        y = toy_forward(x, 1, p)
        for i, j in [(0, 0), (4, 4), (8, 2), (3, 7)]:
            np.testing.assert_allclose(y[i, j], toy_pixel(blurred[i, j], p.A[1], p.b[1]), atol=1e-12)

    def test_output_strictly_inside_unit_range(self):
        p = ToyGeneratorParams.from_seed(1)
        y = toy_forward(np.random.default_rng(1).uniform(-1, 1, (8, 8, 3)), 0, p)
        assert np.all(np.abs(y) < 1.0)

    def test_zero_upstream(self):
        p = ToyGeneratorParams.from_seed(1)
        assert np.all(toy_input_vjp(np.zeros((5, 5, 3)), 0, p, np.zeros((5, 5, 3))) == 0)

    def test_finite_differences(self):
        rng = np.random.default_rng(2)
        p = ToyGeneratorParams.from_seed(2)
        x = rng.uniform(-0.9, 0.9, (12, 12, 3))
        err = worst_fd_error(lambda z: toy_forward(z, 3, p), lambda z, u: toy_input_vjp(z, 3, p, u), x, rng)
        assert err < 1e-5

    def test_diagonal_unblurred_gradient(self):
        rng = np.random.default_rng(3)
        d = np.array([0.5, -1.2, 2.0])
        p = ToyGeneratorParams(np.stack([np.diag(d)] * 2), rng.normal(size=(2, 3)), 0.0)
        x = rng.uniform(-1, 1, (4, 4, 3))
        u = rng.normal(size=x.shape)
        slope = 1 - np.tanh(x * d + p.b[0]) ** 2
        np.testing.assert_allclose(toy_input_vjp(x, 0, p, u), slope * d * u, rtol=1e-12)

    def test_label_out_of_range(self):
        g = ToyGenerator(ToyGeneratorParams.from_seed(0))
        with pytest.raises(ValueError):
            g.forward(np.zeros((4, 4, 3)), 5)
        with pytest.raises(ValueError):
            g.forward(np.zeros((4, 4, 3)), -1)

    def test_seeded_params_reproducible(self):
        a, b = ToyGeneratorParams.from_seed(7), ToyGeneratorParams.from_seed(7)
        np.testing.assert_array_equal(a.A, b.A)
        assert not np.array_equal(a.A, ToyGeneratorParams.from_seed(8).A)

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            ToyGeneratorParams(np.eye(3)[None], np.zeros((1, 3)))
        with pytest.raises(ValueError):
            ToyGeneratorParams(np.full((2, 3, 3), np.nan), np.zeros((2, 3)))
        with pytest.raises(ValueError):
            ToyGeneratorParams(np.zeros((2, 3, 3)), np.zeros((2, 3)), -1.0)

    def test_batched_equals_single(self):
        p = ToyGeneratorParams.from_seed(4)
        x = np.random.default_rng(4).uniform(-1, 1, (3, 8, 8, 3))
        batched = toy_forward(x, 1, p)
        np.testing.assert_allclose(batched[2], toy_forward(x[2], 1, p), atol=1e-14)


def conv_layer(out_ch, in_ch, taps, bias):
    """taps: {(o, i, dy, dx): value} with dy, dx in {-1, 0, 1}."""
    w = np.zeros((out_ch, in_ch, 3, 3))
    for (o, i, dy, dx), v in taps.items():
        w[o, i, dy + 1, dx + 1] = v
    return Layer("conv", w, np.asarray(bias, dtype=np.float64))


class TestConvNet:
    def test_zero_weights_give_zero(self):
        spec = ConvNetSpec([conv_layer(3, 5, {}, np.zeros(3)), Layer("tanh")], n_labels=2)
        np.testing.assert_array_equal(convnet_forward(np.ones((4, 4, 3)), 1, spec), 0.0)

    def test_identity_kernel_passes_through(self):
        spec = ConvNetSpec([conv_layer(3, 5, {(k, k, 0, 0): 1.0 for k in range(3)}, np.zeros(3))], n_labels=2)
        x = np.random.default_rng(0).uniform(-1, 1, (6, 5, 3))
        np.testing.assert_allclose(convnet_forward(x, 0, spec), x, atol=1e-15)

    def test_two_layer_hand_case(self):
        # layer 1: box sum of R over the zero-padded 3x3 neighbourhood,
        # +1 from the label-0 plane, bias -4, then ReLU.
        taps = {(0, 0, dy, dx): 1.0 for dy in (-1, 0, 1) for dx in (-1, 0, 1)}
        taps[(0, 3, 0, 0)] = 1.0
        l1 = conv_layer(1, 5, taps, [-4.0])
        l2 = conv_layer(3, 1, {(0, 0, 0, 0): 1.0, (1, 0, 0, 0): -1.0, (2, 0, 0, 0): 0.5}, [0.0, 0.0, 0.0])
        spec = ConvNetSpec([l1, Layer("relu"), l2, Layer("tanh")], n_labels=2)
        x = np.zeros((4, 4, 3))
        x[..., 0] = 1.0
        # box sums of a 4x4 block of ones: 4 at corners, 6 on edges, 9 inside
        h0 = np.array([[1, 3, 3, 1], [3, 6, 6, 3], [3, 6, 6, 3], [1, 3, 3, 1]], dtype=float)  # label 0
        h1 = np.array([[0, 2, 2, 0], [2, 5, 5, 2], [2, 5, 5, 2], [0, 2, 2, 0]], dtype=float)  # label 1
        for label, h in ((0, h0), (1, h1)):
            want = np.tanh(np.stack([h, -h, 0.5 * h], axis=-1))
            np.testing.assert_allclose(convnet_forward(x, label, spec), want, atol=1e-14)

    def test_finite_differences_8x8(self):
        rng = np.random.default_rng(1)
        g = ConvNetGenerator(random_convnet(3, n_labels=3, hidden=(6, 5)))
        x = rng.uniform(-1, 1, (8, 8, 3))
        err = worst_fd_error(lambda z: g.forward(z, 2), lambda z, u: g.input_vjp(z, 2, u), x, rng, step=1e-5)
        assert err < 1e-4

    def test_zero_upstream(self):
        g = ConvNetGenerator(random_convnet(0, hidden=(4,)))
        assert np.all(g.input_vjp(np.zeros((6, 6, 3)), 0, np.zeros((6, 6, 3))) == 0)

    def test_linear_network_gradient_is_chain_product(self):
        rng = np.random.default_rng(2)
        l1 = Layer("conv", rng.normal(size=(4, 5, 3, 3)), rng.normal(size=4))
        l2 = Layer("conv", rng.normal(size=(3, 4, 3, 3)), rng.normal(size=3))
        g = ConvNetGenerator(ConvNetSpec([l1, l2], n_labels=2))
        shape = (5, 5, 3)
        u = rng.normal(size=shape)
        base = g.forward(np.zeros(shape), 0)
        # columns of the Jacobian from unit impulses
        jac_t_u = np.zeros(shape)
        for flat in range(np.prod(shape)):
            e = np.zeros(shape)
            e.flat[flat] = 1.0
            jac_t_u.flat[flat] = np.sum(u * (g.forward(e, 0) - base))
        np.testing.assert_allclose(g.input_vjp(rng.normal(size=shape), 0, u), jac_t_u, atol=1e-10)

    def test_shape_mismatch_names_layer(self):
        with pytest.raises(ValueError, match=r"layer 1 \(conv\)"):
            ConvNetSpec([conv_layer(4, 5, {}, np.zeros(4)), conv_layer(3, 6, {}, np.zeros(3))], n_labels=2)
        with pytest.raises(ValueError, match="3"):
            ConvNetSpec([conv_layer(4, 5, {}, np.zeros(4))], n_labels=2)

    def test_deterministic(self):
        g = ConvNetGenerator(random_convnet(5))
        x = np.random.default_rng(5).uniform(-1, 1, (6, 6, 3))
        assert g.forward(x, 1).tobytes() == g.forward(x.copy(), 1).tobytes()


class TestWeightFile:
    def test_round_trip(self, tmp_path):
        spec = random_convnet(1, n_labels=3, hidden=(4,))
        path = tmp_path / "net.afw"
        save_weights(spec, path)
        assert path.read_bytes()[:4] == b"AFW1"
        back = load_weights(path)
        assert back.n_labels == 3
        assert [l.kind for l in back.layers] == [l.kind for l in spec.layers]
        x = np.random.default_rng(0).uniform(-1, 1, (5, 5, 3))
        # parameters are stored as float32
        np.testing.assert_allclose(
            ConvNetGenerator(back).forward(x, 1), ConvNetGenerator(spec).forward(x, 1), atol=1e-5
        )

    def test_header_layout(self, tmp_path):
        spec = ConvNetSpec([conv_layer(3, 5, {(0, 0, 0, 0): 1.0}, np.zeros(3)), Layer("tanh")], n_labels=2)
        path = tmp_path / "tiny.afw"
        save_weights(spec, path)
        raw = path.read_bytes()
        header = np.frombuffer(raw[4:40], dtype="<u4")
        np.testing.assert_array_equal(header, [2, 1, 4, 3, 5, 3, 3, 4, 0])
        assert len(raw) == 40 + 4 * (3 * 5 * 9 + 3)

    def test_corrupt_files(self, tmp_path):
        spec = random_convnet(1, hidden=(2,))
        good = tmp_path / "good.afw"
        save_weights(spec, good)
        data = good.read_bytes()
        for name, blob in [("magic", b"XXXX" + data[4:]), ("short", data[:-8]), ("long", data + b"\0\0\0\0")]:
            p = tmp_path / f"{name}.afw"
            p.write_bytes(blob)
            with pytest.raises(WeightFileError):
                load_weights(p)


def test_identity_generator():
    g = IdentityGenerator(3)
    x = np.random.default_rng(0).uniform(-1, 1, (4, 4, 3))
    np.testing.assert_array_equal(g.forward(x, 2), x)
    u = np.ones_like(x)
    np.testing.assert_array_equal(g.input_vjp(x, 0, u), u)
    with pytest.raises(ValueError):
        IdentityGenerator(1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**16), st.floats(0.0, 3.0))
def test_toy_constant_preserved_property(seed, sigma0):
    p = ToyGeneratorParams.from_seed(seed, n_labels=2, sigma0=sigma0)
    y = toy_forward(np.full((7, 7, 3), -0.4), 1, p)
    np.testing.assert_allclose(y, np.broadcast_to(y[0, 0], y.shape), atol=1e-12)
    np.testing.assert_allclose(blur_linear(np.full((7, 7, 3), 0.2), sigma0), np.full((7, 7, 3), 0.2), atol=1e-12)
