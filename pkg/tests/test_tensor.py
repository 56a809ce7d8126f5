import numpy as np
import pytest

from eranet.tensor import (
    ConvKernel,
    DepthwiseKernel,
    PadSpec,
    Tape,
    Tensor4,
    absolute,
    add,
    backward,
    channel_vector,
    concat_channels,
    conv2d,
    crop,
    crop_center,
    depthwise_conv2d,
    div,
    downsample2x_avg,
    global_pool_spatial,
    gradient_check,
    layer_norm_channel,
    mean_all,
    mul,
    pad_channel_constant,
    pool_over_channels,
    power,
    prelu,
    relu,
    sigmoid,
    sqrt,
    sub,
    sum_all,
)
from oracles import conv2d_loops, depthwise_loops


def kernel(w, b=None):
    return ConvKernel(Tensor4(np.asarray(w, dtype=np.float64)),
                      None if b is None else channel_vector(b))


class TestTensor4:
    def test_requires_rank4(self):
        with pytest.raises(ValueError):
            Tensor4(np.zeros((3, 3)))

    def test_shape_and_item(self):
        t = Tensor4(np.full((1, 1, 1, 1), 2.5))
        assert t.shape == (1, 1, 1, 1)
        assert t.item() == 2.5


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = Tensor4(rng.standard_normal((2, 3, 5, 5)))
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        y = conv2d(x, kernel(w), padding=1)
        np.testing.assert_array_equal(y.data, x.data)

    def test_padding_contributes_zero(self):
        x = Tensor4(np.full((1, 1, 1, 1), 3.25))
        y = conv2d(x, kernel(np.ones((1, 1, 3, 3))), padding=1)
        assert y.shape == (1, 1, 1, 1)
        assert y.item() == 3.25

    def test_matches_nested_loop_oracle(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        got = conv2d(Tensor4(x), kernel(w, b), padding=1).data
        want = conv2d_loops(x, w, b, margin=1)
        assert np.abs(got - want).max() <= 1e-12

    def test_oracle_various_shapes(self, rng):
        for n, c, o, h, w, k, m in [(2, 3, 4, 6, 5, 3, 1), (1, 1, 1, 3, 3, 3, 0), (1, 2, 2, 8, 8, 7, 3)]:
            x = rng.standard_normal((n, c, h, w))
            wt = rng.standard_normal((o, c, k, k))
            b = rng.standard_normal(o)
            got = conv2d(Tensor4(x), kernel(wt, b), padding=m).data
            want = conv2d_loops(x, wt, b, margin=m)
            assert np.abs(got - want).max() <= 1e-12

    def test_channel_mismatch(self, rng):
        x = Tensor4(rng.standard_normal((1, 2, 4, 4)))
        with pytest.raises(ValueError, match="channel mismatch"):
            conv2d(x, kernel(np.zeros((1, 3, 3, 3))), padding=1)

    def test_empty_spatial(self):
        x = Tensor4(np.zeros((1, 1, 0, 3)))
        with pytest.raises(ValueError, match="empty spatial"):
            conv2d(x, kernel(np.zeros((1, 1, 3, 3))), padding=1)

    def test_linear_in_input_with_zero_bias(self, rng):
        k = kernel(rng.standard_normal((3, 2, 3, 3)))
        x = Tensor4(rng.standard_normal((1, 2, 6, 6)))
        y = Tensor4(rng.standard_normal((1, 2, 6, 6)))
        a, b = 1.7, -0.4
        lhs = conv2d(Tensor4(a * x.data + b * y.data), k, padding=1).data
        rhs = a * conv2d(x, k, padding=1).data + b * conv2d(y, k, padding=1).data
        assert np.abs(lhs - rhs).max() <= 1e-10 * max(1.0, np.abs(rhs).max())

    def test_constant_padspec(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        w = rng.standard_normal((2, 2, 3, 3))
        vals = np.array([0.5, -1.5])
        got = conv2d(Tensor4(x), kernel(w), PadSpec(1, channel_vector(vals))).data
        xp = np.stack(
            [np.pad(x[0, c], 1, constant_values=vals[c]) for c in range(2)]
        )[None]
        want = conv2d_loops(xp, w, None, margin=0)
        assert np.abs(got - want).max() <= 1e-12


class TestDepthwise:
    def test_identity(self, rng):
        x = Tensor4(rng.standard_normal((1, 3, 4, 4)))
        w = np.zeros((3, 1, 3, 3))
        w[:, 0, 1, 1] = 1.0
        y = depthwise_conv2d(x, DepthwiseKernel(Tensor4(w)), padding=1)
        np.testing.assert_array_equal(y.data, x.data)

    def test_channel_isolation(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        w = np.zeros((2, 1, 3, 3))
        w[1, 0, 1, 1] = 1.0  # zero on channel 0, identity on channel 1
        y = depthwise_conv2d(Tensor4(x), DepthwiseKernel(Tensor4(w)), padding=1).data
        assert np.all(y[:, 0] == 0)
        np.testing.assert_array_equal(y[:, 1], x[:, 1])

    def test_perturbation_isolation(self, rng):
        x = rng.standard_normal((1, 3, 5, 5))
        w = rng.standard_normal((3, 1, 3, 3))
        dk = DepthwiseKernel(Tensor4(w))
        base = depthwise_conv2d(Tensor4(x), dk, padding=1).data
        x2 = x.copy()
        x2[0, 1] += rng.standard_normal((5, 5))
        moved = depthwise_conv2d(Tensor4(x2), dk, padding=1).data
        np.testing.assert_array_equal(base[:, 0], moved[:, 0])
        np.testing.assert_array_equal(base[:, 2], moved[:, 2])
        assert np.abs(base[:, 1] - moved[:, 1]).max() > 0

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((2, 3, 6, 5))
        w = rng.standard_normal((3, 1, 3, 3))
        b = rng.standard_normal(3)
        got = depthwise_conv2d(Tensor4(x), DepthwiseKernel(Tensor4(w), channel_vector(b)), padding=1).data
        want = depthwise_loops(x, w, b, margin=1)
        assert np.abs(got - want).max() <= 1e-12

    def test_channel_mismatch(self, rng):
        x = Tensor4(rng.standard_normal((1, 2, 4, 4)))
        with pytest.raises(ValueError, match="channel mismatch"):
            depthwise_conv2d(x, DepthwiseKernel(Tensor4(np.zeros((3, 1, 3, 3)))), padding=1)


class TestPadCrop:
    def test_zero_margin_identity(self, rng):
        x = Tensor4(rng.standard_normal((1, 2, 3, 3)))
        y = pad_channel_constant(x, 0, np.zeros(2))
        np.testing.assert_array_equal(y.data, x.data)

    def test_direct_construction(self):
        x = Tensor4(np.full((1, 1, 1, 1), 7.0))
        y = pad_channel_constant(x, 1, np.array([2.0]))
        want = np.full((3, 3), 2.0)
        want[1, 1] = 7.0
        np.testing.assert_array_equal(y.data[0, 0], want)

    def test_round_trip(self, rng):
        x = Tensor4(rng.standard_normal((2, 3, 4, 5)))
        padded = pad_channel_constant(x, 2, rng.standard_normal(3))
        back = crop_center(padded, 2)
        np.testing.assert_array_equal(back.data, x.data)

    def test_value_length_mismatch(self, rng):
        with pytest.raises(ValueError, match="length"):
            pad_channel_constant(Tensor4(rng.standard_normal((1, 2, 3, 3))), 1, np.zeros(3))


class TestPooling:
    def test_constant_channel(self):
        x = Tensor4(np.full((1, 2, 3, 3), 0.7))
        for mode in ("avg", "max"):
            assert np.allclose(global_pool_spatial(x, mode).data, 0.7)

    def test_half_and_half(self):
        plane = np.zeros((1, 1, 2, 4))
        plane[0, 0, :, 2:] = 1.0
        assert global_pool_spatial(Tensor4(plane), "avg").item() == 0.5
        assert global_pool_spatial(Tensor4(plane), "max").item() == 1.0

    def test_spatial_matches_flat_loop(self, rng):
        x = rng.standard_normal((2, 3, 4, 5))
        for mode, fn in (("avg", np.mean), ("max", np.max)):
            got = global_pool_spatial(Tensor4(x), mode).data
            for n in range(2):
                for c in range(3):
                    flat = [x[n, c, i, j] for i in range(4) for j in range(5)]
                    assert got[n, c, 0, 0] == pytest.approx(fn(flat), abs=1e-15)

    def test_channel_pool_single_channel(self, rng):
        x = Tensor4(rng.standard_normal((1, 1, 3, 3)))
        for mode in ("avg", "max"):
            np.testing.assert_array_equal(pool_over_channels(x, mode).data, x.data)

    def test_channel_pool_two_values(self):
        x = np.zeros((1, 2, 3, 3))
        x[0, 0] = 0.2
        x[0, 1] = 0.8
        assert np.allclose(pool_over_channels(Tensor4(x), "avg").data, 0.5)
        assert np.allclose(pool_over_channels(Tensor4(x), "max").data, 0.8)

    def test_channel_pool_matches_loop(self, rng):
        x = rng.standard_normal((2, 4, 3, 3))
        got_avg = pool_over_channels(Tensor4(x), "avg").data
        got_max = pool_over_channels(Tensor4(x), "max").data
        for n in range(2):
            for i in range(3):
                for j in range(3):
                    col = [x[n, c, i, j] for c in range(4)]
                    assert got_avg[n, 0, i, j] == pytest.approx(np.mean(col), abs=1e-15)
                    assert got_max[n, 0, i, j] == np.max(col)


class TestActivations:
    def test_prelu_cases(self):
        x = Tensor4(np.array([2.0, -1.0]).reshape(1, 1, 1, 2))
        y = prelu(x, np.array([0.25]))
        assert y.data.ravel().tolist() == [2.0, -0.25]

    def test_prelu_slope_one_identity(self, rng):
        x = Tensor4(rng.standard_normal((1, 3, 4, 4)))
        np.testing.assert_array_equal(prelu(x, np.ones(3)).data, x.data)

    def test_prelu_idempotent_composition(self, rng):
        x = Tensor4(rng.standard_normal((1, 2, 4, 4)))
        s = np.array([0.3, 0.7])
        once = prelu(x, s)
        again = prelu(once, np.ones(2))
        np.testing.assert_array_equal(once.data, again.data)

    def test_prelu_length_mismatch(self, rng):
        with pytest.raises(ValueError):
            prelu(Tensor4(rng.standard_normal((1, 2, 3, 3))), np.ones(3))

    def test_sigmoid_zero(self):
        assert sigmoid(Tensor4(np.zeros((1, 1, 1, 1)))).item() == 0.5

    def test_sigmoid_saturation_no_overflow(self):
        with np.errstate(over="raise"):
            hi = sigmoid(Tensor4(np.full((1, 1, 1, 1), 40.0))).item()
            lo = sigmoid(Tensor4(np.full((1, 1, 1, 1), -500.0))).item()
            big = sigmoid(Tensor4(np.full((1, 1, 1, 1), 500.0))).item()
        assert abs(hi - 1.0) <= 1e-15
        assert 0.0 < lo < 1e-200 or lo == 0.0  # denormal region allowed
        assert big <= 1.0

    def test_sigmoid_symmetry(self, rng):
        x = rng.standard_normal((1, 2, 5, 5)) * 3
        s = sigmoid(Tensor4(x)).data + sigmoid(Tensor4(-x)).data
        assert np.abs(s - 1.0).max() <= 1e-12

    def test_sigmoid_open_interval(self, rng):
        y = sigmoid(Tensor4(rng.standard_normal((2, 3, 8, 8)) * 10)).data
        assert np.all(y > 0) and np.all(y < 1)


class TestLayerNorm:
    def test_constant_channel_zeros(self):
        x = Tensor4(np.full((1, 2, 4, 4), 3.3))
        y = layer_norm_channel(x, np.ones(2), np.zeros(2))
        assert np.abs(y.data).max() <= 1e-10

    def test_already_normalized(self):
        plane = np.array([[-1.0, 1.0], [1.0, -1.0]])
        x = Tensor4(plane.reshape(1, 1, 2, 2))
        y = layer_norm_channel(x, np.ones(1), np.zeros(1), epsilon=1e-5)
        assert np.abs(y.data[0, 0] - plane).max() <= 1e-4

    def test_zero_gain_gives_shift(self, rng):
        x = Tensor4(rng.standard_normal((1, 2, 3, 3)))
        y = layer_norm_channel(x, np.zeros(2), np.array([1.5, -0.5]))
        assert np.allclose(y.data[:, 0], 1.5) and np.allclose(y.data[:, 1], -0.5)

    def test_epsilon_positive(self, rng):
        with pytest.raises(ValueError):
            layer_norm_channel(Tensor4(rng.standard_normal((1, 1, 2, 2))), np.ones(1), np.zeros(1), epsilon=0.0)


class TestBackward:
    def test_sum_gradient_ones(self, rng):
        x = Tensor4(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        with Tape() as tape:
            s = sum_all(x)
        backward(tape, s)
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_quadratic_gradient(self):
        x = Tensor4(np.full((1, 1, 1, 1), 3.0), requires_grad=True)
        with Tape() as tape:
            s = sum_all(mul(x, x))
        backward(tape, s)
        assert x.grad.item() == pytest.approx(6.0)

    def test_non_scalar_output_rejected(self, rng):
        x = Tensor4(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            y = mul(x, x)
        with pytest.raises(ValueError, match=r"\(1,1,1,1\)"):
            backward(tape, y)

    def test_output_off_tape_rejected(self, rng):
        x = Tensor4(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            mul(x, x)
        stranger = Tensor4(np.zeros((1, 1, 1, 1)))
        with pytest.raises(ValueError, match="not produced"):
            backward(tape, stranger)

    def test_reuse_accumulates(self, rng):
        x = Tensor4(np.full((1, 1, 1, 1), 2.0), requires_grad=True)
        with Tape() as tape:
            y = add(mul(x, x), mul(x, 3.0))  # x^2 + 3x
            s = sum_all(y)
        backward(tape, s)
        assert x.grad.item() == pytest.approx(7.0)

    @pytest.mark.parametrize(
        "name",
        ["conv", "depthwise", "pad", "ln_channel", "ln_sample", "prelu", "pool_avg",
         "pool_max", "chan_avg", "chan_max", "down", "crop", "concat", "abs",
         "sqrt", "power", "div", "sigmoid", "relu", "clamp_inside"],
    )
    def test_op_gradients_match_finite_differences(self, name, rng):
        x = Tensor4(rng.standard_normal((2, 2, 6, 6)), requires_grad=True)
        pos = Tensor4(rng.uniform(0.5, 2.0, (2, 2, 6, 6)), requires_grad=True)
        w = Tensor4(rng.standard_normal((3, 2, 3, 3)) * 0.4, requires_grad=True)
        b = channel_vector(rng.standard_normal(3) * 0.2, requires_grad=True)
        dw = Tensor4(rng.standard_normal((2, 1, 3, 3)) * 0.4, requires_grad=True)
        g = channel_vector(rng.standard_normal(2) + 1.2, requires_grad=True)
        s = channel_vector(rng.standard_normal(2) * 0.3, requires_grad=True)

        def proj(t):
            # random but shape-deterministic projection breaks any symmetry of
            # the op that would hide gradient errors behind invariances
            ref = np.random.default_rng(99).standard_normal(t.shape)
            return mean_all(mul(t, Tensor4(ref)))

        builders = {
            "conv": (lambda: proj(conv2d(x, ConvKernel(w, b), padding=1)), [x, w, b]),
            "depthwise": (lambda: proj(depthwise_conv2d(x, DepthwiseKernel(dw, s), padding=1)), [x, dw, s]),
            "pad": (lambda: proj(pad_channel_constant(x, 1, s)), [x, s]),
            "ln_channel": (lambda: proj(layer_norm_channel(x, g, s)), [x, g, s]),
            "ln_sample": (lambda: proj(layer_norm_channel(x, g, s, scope="sample")), [x, g, s]),
            "prelu": (lambda: proj(prelu(x, g)), [x, g]),
            "pool_avg": (lambda: proj(global_pool_spatial(x, "avg")), [x]),
            "pool_max": (lambda: proj(global_pool_spatial(x, "max")), [x]),
            "chan_avg": (lambda: proj(pool_over_channels(x, "avg")), [x]),
            "chan_max": (lambda: proj(pool_over_channels(x, "max")), [x]),
            "down": (lambda: proj(downsample2x_avg(x)), [x]),
            "crop": (lambda: proj(crop(x, 1, 0, 2, 1)), [x]),
            "concat": (lambda: proj(concat_channels([x, mul(x, 2.0)])), [x]),
            "abs": (lambda: proj(absolute(x)), [x]),
            "sqrt": (lambda: proj(sqrt(pos)), [pos]),
            "power": (lambda: proj(power(pos, 0.3)), [pos]),
            "div": (lambda: proj(div(x, pos)), [x, pos]),
            "sigmoid": (lambda: proj(sigmoid(x)), [x]),
            "relu": (lambda: proj(relu(x)), [x]),
            "clamp_inside": (lambda: proj(sub(x, 0.001)), [x]),
        }
        run, params = builders[name]
        assert gradient_check(run, params, step=1e-5) <= 1e-6


class TestFiniteInvariant:
    def test_chain_stays_finite(self, rng):
        x = Tensor4(rng.standard_normal((1, 3, 8, 8)) * 5)
        k = ConvKernel(Tensor4(rng.standard_normal((3, 3, 3, 3))), channel_vector(rng.standard_normal(3)))
        y = sigmoid(layer_norm_channel(conv2d(x, k, padding=1), np.ones(3), np.zeros(3)))
        assert np.all(np.isfinite(y.data))
