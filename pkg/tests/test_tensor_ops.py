import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echosr import tensor as T
from echosr.tensor import ConvSpec, Tensor

from oracles import bilinear_scalar, conv2d_naive, dft2_naive, max_pool_naive


def t(arr, **kw):
    return Tensor(np.asarray(arr, dtype=np.float32), **kw)


class TestConv2d:
    def test_dirac_kernel_is_identity(self):
        x = t(np.ones((1, 1, 3, 3)))
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        w[0, 0, 1, 1] = 1.0
        out = T.conv2d(x, t(w), None, ConvSpec(1, 1, (3, 3)))
        np.testing.assert_array_equal(out.data, x.data)

    @pytest.mark.parametrize("k", [3, 5, 7, 11, 15, 17])
    def test_dirac_identity_all_kernel_sizes(self, k, rng):
        x = t(rng.standard_normal((1, 2, 20, 20)))
        w = np.zeros((2, 1, k, k), dtype=np.float32)
        w[:, 0, k // 2, k // 2] = 1.0
        out = T.depthwise_conv(x, t(w))
        np.testing.assert_allclose(out.data, x.data, atol=1e-6)

    def test_pointwise_scaling(self):
        x = t([[[[1, 2], [3, 4]]]])
        w = t(np.full((1, 1, 1, 1), 2.0))
        out = T.conv2d(x, w, None, ConvSpec(1, 1, (1, 1), padding=0))
        np.testing.assert_array_equal(out.data, [[[[2, 4], [6, 8]]]])

    def test_all_ones_kernel_center_is_45(self):
        x = t(np.arange(1, 10).reshape(1, 1, 3, 3))
        w = t(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, w, None, ConvSpec(1, 1, (3, 3)))
        assert out.data[0, 0, 1, 1] == 45.0
        expected = conv2d_naive(x.data.astype(np.float64), w.data.astype(np.float64), padding=1)
        np.testing.assert_allclose(out.data, expected, atol=1e-5)

    @pytest.mark.parametrize(
        "case",
        [
            dict(c_in=4, c_out=6, k=3, stride=1, groups=1, padding=1),
            dict(c_in=4, c_out=4, k=3, stride=1, groups=4, padding=1),
            dict(c_in=6, c_out=6, k=3, stride=1, groups=2, padding=0),
            dict(c_in=3, c_out=5, k=3, stride=2, groups=1, padding=1),
            dict(c_in=2, c_out=2, k=3, stride=1, groups=1, padding=2),
            dict(c_in=4, c_out=8, k=5, stride=1, groups=2, padding=2),
        ],
    )
    def test_matches_nested_loop_oracle(self, case, rng):
        x = rng.standard_normal((2, case["c_in"], 7, 8))
        w = rng.standard_normal((case["c_out"], case["c_in"] // case["groups"], case["k"], case["k"]))
        b = rng.standard_normal(case["c_out"])
        spec = ConvSpec(
            case["c_in"], case["c_out"], (case["k"], case["k"]),
            stride=case["stride"], groups=case["groups"], padding=case["padding"],
        )
        out = T.conv2d(t(x), t(w), t(b), spec)
        expect = conv2d_naive(x, w, b, stride=case["stride"], groups=case["groups"], padding=case["padding"])
        np.testing.assert_allclose(out.data, expect, rtol=1e-4, atol=1e-4)
        assert out.data.shape[2:] == spec.out_size(7, 8)

    def test_linearity(self, rng):
        spec = ConvSpec(3, 4, (3, 3))
        w = t(rng.standard_normal((4, 3, 3, 3)))
        x = rng.standard_normal((1, 3, 6, 6)).astype(np.float32)
        y = rng.standard_normal((1, 3, 6, 6)).astype(np.float32)
        a, b = 0.7, -1.3
        lhs = T.conv2d(t(a * x + b * y), w, None, spec).data
        rhs = a * T.conv2d(t(x), w, None, spec).data + b * T.conv2d(t(y), w, None, spec).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)

    def test_group_conv_isolates_groups(self, rng):
        spec = ConvSpec(4, 4, (3, 3), groups=2)
        w = t(rng.standard_normal((4, 2, 3, 3)))
        x = rng.standard_normal((1, 4, 6, 6)).astype(np.float32)
        base = T.conv2d(t(x), w, None, spec).data
        x2 = x.copy()
        x2[0, 3, 2, 2] += 5.0  # perturb channel 3 (second group)
        pert = T.conv2d(t(x2), w, None, spec).data
        np.testing.assert_array_equal(base[:, :2], pert[:, :2])
        assert np.any(base[:, 2:] != pert[:, 2:])

    def test_depthwise_requires_matching_groups(self):
        x = t(np.zeros((1, 4, 5, 5)))
        w = t(np.zeros((4, 2, 3, 3)))
        with pytest.raises(T.ConfigError):
            T.depthwise_conv(x, w, None, ConvSpec(4, 4, (3, 3), groups=2))

    def test_channel_mismatch_reports_dimension(self):
        x = t(np.zeros((1, 3, 5, 5)))
        w = t(np.zeros((4, 4, 3, 3)))
        with pytest.raises(T.ShapeError, match="channels"):
            T.conv2d(x, w, None, ConvSpec(4, 4, (3, 3)))

    def test_nondivisible_groups_is_config_error(self):
        with pytest.raises(T.ConfigError, match="groups"):
            ConvSpec(4, 6, (3, 3), groups=4)

    def test_pointwise_channel_sum(self):
        x = t(np.stack([np.full((2, 2), 3.0), np.full((2, 2), 4.0)])[None])
        w = t(np.ones((1, 2, 1, 1)))
        out = T.pointwise_conv(x, w)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 7.0))

    def test_determinism(self, rng):
        x = rng.standard_normal((2, 3, 9, 9)).astype(np.float32)
        w = rng.standard_normal((5, 3, 3, 3)).astype(np.float32)
        spec = ConvSpec(3, 5, (3, 3))
        a = T.conv2d(t(x), t(w), None, spec).data
        b = T.conv2d(t(x), t(w), None, spec).data
        assert np.array_equal(a, b)


class TestBatchNorm:
    def test_eval_with_unit_stats_is_identityish(self, rng):
        x = t(rng.standard_normal((2, 3, 4, 4)))
        stats = T.BnRunningStats(mean=np.zeros(3, np.float32), var=np.ones(3, np.float32))
        out = T.batch_norm(x, t(np.ones(3)), t(np.zeros(3)), stats, mode="eval")
        np.testing.assert_allclose(out.data, x.data, atol=1e-4)

    def test_train_normalizes_per_channel(self, rng):
        x = t(rng.standard_normal((4, 3, 8, 8)) * 3.0 + 1.5)
        out = T.batch_norm(x, t(np.ones(3)), t(np.zeros(3)), T.BnRunningStats(), mode="train")
        assert np.all(np.abs(out.data.mean(axis=(0, 2, 3))) < 1e-4)
        assert np.all(np.abs(out.data.var(axis=(0, 2, 3)) - 1.0) < 1e-4)

    def test_two_value_closed_form(self):
        x = t(np.array([1.0, 3.0]).reshape(1, 1, 1, 2))
        out = T.batch_norm(x, t(np.ones(1)), t(np.zeros(1)), T.BnRunningStats(), mode="train")
        np.testing.assert_allclose(out.data.reshape(-1), [-1.0, 1.0], atol=1e-4)

    def test_eval_uninitialized_stats_raises(self):
        x = t(np.zeros((1, 2, 2, 2)))
        with pytest.raises(T.ConfigError, match="running stats"):
            T.batch_norm(x, t(np.ones(2)), t(np.zeros(2)), T.BnRunningStats(), mode="eval")

    def test_running_stat_momentum(self):
        stats = T.BnRunningStats(mean=np.zeros(1, np.float32), var=np.ones(1, np.float32))
        x = t(np.array([1.0, 3.0]).reshape(1, 1, 1, 2))
        T.batch_norm(x, t(np.ones(1)), t(np.zeros(1)), stats, mode="train")
        np.testing.assert_allclose(stats.mean, [0.2], atol=1e-6)  # 0.9*0 + 0.1*2
        np.testing.assert_allclose(stats.var, [1.0], atol=1e-6)  # 0.9*1 + 0.1*1


class TestMaxPool:
    def test_constant_input(self):
        out = T.max_pool(t(np.full((1, 2, 16, 16), 2.5)), 8, 8)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 2), 2.5))

    def test_single_peak(self):
        x = np.zeros((1, 1, 8, 8), dtype=np.float32)
        x[0, 0, 3, 5] = 9.0
        out = T.max_pool(t(x), 8, 8)
        np.testing.assert_array_equal(out.data, [[[[9.0]]]])

    def test_ramp_matches_oracle(self):
        x = np.arange(16 * 16, dtype=np.float32).reshape(1, 1, 16, 16)
        out = T.max_pool(t(x), 8, 8)
        np.testing.assert_array_equal(out.data, max_pool_naive(x, 8, 8))

    @pytest.mark.parametrize("h,w", [(7, 9), (33, 17), (72, 40)])
    def test_partial_windows_ceil_mode(self, h, w, rng):
        x = rng.standard_normal((1, 2, h, w))
        out = T.max_pool(t(x), 8, 8)
        assert out.data.shape == (1, 2, -(-h // 8), -(-w // 8))
        np.testing.assert_allclose(out.data, max_pool_naive(x, 8, 8), rtol=1e-6)


class TestBilinear:
    def test_constant_maps_to_constant(self):
        out = T.bilinear_upsample(t(np.full((1, 1, 3, 5), 0.7)), 9, 11)
        np.testing.assert_allclose(out.data, 0.7, atol=1e-6)

    def test_single_source_pixel(self):
        out = T.bilinear_upsample(t(np.full((1, 1, 1, 1), 4.2)), 5, 3)
        np.testing.assert_allclose(out.data, 4.2, atol=1e-6)

    def test_2x2_to_4x4_closed_form(self):
        x = t(np.array([[0.0, 1.0], [0.0, 1.0]]).reshape(1, 1, 2, 2))
        out = T.bilinear_upsample(x, 4, 4)
        expected_cols = np.array([0.0, 0.25, 0.75, 1.0])
        for row in range(4):
            np.testing.assert_allclose(out.data[0, 0, row], expected_cols, atol=1e-6)

    @pytest.mark.parametrize("hw", [(2, 3), (5, 4), (9, 9)])
    @pytest.mark.parametrize("out_hw", [(7, 5), (16, 16), (3, 8)])
    def test_matches_scalar_oracle(self, hw, out_hw, rng):
        x = rng.standard_normal(hw)
        out = T.bilinear_upsample(t(x[None, None]), *out_hw)
        np.testing.assert_allclose(out.data[0, 0], bilinear_scalar(x, *out_hw), rtol=1e-4, atol=1e-5)


class TestPixelShuffle:
    def test_r1_is_identity(self, rng):
        x = t(rng.standard_normal((2, 3, 4, 4)))
        np.testing.assert_array_equal(T.pixel_shuffle(x, 1).data, x.data)

    def test_standard_subpixel_layout(self):
        x = t(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1))
        out = T.pixel_shuffle(x, 2)
        np.testing.assert_array_equal(out.data, [[[[1.0, 2.0], [3.0, 4.0]]]])

    def test_inverse_rearrangement_roundtrip(self, rng):
        x = rng.standard_normal((2, 12, 3, 5)).astype(np.float32)
        out = T.pixel_shuffle(t(x), 2).data
        # invert by the index-inverse rearrangement
        n, oc, oh, ow = out.shape
        back = (
            out.reshape(n, oc, oh // 2, 2, ow // 2, 2)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, 12, 3, 5)
        )
        np.testing.assert_array_equal(back, x)

    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 5))
    @settings(max_examples=25, deadline=None)
    def test_value_multiset_preserved(self, r, h, w):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((1, 2 * r * r, h, w)).astype(np.float32)
        out = T.pixel_shuffle(Tensor(x), r)
        assert sorted(out.data.reshape(-1).tolist()) == sorted(x.reshape(-1).tolist())

    def test_indivisible_channels_raises(self):
        with pytest.raises(T.ShapeError, match="divisible"):
            T.pixel_shuffle(t(np.zeros((1, 3, 2, 2))), 2)


class TestSplitConcat:
    def test_split_60_into_4(self):
        parts = T.split_channels(t(np.zeros((1, 60, 2, 2))), 4)
        assert [p.data.shape[1] for p in parts] == [15, 15, 15, 15]

    def test_split_36_into_4(self):
        parts = T.split_channels(t(np.zeros((1, 36, 2, 2))), 4)
        assert [p.data.shape[1] for p in parts] == [9, 9, 9, 9]

    @given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 5))
    @settings(max_examples=30, deadline=None)
    def test_roundtrip_bit_exact(self, parts, h, w):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 4 * parts, h, w)).astype(np.float32)
        pieces = T.split_channels(Tensor(x), parts)
        back = T.concat_channels(pieces)
        assert np.array_equal(back.data, x)

    def test_indivisible_split_raises(self):
        with pytest.raises(T.ShapeError):
            T.split_channels(t(np.zeros((1, 5, 2, 2))), 2)

    def test_concat_shape_mismatch_raises(self):
        with pytest.raises(T.ShapeError):
            T.concat_channels([t(np.zeros((1, 2, 3, 3))), t(np.zeros((1, 2, 4, 3)))])


class TestElementwise:
    def test_mul_by_ones_is_identity(self, rng):
        x = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        out = T.ew_mul(t(x), t(np.ones_like(x)))
        np.testing.assert_array_equal(out.data, x)

    def test_scale_by_zero_gives_zeros(self, rng):
        x = t(rng.standard_normal((1, 2, 3, 3)))
        np.testing.assert_array_equal(T.scalar_scale(x, 0.0).data, np.zeros_like(x.data))

    def test_mul_definition(self):
        out = T.ew_mul(t([1.0, 2.0]), t([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [3.0, 8.0])

    def test_shape_mismatch_raises(self):
        with pytest.raises(T.ShapeError):
            T.ew_add(t(np.zeros((2, 1, 1, 1))), t(np.zeros((1, 1, 1, 1))))

    def test_channel_affine_and_broadcast(self, rng):
        x = rng.standard_normal((1, 3, 2, 2)).astype(np.float32)
        s = np.array([1.0, 2.0, -1.0], dtype=np.float32)
        out = T.channel_affine(t(x), t(s))
        np.testing.assert_allclose(out.data, x * s[None, :, None, None])
        b = T.broadcast_channels(t(x[:, :1]), 3)
        assert b.data.shape == (1, 3, 2, 2)
        np.testing.assert_array_equal(b.data[0, 2], x[0, 0])


class TestActivation:
    def test_zero_is_zero(self):
        assert T.activation(t(np.zeros(1))).data[0] == 0.0

    def test_asymptote_at_10(self):
        out = T.activation(t(np.array([10.0], dtype=np.float64)))
        assert abs(out.data[0] - 10.0) < 1e-6

    def test_value_at_one_is_normal_cdf(self):
        out = T.activation(t(np.array([1.0], dtype=np.float64)))
        np.testing.assert_allclose(out.data[0], 0.8413447460685429, atol=1e-7)


class TestDft2:
    def test_zero_input_zero_spectrum(self):
        re, im = T.dft2(t(np.zeros((1, 1, 4, 4))))
        assert not np.any(re.data) and not np.any(im.data)

    def test_constant_plane_dc_bin(self):
        re, im = T.dft2(t(np.full((1, 1, 5, 7), 1.5)))
        assert abs(re.data[0, 0, 0, 0] - 1.5 * 35) < 1e-4
        mask = np.ones((5, 7), dtype=bool)
        mask[0, 0] = False
        assert np.all(np.abs(re.data[0, 0][mask]) < 1e-4)
        assert np.all(np.abs(im.data[0, 0]) < 1e-4)

    @given(st.integers(2, 8), st.integers(2, 8))
    @settings(max_examples=12, deadline=None)
    def test_matches_naive_oracle(self, h, w):
        rng = np.random.default_rng(h * 100 + w)
        x = rng.standard_normal((1, 1, h, w))
        re, im = T.dft2(Tensor(x.astype(np.float32)))
        expect = dft2_naive(x[0, 0])
        np.testing.assert_allclose(re.data[0, 0], expect.real, atol=1e-4)
        np.testing.assert_allclose(im.data[0, 0], expect.imag, atol=1e-4)


class TestDebugChecks:
    def test_finite_check_catches_nan(self, monkeypatch):
        monkeypatch.setattr(T, "DEBUG_CHECK_FINITE", True)
        bad = t(np.array([np.inf], dtype=np.float32))
        with pytest.raises(FloatingPointError):
            T.ew_mul(bad, t(np.zeros(1)))
