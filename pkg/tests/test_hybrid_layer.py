import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbcnet import cbc_basis as cb
from cbcnet.errors import ConfigError, StateError
from cbcnet.gradcheck import check_hybrid_layer
from cbcnet.hybrid_layer import HybridConv, cbc_filter_count, effective_variant, hybrid_param_count
from cbcnet.layers import Conv2d
from cbcnet.tensor_core import ConvGeometry
from cbcnet.train import Adam


def g3(c=3, m=64, k=3):
    return ConvGeometry(k, k, c, m, 1, k // 2)


class TestCounts:
    @pytest.mark.parametrize("alpha,m,expected", [(0.0, 64, 0), (1.0, 64, 64), (0.5, 64, 32), (0.5, 3, 2),
                                                  (0.25, 2, 0), (0.75, 2, 2), (0.3, 10, 3)])
    def test_cbc_filter_count(self, alpha, m, expected):
        assert cbc_filter_count(alpha, m) == expected

    def test_split_64(self):
        layer = HybridConv.init(g3(), 0.5, "spfd", seed=0)
        assert layer.m_cbc == 32 and layer.m_std == 32

    def test_alpha_half_spfd_with_bn(self):
        # 32 std filters of 27 weights, 32 CBC filters of 7, 64 biases, 128 BN params
        assert hybrid_param_count(g3(), 0.5, "spfd") + 2 * 64 == 1280

    def test_alpha_zero(self):
        assert hybrid_param_count(g3(), 0.0, "spfd") == 1792

    def test_unit_spatial_one_by_one(self):
        assert hybrid_param_count(ConvGeometry(1, 1, 256, 64), 1.0, "spfd") == 256

    def test_layer_matches_static_count(self):
        for variant in cb.VARIANTS:
            for k in (1, 3):
                layer = HybridConv.init(g3(5, 6, k), 0.5, variant, seed=1)
                assert layer.param_count() == sum(p.size for p in layer.params().values())
                assert layer.param_count() == hybrid_param_count(layer.geom, 0.5, variant)

    @settings(max_examples=200)
    @given(c=st.integers(4, 512), m=st.integers(2, 512), k=st.integers(2, 7))
    def test_compression_ordering(self, c, m, k):
        # F_D (7) beats F_W (C + 4) only once C > 3
        geom = ConvGeometry(k, k, c, m)
        fd = hybrid_param_count(geom, 0.5, "spfd")
        fw = hybrid_param_count(geom, 0.5, "spfw")
        std = hybrid_param_count(geom, 0.0, "spfd")
        assert fd < fw < std

    def test_ordering_breaks_for_few_channels(self):
        geom = ConvGeometry(2, 2, 1, 2)
        assert hybrid_param_count(geom, 0.5, "spfd") > hybrid_param_count(geom, 0.5, "spfw")

    @settings(max_examples=100)
    @given(c=st.integers(1, 64), m=st.integers(1, 64), alpha=st.floats(0, 1), variant=st.sampled_from(sorted(cb.VARIANTS)))
    def test_growth_changes_only_std_term(self, c, m, alpha, variant):
        small = hybrid_param_count(ConvGeometry(3, 3, c, m, 1, 1), alpha, variant)
        big = hybrid_param_count(ConvGeometry(5, 5, c, m, 1, 2), alpha, variant)
        m_std = m - cbc_filter_count(alpha, m)
        assert big - small == m_std * c * (25 - 9)

    def test_one_by_one_forces_unit(self):
        assert effective_variant("sdfw", 1, 1) == ("unit", "weight")
        assert effective_variant("sdfw", 1, 3) == ("direction", "weight")
        layer = HybridConv.init(ConvGeometry(1, 1, 4, 4), 1.0, "spfw", seed=0)
        assert all(isinstance(f.spatial, cb.SpatialUnit) for f in layer.cbc_filters)

    def test_alpha_out_of_range(self):
        with pytest.raises(ConfigError):
            HybridConv(g3(), 1.5, "spfd")


class TestInit:
    def test_same_seed_bit_identical(self):
        a = HybridConv.init(g3(), 0.5, "spfw", seed=7)
        b = HybridConv.init(g3(), 0.5, "spfw", seed=7)
        for name, arr in a.params().items():
            assert arr.tobytes() == b.params()[name].tobytes()

    def test_different_seed_differs(self):
        a = HybridConv.init(g3(), 0.5, "spfw", seed=7)
        b = HybridConv.init(g3(), 0.5, "spfw", seed=8)
        assert not np.array_equal(a.std_weights, b.std_weights)

    @pytest.mark.parametrize("variant", sorted(cb.VARIANTS))
    def test_ranges(self, variant):
        layer = HybridConv.init(g3(8, 64), 0.5, variant, seed=3)
        amp_lim = math.sqrt(2 / (8 * 9))
        std_lim = math.sqrt(6 / (8 * 9 + 64 * 9))
        for f in layer.cbc_filters:
            s = f.spatial
            freqs = [s.wx, s.wy]
            phases = [s.phase_x, s.phase_y] if isinstance(s, cb.SpatialProduct) else [s.phase]
            assert all(0 <= w <= math.pi for w in freqs)
            assert all(0 <= p < 2 * math.pi for p in phases)
            if isinstance(f.feature, cb.FeatureDirect):
                assert abs(f.feature.amp) <= amp_lim and 0 <= f.feature.wc <= math.pi
            else:
                assert np.abs(f.feature.amps).max() <= amp_lim
        assert np.abs(layer.std_weights).max() <= std_lim
        np.testing.assert_array_equal(layer.bias, 0.0)


class TestMaterialize:
    def test_alpha_zero_is_std(self):
        layer = HybridConv.init(g3(2, 4), 0.0, "spfd", seed=0)
        np.testing.assert_array_equal(layer.materialize(), layer.std_weights)

    def test_constant_filter_all_ones(self):
        layer = HybridConv(ConvGeometry(3, 3, 1, 1), 1.0, "spfd")
        layer.feature[0] = [1.0, 0.0, 0.0]
        np.testing.assert_array_equal(layer.materialize(), np.ones((1, 1, 3, 3)))

    def test_cbc_first_then_std(self):
        layer = HybridConv.init(ConvGeometry(3, 3, 2, 2), 0.5, "sdfw", seed=4)
        w = layer.materialize()
        ref = cb.synthesize_weights(layer.cbc_filters[0], 3, 3, 2)
        np.testing.assert_array_equal(w[0], ref)
        np.testing.assert_array_equal(w[1], layer.std_weights[0])


class TestForwardBackward:
    def test_backward_before_forward(self):
        layer = HybridConv.init(g3(2, 2), 0.5, "spfd", seed=0)
        with pytest.raises(StateError):
            layer.backward(np.zeros((1, 2, 3, 3)))

    def test_zero_upstream(self):
        layer = HybridConv.init(g3(2, 4), 0.5, "spfw", seed=0)
        out = layer.forward(np.random.default_rng(0).normal(size=(2, 2, 5, 5)))
        gx = layer.backward(np.zeros_like(out))
        assert not gx.any()
        assert all(not g.any() for g in layer.grad.values())

    def test_alpha_zero_matches_plain_conv(self):
        geom = ConvGeometry(3, 3, 3, 4, 2, 1)
        layer = HybridConv.init(geom, 0.0, "spfd", seed=5)
        layer.bias[...] = np.arange(4.0)
        conv = Conv2d(geom, layer.std_weights.copy(), layer.bias.copy())
        x = np.random.default_rng(1).normal(size=(2, 3, 7, 7))
        a, b = layer.forward(x), conv.forward(x)
        assert a.tobytes() == b.tobytes()
        r = np.random.default_rng(2).normal(size=a.shape)
        assert layer.backward(r).tobytes() == conv.backward(r).tobytes()
        assert layer.grad["std_weights"].tobytes() == conv.grad["weights"].tobytes()
        assert layer.grad["bias"].tobytes() == conv.grad["bias"].tobytes()

    def test_alpha_zero_adam_trajectory(self):
        geom = ConvGeometry(3, 3, 2, 3, 1, 1)
        layer = HybridConv.init(geom, 0.0, "spfw", seed=9)
        conv = Conv2d(geom, layer.std_weights.copy(), layer.bias.copy())
        opt_a, opt_b = Adam(), Adam()
        rng = np.random.default_rng(3)
        for _ in range(5):
            x = rng.normal(size=(2, 2, 5, 5))
            oa, ob = layer.forward(x), conv.forward(x)
            layer.backward(oa)
            conv.backward(ob)
            opt_a.step({"w": layer.std_weights, "b": layer.bias},
                       {"w": layer.grad["std_weights"], "b": layer.grad["bias"]})
            opt_b.step({"w": conv.weights, "b": conv.bias}, {"w": conv.grad["weights"], "b": conv.grad["bias"]})
            assert layer.std_weights.tobytes() == conv.weights.tobytes()

    @pytest.mark.parametrize("variant", sorted(cb.VARIANTS))
    @pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
    @pytest.mark.parametrize("kernel", [1, 3])
    def test_gradcheck(self, variant, alpha, kernel):
        for seed in range(3):
            r = check_hybrid_layer(variant, alpha, kernel, seed)
            assert r.passed, r.line()

    def test_cbc_filter_grads_layout(self):
        layer = HybridConv.init(g3(2, 4), 0.5, "spfd", seed=2)
        out = layer.forward(np.ones((1, 2, 4, 4)))
        layer.backward(np.ones_like(out))
        grads = layer.cbc_filter_grads()
        assert len(grads) == 2 and grads[0].variant == ("product", "direct")


class TestSerialization:
    @pytest.mark.parametrize("variant", sorted(cb.VARIANTS))
    @pytest.mark.parametrize("k", [1, 3])
    def test_json_round_trip_exact(self, variant, k):
        layer = HybridConv.init(g3(3, 5, k), 0.5, variant, seed=6)
        layer.bias[...] = np.random.default_rng(0).normal(size=5)
        text = json.dumps(layer.state_dict())
        back = HybridConv.from_state(json.loads(text))
        for name, arr in layer.params().items():
            assert arr.tobytes() == back.params()[name].tobytes()
        assert back.materialize().tobytes() == layer.materialize().tobytes()

    def test_state_fields(self):
        d = HybridConv.init(g3(2, 2), 1.0, "sdfd", seed=0).state_dict()
        assert set(d) >= {"variant", "alpha", "geom", "cbc", "std_weights", "bias"}
        assert d["variant"] == ["direction", "direct"]
