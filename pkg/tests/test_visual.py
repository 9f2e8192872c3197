"""Visual tower: squeeze-excite algebra, block structure, gradients."""

import numpy as np
import pytest

from survtower import autodiff as ad
from survtower import visual as vz
from survtower.errors import ConfigError, DimensionError
from survtower.params import ParameterStore


def rand_feature(rng, n=1, c=4, f=4, h=3, w=3, dtype=np.float64):
    return ad.Tensor(rng.standard_normal((n, c, f, h, w)), dtype=dtype)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class TestChannelSqueeze:
    def test_constant_map(self):
        t = ad.Tensor(np.full((1, 3, 2, 4, 4), 5.0))
        np.testing.assert_allclose(vz.channel_squeeze(t).data, 5.0)

    def test_zero_channel(self):
        arr = np.ones((1, 2, 2, 3, 3))
        arr[:, 0] = 0.0
        out = vz.channel_squeeze(ad.Tensor(arr))
        assert out.data[0, 0] == 0.0 and out.data[0, 1] == 1.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        arr = rng.standard_normal((1, 2, 3, 4, 4))
        out = vz.channel_squeeze(ad.Tensor(arr, dtype=np.float64))
        for j in range(2):
            acc = 0.0
            for i in range(3):
                for y in range(4):
                    for x in range(4):
                        acc += arr[0, j, i, y, x]
            assert out.data[0, j] == pytest.approx(acc / (3 * 4 * 4), abs=1e-6)

    def test_consistent_with_temporal_pool(self):
        rng = np.random.default_rng(1)
        t = rand_feature(rng)
        a = vz.channel_squeeze(t).data
        b = vz.temporal_preserving_pool(t).data.mean(axis=1)
        np.testing.assert_allclose(a, b, atol=1e-6)


class TestExcitation:
    def test_zero_outer_weight_gives_half(self):
        p = ad.Tensor(np.random.default_rng(2).standard_normal((1, 4)))
        w1 = ad.Tensor(np.zeros((4, 2)))
        w2 = ad.Tensor(np.ones((2, 4)))
        np.testing.assert_allclose(vz.excitation(p, w1, w2).data, 0.5)

    def test_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(3)
        p = ad.Tensor(rng.standard_normal((8, 4)) * 10)
        w1 = ad.Tensor(rng.standard_normal((4, 2)))
        w2 = ad.Tensor(rng.standard_normal((2, 4)))
        g = vz.excitation(p, w1, w2).data
        assert np.all(g > 0) and np.all(g < 1)

    def test_matches_hand_computation(self):
        p = np.array([[0.5, -1.0, 2.0, 0.0]])
        w2 = np.arange(8, dtype=float).reshape(2, 4) / 10
        w1 = np.arange(8, dtype=float).reshape(4, 2) / 10 - 0.3
        hidden = np.maximum(w2 @ p[0], 0)
        expected = sigmoid(w1 @ hidden)
        out = vz.excitation(ad.Tensor(p, dtype=np.float64), ad.Tensor(w1, dtype=np.float64),
                            ad.Tensor(w2, dtype=np.float64))
        np.testing.assert_allclose(out.data[0], expected, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            vz.excitation(ad.Tensor(np.ones((1, 4))), ad.Tensor(np.ones((3, 2))), ad.Tensor(np.ones((2, 4))))


class TestTemporalPool:
    def test_constant_frames(self):
        arr = np.zeros((1, 2, 3, 4, 4))
        for i in range(3):
            arr[:, :, i] = i
        out = vz.temporal_preserving_pool(ad.Tensor(arr))
        assert out.shape == (1, 3, 2)
        for i in range(3):
            np.testing.assert_allclose(out.data[0, i], i)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        arr = rng.standard_normal((1, 2, 3, 4, 5))
        out = vz.temporal_preserving_pool(ad.Tensor(arr, dtype=np.float64))
        for i in range(3):
            for j in range(2):
                assert out.data[0, i, j] == pytest.approx(arr[0, j, i].mean(), abs=1e-6)


class TestPerFrameGates:
    def test_identical_frames_match_global_gate(self):
        rng = np.random.default_rng(5)
        plane = rng.standard_normal((1, 4, 1, 3, 3))
        arr = np.repeat(plane, 5, axis=2)
        t = ad.Tensor(arr, dtype=np.float64)
        w1 = ad.Tensor(rng.standard_normal((4, 2)), dtype=np.float64)
        w2 = ad.Tensor(rng.standard_normal((2, 4)), dtype=np.float64)
        local = vz.per_frame_gates(vz.temporal_preserving_pool(t), w1, w2)
        globl = vz.excitation(ad.reshape(vz.channel_squeeze(t), (1, 4)), w1, w2)
        for i in range(5):
            np.testing.assert_allclose(local.data[0, i], globl.data[0], atol=1e-9)

    def test_zero_outer_weight(self):
        rng = np.random.default_rng(6)
        t = rand_feature(rng)
        w1 = ad.Tensor(np.zeros((4, 2)))
        w2 = ad.Tensor(rng.standard_normal((2, 4)))
        out = vz.per_frame_gates(vz.temporal_preserving_pool(t), w1, w2)
        np.testing.assert_allclose(out.data, 0.5)


class TestJointGate:
    def test_unit_global_passes_local(self):
        rng = np.random.default_rng(7)
        local = ad.Tensor(rng.uniform(0, 1, (1, 3, 4)))
        ones = ad.Tensor(np.ones((1, 4)))
        np.testing.assert_allclose(vz.joint_gate(ones, local).data, local.data)

    def test_product_of_halves(self):
        g = ad.Tensor(np.full((1, 4), 0.5))
        gt = ad.Tensor(np.full((1, 3, 4), 0.5))
        np.testing.assert_allclose(vz.joint_gate(g, gt).data, 0.25)

    def test_ablation_modes(self):
        rng = np.random.default_rng(8)
        g = ad.Tensor(rng.uniform(0.1, 0.9, (1, 4)))
        gt = ad.Tensor(rng.uniform(0.1, 0.9, (1, 3, 4)))
        glob = vz.joint_gate(g, gt, mode="global").data
        for i in range(3):
            np.testing.assert_allclose(glob[0, i], g.data[0])
        np.testing.assert_allclose(vz.joint_gate(g, gt, mode="local").data, gt.data)


class TestChannelSEApply:
    def test_identity_and_annihilation(self):
        rng = np.random.default_rng(9)
        t = rand_feature(rng, c=4, f=3)
        ones = ad.Tensor(np.ones((1, 3, 4)))
        np.testing.assert_allclose(vz.channel_se_apply(t, ones).data, t.data)
        zeros = ad.Tensor(np.zeros((1, 3, 4)))
        np.testing.assert_allclose(vz.channel_se_apply(t, zeros).data, 0.0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(10)
        t = rand_feature(rng, c=2, f=3)
        gate = ad.Tensor(rng.uniform(0, 1, (1, 3, 2)), dtype=np.float64)
        out = vz.channel_se_apply(t, gate)
        for i in range(3):
            for j in range(2):
                np.testing.assert_allclose(
                    out.data[0, j, i], t.data[0, j, i] * gate.data[0, i, j], atol=1e-6
                )


class TestTemporalSE:
    def test_half_gates_when_outer_weights_zero(self):
        rng = np.random.default_rng(11)
        t = rand_feature(rng, c=4, f=4)
        w1 = ad.Tensor(np.zeros((4, 2)), dtype=np.float64)
        w2 = ad.Tensor(rng.standard_normal((2, 4)), dtype=np.float64)
        out = vz.temporal_se(t, w1, w2)
        np.testing.assert_allclose(out.data, 0.25 * t.data, atol=1e-9)

    def test_matches_scalar_reimplementation(self):
        rng = np.random.default_rng(12)
        arr = rng.standard_normal((1, 3, 4, 2, 2))
        w1 = rng.standard_normal((4, 2))
        w2 = rng.standard_normal((2, 4))
        out = vz.temporal_se(ad.Tensor(arr, dtype=np.float64), ad.Tensor(w1, dtype=np.float64),
                             ad.Tensor(w2, dtype=np.float64))
        global_desc = arr[0].mean(axis=(0, 2, 3))            # (f,)
        global_gate = sigmoid(w1 @ np.maximum(w2 @ global_desc, 0))
        expected = np.empty_like(arr)
        for j in range(3):
            local_desc = arr[0, j].mean(axis=(1, 2))         # (f,)
            local_gate = sigmoid(w1 @ np.maximum(w2 @ local_desc, 0))
            for i in range(4):
                expected[0, j, i] = arr[0, j, i] * local_gate[i] * global_gate[i]
        np.testing.assert_allclose(out.data, expected, atol=1e-9)


def tiny_backbone(se_mode="joint", order="channel-first", blocks="both", dtype=np.float64, seed=0):
    config = vz.VisualBackboneConfig(
        frames=4, in_plane=8, widths=(4, 8), blocks_per_stage=1,
        se=vz.SqueezeExciteConfig(ratio=2, mode=se_mode, order=order, blocks=blocks),
    )
    store = ParameterStore()
    vz.init_visual_params(store, config, np.random.default_rng(seed), dtype=dtype)
    return config, store


def conv3d_loop_oracle(x, k, stride, padding):
    """Direct nested-loop cross-correlation for tiny inputs."""
    n, c, f, h, w = x.shape
    ko, _, kf, kh, kw = k.shape
    sf, sh, sw = stride
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding), (padding, padding)))
    of = (f + 2 * padding - kf) // sf + 1
    oh = (h + 2 * padding - kh) // sh + 1
    ow = (w + 2 * padding - kw) // sw + 1
    out = np.zeros((n, ko, of, oh, ow))
    for b in range(n):
        for o in range(ko):
            for i in range(of):
                for y in range(oh):
                    for z in range(ow):
                        patch = xp[b, :, i * sf:i * sf + kf, y * sh:y * sh + kh, z * sw:z * sw + kw]
                        out[b, o, i, y, z] = (patch * k[o]).sum()
    return out


def plain_resblock_oracle(store, prefix, x, stride=1):
    """Residual block without any gating, computed with the loop conv."""
    w1 = store[f"{prefix}.conv1.weight"].data
    b1 = store[f"{prefix}.conv1.bias"].data
    w2 = store[f"{prefix}.conv2.weight"].data
    b2 = store[f"{prefix}.conv2.bias"].data
    s = (stride, stride, stride) if isinstance(stride, int) else tuple(stride)
    branch = conv3d_loop_oracle(x, w1, s, 1) + b1.reshape(-1, 1, 1, 1)
    branch = np.maximum(branch, 0)
    branch = conv3d_loop_oracle(branch, w2, (1, 1, 1), 1) + b2.reshape(-1, 1, 1, 1)
    if f"{prefix}.shortcut.weight" in store:
        shortcut = conv3d_loop_oracle(x, store[f"{prefix}.shortcut.weight"].data, s, 0)
    else:
        shortcut = x
    return shortcut + branch


class TestResBlock:
    def test_zeroed_convs_give_identity(self):
        config, store = tiny_backbone()
        for name, t in store.items():
            if "conv" in name and "stage0.block0" in name:
                t.data = np.zeros_like(t.data)
        rng = np.random.default_rng(13)
        x = rand_feature(rng, c=4, f=4, h=8, w=8)
        out = vz.se_resblock_forward(store, "visual.stage0.block0", x, config.se)
        np.testing.assert_allclose(out.data, x.data, atol=1e-12)

    def test_se_off_equals_plain_residual_oracle(self):
        config, store = tiny_backbone(se_mode="off")
        rng = np.random.default_rng(14)
        x = rng.standard_normal((1, 4, 4, 6, 6))
        out = vz.se_resblock_forward(store, "visual.stage0.block0", ad.Tensor(x, dtype=np.float64), config.se)
        expected = plain_resblock_oracle(store, "visual.stage0.block0", x)
        np.testing.assert_allclose(out.data, expected, atol=1e-6)

    def test_zero_se_outer_weights_quarter_scaling(self):
        config, store = tiny_backbone()
        prefix = "visual.stage0.block0"
        store[f"{prefix}.se_c.w1"].data = np.zeros_like(store[f"{prefix}.se_c.w1"].data)
        store[f"{prefix}.se_t.w1"].data = np.zeros_like(store[f"{prefix}.se_t.w1"].data)
        rng = np.random.default_rng(15)
        x = rng.standard_normal((1, 4, 4, 6, 6))
        out = vz.se_resblock_forward(store, prefix, ad.Tensor(x, dtype=np.float64), config.se)
        plain = plain_resblock_oracle(store, prefix, x)
        branch = plain - x
        # each SE block contributes a 0.25 factor, stacked: 0.0625
        np.testing.assert_allclose(out.data, x + 0.0625 * branch, atol=1e-6)

    def test_stacking_order_changes_output(self):
        rng = np.random.default_rng(16)
        x = rng.standard_normal((1, 4, 4, 6, 6))
        cf, store = tiny_backbone(order="channel-first", seed=3)
        out1 = vz.se_resblock_forward(store, "visual.stage0.block0", ad.Tensor(x, dtype=np.float64), cf.se)
        tf, store2 = tiny_backbone(order="temporal-first", seed=3)
        out2 = vz.se_resblock_forward(store2, "visual.stage0.block0", ad.Tensor(x, dtype=np.float64), tf.se)
        assert not np.allclose(out1.data, out2.data)

    def test_gates_strictly_in_unit_interval(self):
        rng = np.random.default_rng(17)
        t = rand_feature(rng, c=4, f=4)
        w1 = ad.Tensor(rng.standard_normal((4, 2)) * 5, dtype=np.float64)
        w2 = ad.Tensor(rng.standard_normal((2, 4)) * 5, dtype=np.float64)
        g = vz.excitation(vz.channel_squeeze(t), w1, w2)
        gt = vz.per_frame_gates(vz.temporal_preserving_pool(t), w1, w2)
        joint = vz.joint_gate(g, gt).data
        assert np.all(joint > 0) and np.all(joint < 1)

    def test_block_gradcheck(self):
        from survtower import gradcheck as gc

        config, store = tiny_backbone()
        rng = np.random.default_rng(18)
        x_arr = rng.standard_normal((1, 4, 4, 6, 6))
        weights = rng.standard_normal((1, 4, 4, 6, 6))

        def forward():
            out = vz.se_resblock_forward(store, "visual.stage0.block0", ad.Tensor(x_arr, dtype=np.float64), config.se)
            return ad.sum_over(ad.mul(out, weights))

        loss = forward()
        ad.backward(loss)

        def f():
            with ad.no_grad():
                return float(forward().data)

        worst = 0.0
        for name, tensor in store.items():
            if tensor.grad is None:
                continue
            res = gc.check_tensor_grad(name, f, tensor.data, tensor.grad, rng, n_samples=3)
            worst = max(worst, res.max_rel_error)
        assert worst <= 1e-4, f"block gradient mismatch: {worst:.2e}"

    def test_shared_weights_accumulate_both_paths(self):
        # the shared bottleneck gradient must include the global path and
        # every per-frame path; silencing the frame paths must change it
        config, store = tiny_backbone()
        rng = np.random.default_rng(19)
        t = rand_feature(rng, c=4, f=4)
        w1 = store["visual.stage0.block0.se_c.w1"]
        w2 = store["visual.stage0.block0.se_c.w2"]

        out = vz.channel_se(t, w1, w2)
        ad.backward(ad.sum_over(out))
        both = w2.grad.copy()

        store.zero_grad()
        g = vz.excitation(vz.channel_squeeze(t), w1, w2)
        gated = vz.channel_se_apply(t, vz.joint_gate(g, ad.Tensor(np.full((1, 4, 4), 0.5))))
        ad.backward(ad.sum_over(gated))
        global_only = w2.grad.copy()
        assert not np.allclose(both, global_only)


class TestBackbone:
    def test_feature_width_matches_last_stage(self):
        config, store = tiny_backbone()
        rng = np.random.default_rng(20)
        vol = ad.Tensor(rng.standard_normal((2, 1, 4, 8, 8)), dtype=np.float64)
        out = vz.backbone_forward(store, config, vol)
        assert out.shape == (2, config.feature_dim)

    def test_deterministic(self):
        config, store = tiny_backbone()
        rng = np.random.default_rng(21)
        vol = rng.standard_normal((1, 1, 4, 8, 8))
        a = vz.backbone_forward(store, config, ad.Tensor(vol, dtype=np.float64)).data
        b = vz.backbone_forward(store, config, ad.Tensor(vol, dtype=np.float64)).data
        assert np.array_equal(a, b)

    def test_input_dim_mismatch(self):
        config, store = tiny_backbone()
        with pytest.raises(ConfigError):
            vz.backbone_forward(store, config, ad.Tensor(np.ones((1, 1, 4, 9, 9))))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            vz.VisualBackboneConfig(frames=3, se=vz.SqueezeExciteConfig(ratio=2))
        with pytest.raises(ConfigError):
            vz.VisualBackboneConfig(widths=(5,), se=vz.SqueezeExciteConfig(ratio=2))
        with pytest.raises(ConfigError):
            vz.VisualBackboneConfig(blocks_per_stage=0)
        with pytest.raises(ConfigError):
            vz.SqueezeExciteConfig(ratio=0)
        with pytest.raises(ConfigError):
            vz.SqueezeExciteConfig(mode="sideways")
