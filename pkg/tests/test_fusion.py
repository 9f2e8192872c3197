"""Fusion head, frame differencing, ensembling, and the loss."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from survtower import autodiff as ad
from survtower import fusion as fu
from survtower.errors import ConfigError, DimensionError, UsageError
from survtower.params import ParameterStore


def make_head(in_dim=6, hidden=8, dtype=np.float64, seed=0):
    store = ParameterStore()
    fu.init_head_params(store, in_dim, hidden, np.random.default_rng(seed), dtype=dtype)
    return store


class TestFusePredict:
    def test_zero_weights_give_output_bias(self):
        store = make_head()
        for name, t in store.items():
            t.data = np.zeros_like(t.data) if name != "head.b2" else np.full(1, 0.3)
        out = fu.fuse_predict(store, ad.Tensor(np.ones((4, 6)), dtype=np.float64))
        np.testing.assert_allclose(out.data, 0.3)

    def test_scalar_per_row(self):
        for in_dim in (3, 10):
            store = make_head(in_dim=in_dim)
            out = fu.fuse_predict(store, ad.Tensor(np.ones((5, in_dim)), dtype=np.float64))
            assert out.shape == (5, 1)

    def test_width_mismatch(self):
        store = make_head(in_dim=6)
        with pytest.raises(ConfigError, match="width"):
            fu.fuse_predict(store, ad.Tensor(np.ones((2, 7))))

    def test_gradcheck(self):
        from survtower import gradcheck as gc

        store = make_head()
        rng = np.random.default_rng(1)
        feats = rng.standard_normal((3, 6))
        w = rng.standard_normal((3, 1))

        def forward():
            return ad.sum_over(ad.mul(fu.fuse_predict(store, ad.Tensor(feats, dtype=np.float64)), w))

        ad.backward(forward())

        def f():
            with ad.no_grad():
                return float(forward().data)

        for name, tensor in store.items():
            res = gc.check_tensor_grad(name, f, tensor.data, tensor.grad, rng, n_samples=4)
            assert res.passed, f"{name}: {res.max_rel_error:.2e}"


class TestFrameDifference:
    def test_constant_volume_zeroes_out(self):
        v = np.full((4, 3, 3), 2.5)
        assert np.all(fu.frame_difference(v, "forward") == 0)
        assert np.all(fu.frame_difference(v, "backward") == 0)

    def test_ramp_forward(self):
        v = np.stack([np.full((2, 2), i, dtype=float) for i in range(4)])
        out = fu.frame_difference(v, "forward")
        np.testing.assert_allclose(out[:, 0, 0], [1, 1, 1, 0])

    def test_backward_antisymmetric_on_ramp(self):
        v = np.stack([np.full((2, 2), 2.0 * i) for i in range(5)])
        fwd = fu.frame_difference(v, "forward")
        bwd = fu.frame_difference(v, "backward")
        # interior slices carry opposite signs; the zero pad sits at opposite ends
        np.testing.assert_allclose(bwd[1:], -fwd[:-1])

    def test_too_few_slices(self):
        with pytest.raises(DimensionError, match="2 slices"):
            fu.frame_difference(np.ones((1, 3, 3)), "forward")

    def test_unknown_direction(self):
        with pytest.raises(ConfigError):
            fu.frame_difference(np.ones((3, 2, 2)), "sideways")


class TestEnsemble:
    def test_omega_one_is_bitwise_raw_prediction(self):
        assert fu.ensemble_predict(0.731, 0.2, 0.9, 1.0) == 0.731

    def test_reference_substitution(self):
        assert fu.ensemble_predict(1.0, 0.5, 0.7, 0.4) == pytest.approx(0.76)

    @given(
        st.floats(0, 1), st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2)
    )
    @settings(max_examples=200, deadline=None)
    def test_convex_combination_bounds(self, omega, a, b, c):
        t_bar = fu.ensemble_predict(a, b, c, omega)
        lo, hi = min(a, b, c), max(a, b, c)
        assert lo - 1e-12 <= t_bar <= hi + 1e-12

    def test_omega_out_of_range(self):
        with pytest.raises(ConfigError):
            fu.ensemble_predict(0.1, 0.2, 0.3, 1.5)

    def test_tensor_path_matches_float_path(self):
        rng = np.random.default_rng(2)
        a, b, c = rng.standard_normal(3)
        t = fu.ensemble_predict(
            ad.Tensor([a], dtype=np.float64), ad.Tensor([b], dtype=np.float64),
            ad.Tensor([c], dtype=np.float64), 0.4,
        )
        assert t.data[0] == pytest.approx(fu.ensemble_predict(a, b, c, 0.4), abs=1e-12)


class TestLoss:
    def test_perfect_predictions(self):
        pred = ad.Tensor(np.array([[0.2], [0.8]]), dtype=np.float64)
        loss = fu.mse_loss(pred, np.array([0.2, 0.8]))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_single_residual(self):
        pred = ad.Tensor(np.array([[0.7]]), dtype=np.float64)
        loss = fu.mse_loss(pred, np.array([0.2]))
        assert loss.item() == pytest.approx(0.25)

    def test_l2_decomposition(self):
        store = make_head()
        pred = ad.Tensor(np.array([[0.5]]), dtype=np.float64)
        lam = 0.01
        loss = fu.training_loss(pred, np.array([0.5]), store, lam)
        brute = sum(
            float((t.data ** 2).sum()) for name, t in store.items() if store.decays(name)
        )
        assert loss.item() == pytest.approx(lam * brute, rel=1e-9)

    def test_l2_excludes_non_decay_parameters(self):
        store = ParameterStore()
        store.add("w", np.full((2, 2), 3.0))
        store.add("ln.gain", np.full(4, 100.0), decay=False)
        assert float(store.l2_penalty().data) == pytest.approx(36.0)

    def test_empty_batch_rejected(self):
        with pytest.raises(UsageError):
            fu.mse_loss(ad.Tensor(np.zeros((0, 1))), np.zeros(0))
