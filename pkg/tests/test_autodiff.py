import numpy as np
import pytest

from sparsest import autodiff as ad
from sparsest.sparse_conv import ConvKernel, dense_conv2d
from sparsest.sparsest_cell import ModelConfig, SequenceModel


def central_diff(f, arr, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arr`` (in place)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


class TestBackward:
    def test_sum_gives_ones(self):
        x = ad.Parameter(np.random.default_rng(0).normal(size=(3, 4)))
        ad.backward(ad.total(x))
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_shared_node_accumulates(self):
        x = ad.Parameter(np.array([2.0]))
        y = ad.mul(x, x)
        ad.backward(ad.total(y + y))
        assert x.grad.tolist() == [8.0]

    def test_conv_mse_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 2, 4, 5))
        w = ad.Parameter(rng.normal(size=(3, 2, 3, 3)))
        b = ad.Parameter(rng.normal(size=3))
        target = rng.normal(size=(2, 3, 4, 5))

        def loss():
            return float(ad.mse(ad.conv2d(x, w, b), target).value)

        ad.backward(ad.mse(ad.conv2d(x, w, b), target))
        assert rel_err(w.grad, central_diff(loss, w.value)) <= 1e-4
        assert rel_err(b.grad, central_diff(loss, b.value)) <= 1e-4

    def test_conv_forward_matches_dense_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 2, 5, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        out = ad.conv2d_array(x, w)[0]
        assert np.max(np.abs(out - dense_conv2d(x[0], ConvKernel(w)))) <= 1e-12

    def test_input_gradient_of_conv(self):
        rng = np.random.default_rng(3)
        x = ad.Parameter(rng.normal(size=(1, 2, 4, 4)))
        w = rng.normal(size=(2, 2, 3, 3))
        target = rng.normal(size=(1, 2, 4, 4))
        ad.backward(ad.mse(ad.conv2d(x, ad.Var(w)), target))
        fd = central_diff(lambda: float(ad.mse(ad.conv2d(x, ad.Var(w)), target).value), x.value)
        assert rel_err(x.grad, fd) <= 1e-4

    def test_sequence_model_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        model = SequenceModel.init(ModelConfig(hidden=(2, 2)), seed=3)
        frames = rng.random((2, 4, 1, 4, 4))

        def forward():
            states = model.start(2, 4, 4)
            err = None
            for t in range(3):
                pred, states = model.step(states, frames[:, t])
                term = ad.mse(pred, frames[:, t + 1])
                err = term if err is None else err + term
            return err

        ad.backward(forward())
        for p in model.parameters():
            if p.name.startswith("theta"):
                continue
            fd = central_diff(lambda: float(forward().value), p.value)
            assert rel_err(p.grad, fd) <= 1e-4, p.name

    def test_non_finite_loss_raises(self):
        x = ad.Parameter(np.array([np.inf]))
        with pytest.raises(ad.TrainingError):
            ad.backward(ad.total(x))

    def test_non_finite_gradient_raises(self):
        x = ad.Parameter(np.array([1.0]))
        bad = ad.Var(np.array(1.0), (x,), lambda g: (np.array([np.nan]),), "bad")
        with pytest.raises(ad.TrainingError):
            ad.backward(bad)

    def test_no_grad_builds_no_graph(self):
        x = ad.Parameter(np.ones(2))
        with ad.no_grad():
            y = ad.mul(x, 2.0)
        assert y.parents == ()


class TestDeltaThresholdBackward:
    def test_nothing_fired(self):
        g = np.random.default_rng(0).normal(size=(2, 3))
        gx, _ = ad.delta_threshold_backward(g, np.zeros((2, 3), bool))
        assert not gx.any()

    def test_everything_fired(self):
        g = np.random.default_rng(0).normal(size=(2, 3))
        gx, _ = ad.delta_threshold_backward(g, np.ones((2, 3), bool))
        assert np.array_equal(gx, g)

    def test_theta_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(1)
        diff = np.abs(rng.normal(size=(2, 4, 4)))
        theta, tau = 0.4, 0.05

        def soft(th):
            return float(np.mean(1 / (1 + np.exp(-(diff - th) / tau))))

        _, gt = ad.delta_threshold_backward(np.zeros_like(diff), diff > theta, diff, theta, tau, 1.0)
        fd = (soft(theta + 1e-5) - soft(theta - 1e-5)) / 2e-5
        assert abs(gt - fd) / abs(fd) <= 1e-4

    def test_soft_fire_fraction_op_gradients(self):
        rng = np.random.default_rng(2)
        x = ad.Parameter(rng.normal(size=(1, 2, 3, 3)))
        x_hat = ad.Parameter(rng.normal(size=(1, 2, 3, 3)))
        theta = ad.Parameter(np.array(0.3))
        ad.backward(ad.soft_fire_fraction(x, x_hat, theta, 0.2))

        def f():
            return float(ad.soft_fire_fraction(x, x_hat, theta, 0.2).value)

        for p in (x, x_hat, theta):
            assert rel_err(p.grad, central_diff(f, p.value)) <= 1e-4

    def test_soft_site_occupancy_gradients(self):
        rng = np.random.default_rng(3)
        x = ad.Parameter(rng.normal(size=(2, 3, 3, 3)))
        x_hat = ad.Parameter(rng.normal(size=(2, 3, 3, 3)) * 0.1)
        theta = ad.Parameter(np.array(0.6))
        ad.backward(ad.soft_site_occupancy(x, x_hat, theta, 0.3))

        def f():
            return float(ad.soft_site_occupancy(x, x_hat, theta, 0.3).value)

        for p in (x, x_hat, theta):
            assert rel_err(p.grad, central_diff(f, p.value)) <= 1e-4

    def test_site_occupancy_single_channel_is_fire_fraction(self):
        rng = np.random.default_rng(4)
        x, x_hat = rng.normal(size=(2, 1, 4, 4)), rng.normal(size=(2, 1, 4, 4))
        theta = ad.Var(np.array(0.5))
        a = ad.soft_site_occupancy(x, x_hat, theta, 0.1).value
        b = ad.soft_fire_fraction(x, x_hat, theta, 0.1).value
        assert abs(a - b) <= 1e-12

    def test_value_path_theta_gradient_is_relaxed_gate_derivative(self):
        rng = np.random.default_rng(5)
        x, x_hat = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 2, 4, 4))
        c = rng.normal(size=x.shape)
        theta, tau = ad.Parameter(np.array(0.4)), 0.1
        delta, new_hat, _ = ad.delta_threshold(x, x_hat, theta, tau)
        ad.backward(ad.total(ad.mul(delta, c)) + ad.total(ad.mul(new_hat, c)))
        diff = x - x_hat

        def relaxed(th):
            gate = 1 / (1 + np.exp(-(np.abs(diff) - th) / tau))
            return float(np.sum(c * diff * gate) * 2)

        fd = (relaxed(0.4 + 1e-6) - relaxed(0.4 - 1e-6)) / 2e-6
        assert float(theta.grad) == pytest.approx(fd, rel=1e-5)

    def test_no_theta_gradient_without_tau(self):
        theta = ad.Parameter(np.array(0.1))
        delta, _, _ = ad.delta_threshold(np.ones(3), np.zeros(3), theta)
        ad.backward(ad.total(delta))
        assert float(theta.grad) == 0.0

    def test_delta_forward_and_mask(self):
        x = np.array([1.0, 1.3, 2.0])
        d, hat, fired = ad.delta_threshold(x, np.array([0.0, 1.0, 1.2]), ad.Var(np.array(0.5)))
        assert fired.tolist() == [True, False, True]
        assert np.allclose(d.value, [1.0, 0.0, 0.8])
        assert hat.value.tolist() == [1.0, 1.0, 2.0]


class TestAdam:
    def test_zero_gradient_leaves_everything(self):
        p = ad.Parameter(np.array([1.0, -2.0]))
        opt = ad.Adam([p])
        opt.step()
        assert p.value.tolist() == [1.0, -2.0]
        assert not opt.m[0].any() and not opt.v[0].any()

    def test_first_step_size(self):
        p = ad.Parameter(np.array(0.0))
        opt = ad.Adam([p], lr=1e-4)
        p.grad = np.array(1.0)
        opt.step()
        # m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
        assert float(p.value) == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)

    def test_clamp_to_zero(self):
        p = ad.Parameter(np.array(1e-5), clamp=(0.0, np.inf))
        opt = ad.Adam([p], lr=1e-3)
        p.grad = np.array(1.0)
        opt.step()
        assert float(p.value) == 0.0

    def test_non_finite_update(self):
        p = ad.Parameter(np.array(0.0))
        opt = ad.Adam([p])
        p.grad = np.array(np.nan)
        with pytest.raises(ad.TrainingError):
            opt.step()

    def test_frozen_parameters_skipped(self):
        p = ad.Parameter(np.array(1.0), trainable=False)
        assert ad.Adam([p]).params == []
