import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsest import autodiff as ad
from sparsest.objectives import (ObjectiveVector, ScalarizationConfig, avg_unit_occupancy,
                                 composite_loss, linear_scalarize, mse, stch_scalarize, tch_scalarize)

finite = st.floats(-50, 50, allow_nan=False)
positive_mu = st.floats(1e-3, 5.0)
weight = st.floats(0.0, 1.0)


class TestMSE:
    def test_identical(self):
        x = np.random.default_rng(0).random((3, 4))
        assert mse(x, x) == 0.0

    def test_constant_half(self):
        assert mse(np.full((2, 3), 0.5), np.zeros((2, 3))) == 0.25

    def test_flat_loop_reference(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((2, 1, 3, 3)), rng.random((2, 1, 3, 3))
        total = 0.0
        for x, y in zip(a.ravel(), b.ravel()):
            total += (x - y) ** 2
        assert mse(a, b) == pytest.approx(total / a.size, rel=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse(np.zeros(3), np.zeros(4))


class TestOccupancyAverage:
    def test_empty_deltas(self):
        assert avg_unit_occupancy([[0.0, 0.0], [0.0]]) == 0.0

    def test_worked_example(self):
        assert avg_unit_occupancy([0.6, 0.4]) == 0.5

    def test_flat_mean(self):
        rng = np.random.default_rng(2)
        records = [rng.random(rng.integers(1, 5)) for _ in range(6)]
        flat = [v for r in records for v in r]
        assert avg_unit_occupancy(records) == pytest.approx(sum(flat) / len(flat), rel=1e-14)

    def test_no_records(self):
        with pytest.raises(ValueError):
            avg_unit_occupancy([])


class TestScalarizations:
    def test_linear(self):
        assert linear_scalarize(ObjectiveVector(2.0, 0.5), (1, 0)) == 2.0
        assert linear_scalarize((2, 4), (0.5, 0.5)) == 3.0

    def test_linear_is_dot_product(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            f = rng.normal(size=2)
            a = rng.random()
            assert linear_scalarize(f, (a, 1 - a)) == pytest.approx(a * f[0] + (1 - a) * f[1])

    def test_tch(self):
        assert tch_scalarize((2, 4), (0.5, 0.5), (0, 0)) == 2.0
        assert tch_scalarize((1.5, 3.0), (0.3, 0.7), (1.5, 3.0)) == 0.0

    def test_tch_is_termwise_max(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            f, z = rng.normal(size=2), rng.normal(size=2)
            a = rng.uniform(0.01, 0.99)
            assert tch_scalarize(f, (a, 1 - a), z) == max(a * (f[0] - z[0]), (1 - a) * (f[1] - z[1]))

    def test_stch_closed_forms(self):
        assert stch_scalarize((2, 2), w=(0.5, 0.5), mu=1.0) == pytest.approx(1 + math.log(2), abs=1e-12)
        assert stch_scalarize((2, 4), w=(0.5, 0.5), mu=0.1) == pytest.approx(
            2 + 0.1 * math.log1p(math.exp(-10)), abs=1e-14)
        assert stch_scalarize((2, 4), w=(0.5, 0.5), mu=0.1) > 2.0

    def test_single_objective(self):
        for mu in (1e-3, 0.1, 10.0):
            assert stch_scalarize([3.25], w=[1.0], mu=mu, z_star=[0.25]) == 3.0

    def test_zero_weight_terms_dropped(self):
        cfg = ScalarizationConfig(w_mse=1.0, mu=0.5)
        assert stch_scalarize((0.03, 0.9), cfg) == 0.03

    def test_bad_weights(self):
        with pytest.raises(ValueError):
            tch_scalarize((1, 2), (0.6, 0.6))
        with pytest.raises(ValueError):
            ScalarizationConfig(w_mse=1.5)
        with pytest.raises(ValueError):
            ScalarizationConfig(mu=0.0)

    def test_scale_divides_objectives(self):
        cfg = ScalarizationConfig(w_mse=0.5, mu=0.2, scale=(0.1, 1.0))
        assert stch_scalarize((0.3, 0.4), cfg) == pytest.approx(
            stch_scalarize((3.0, 0.4), w=(0.5, 0.5), mu=0.2), rel=1e-14)

    @settings(max_examples=300, deadline=None)
    @given(finite, finite, finite, finite, weight, positive_mu)
    def test_bracket(self, f1, f2, z1, z2, a, mu):
        w = (a, 1 - a)
        t = tch_scalarize((f1, f2), w, (z1, z2))
        s = stch_scalarize((f1, f2), w=w, mu=mu, z_star=(z1, z2))
        k = sum(v > 0 for v in w)
        assert t <= s <= t + mu * math.log(k)

    @settings(max_examples=200, deadline=None)
    @given(finite, finite, finite, finite, weight, positive_mu)
    def test_translation(self, f1, f2, z1, z2, a, mu):
        w = (a, 1 - a)
        lhs = stch_scalarize((f1, f2), w=w, mu=mu, z_star=(z1, z2))
        rhs = stch_scalarize((f1 - z1, f2 - z2), w=w, mu=mu, z_star=(0, 0))
        assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(finite, finite, finite, weight, positive_mu)
    def test_monotone_in_each_objective(self, f1, f2, bump, a, mu):
        w = (a, 1 - a)
        base = stch_scalarize((f1, f2), w=w, mu=mu)
        assert stch_scalarize((f1 + abs(bump), f2), w=w, mu=mu) >= base
        assert stch_scalarize((f1, f2 + abs(bump)), w=w, mu=mu) >= base


class TestCompositeLoss:
    def test_pure_mse(self):
        cfg = ScalarizationConfig(w_mse=1.0, z_star=(0.01, 0.0))
        assert composite_loss(0.2, 0.7, cfg) == pytest.approx(0.19, abs=1e-15)

    def test_pure_occupancy(self):
        cfg = ScalarizationConfig(w_mse=0.0, z_star=(0.0, 0.1))
        assert composite_loss(0.2, 0.7, cfg) == pytest.approx(0.6, abs=1e-15)

    def test_delegates_to_stch(self):
        cfg = ScalarizationConfig(w_mse=0.3, mu=0.05)
        assert composite_loss(0.2, 0.7, cfg) == stch_scalarize((0.2, 0.7), cfg)

    def test_tape_value_and_gradient(self):
        cfg = ScalarizationConfig(w_mse=0.3, mu=0.05)
        m = ad.Parameter(np.array(0.2))
        o = ad.Parameter(np.array(0.7))
        loss = composite_loss(m, o, cfg)
        assert float(loss.value) == pytest.approx(stch_scalarize((0.2, 0.7), cfg), abs=1e-14)
        ad.backward(loss)
        h = 1e-6
        for p, idx in ((m, 0), (o, 1)):
            f = [0.2, 0.7]
            f[idx] += h
            up = stch_scalarize(f, cfg)
            f[idx] -= 2 * h
            fd = (up - stch_scalarize(f, cfg)) / (2 * h)
            assert float(p.grad) == pytest.approx(fd, rel=1e-6)


class TestObjectiveVector:
    def test_rejects_out_of_range_occupancy(self):
        with pytest.raises(ValueError):
            ObjectiveVector(0.1, 1.5)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            ObjectiveVector(float("nan"), 0.5)
