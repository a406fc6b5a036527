"""Optimizer update rule and learning-rate schedule."""

import numpy as np
import numpy.testing as npt
import pytest

from eegtf.numerics import Parameter
from eegtf.optim import AdamW, layer_multiplier, lr_at_step


class TestAdamW:
    def test_first_step_magnitude_is_lr(self):
        # hand trace: m-hat = g, v-hat = g^2, update = lr * g/|g| = lr
        w = Parameter(np.array([1.0]))
        w.grad = np.array([1.0])
        opt = AdamW({"w": w}, weight_decay=0.0)
        opt.step(lr=0.1)
        assert abs(w.data[0] - 0.9) < 1e-6

    def test_decoupled_decay_alone(self):
        w = Parameter(np.array([2.0]))
        w.grad = np.array([0.0])
        opt = AdamW({"w": w}, weight_decay=0.01)
        opt.step(lr=0.1)
        # zero gradient, zero moments: only the decay term moves w
        npt.assert_allclose(w.data, 2.0 - 0.1 * 0.01 * 2.0, atol=1e-15)

    def test_frozen_parameter_untouched(self):
        w = Parameter(np.array([1.0, 2.0]), trainable=False)
        w.grad = np.array([5.0, 5.0])
        before = w.data.tobytes()
        AdamW({"w": w}).step(lr=0.5)
        assert w.data.tobytes() == before

    def test_missing_grad_treated_as_zero(self):
        w = Parameter(np.array([1.0]))
        opt = AdamW({"w": w}, weight_decay=0.0)
        opt.step(lr=0.1)
        npt.assert_allclose(w.data, 1.0, atol=1e-12)

    def test_lr_multipliers_scale_updates(self):
        a = Parameter(np.array([1.0]))
        b = Parameter(np.array([1.0]))
        a.grad = np.array([1.0])
        b.grad = np.array([1.0])
        opt = AdamW({"a": a, "b": b}, lr_multipliers={"a": 1.0, "b": 0.5},
                    weight_decay=0.0)
        opt.step(lr=0.1)
        da, db = 1.0 - a.data[0], 1.0 - b.data[0]
        assert abs(da - 2 * db) < 1e-9

    def test_zero_grad_clears(self):
        w = Parameter(np.array([1.0]))
        w.grad = np.array([3.0])
        opt = AdamW({"w": w})
        opt.zero_grad()
        assert w.grad is None


class TestSchedule:
    def test_step_zero_is_zero(self):
        assert lr_at_step(0, 100, 1e-3) == 0.0

    def test_warmup_end_hits_base_times_multiplier(self):
        base = 5e-4
        assert lr_at_step(10, 100, base) == base
        assert lr_at_step(10, 100, base, layer_index=0, num_layers=2) == base * 0.65 ** 2

    def test_cosine_reaches_zero(self):
        assert abs(lr_at_step(100, 100, 1e-3)) < 1e-18

    def test_monotone_decay_after_warmup(self):
        vals = [lr_at_step(s, 100, 1e-3) for s in range(10, 101)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_deepest_layer_multiplier(self):
        assert layer_multiplier(0, 2, 0.65) == pytest.approx(0.4225)
        assert layer_multiplier(2, 2, 0.65) == 1.0

    def test_out_of_range_step_rejected(self):
        with pytest.raises(ValueError):
            lr_at_step(101, 100, 1e-3)
