import logging

import numpy as np
import pytest

from modules import autograd as ag
from modules.autograd import GradMap
from modules.optim import AdamState, adam_step, lr_schedule
from modules.params import ModelParams


class TestSchedule:
    def test_warmup_is_linear(self):
        assert lr_schedule(0, 100, 1.0) == 0.0
        assert lr_schedule(5, 100, 1.0) == pytest.approx(0.5)
        assert lr_schedule(10, 100, 1.0) == pytest.approx(1.0)

    def test_cosine_decays_to_zero(self):
        assert lr_schedule(55, 100, 2.0) == pytest.approx(1.0)
        assert lr_schedule(100, 100, 2.0) == pytest.approx(0.0, abs=1e-12)
        assert lr_schedule(500, 100, 2.0) == pytest.approx(0.0, abs=1e-12)

    def test_no_warmup_starts_at_base(self):
        assert lr_schedule(0, 10, 3e-5, warmup_frac=0.0) == pytest.approx(3e-5)

    def test_rejects_empty_schedule(self):
        with pytest.raises(ValueError, match="total_steps"):
            lr_schedule(0, 0, 1.0)


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        params = ModelParams()
        w = params.add("w", np.array([1.0, -2.0, 0.5]))
        with ag.recording():
            loss = ag.sum_(w * ag.constant([3.0, -0.1, 0.0]))
        state = AdamState.for_params(params)
        adam_step(params, ag.backward(loss), state, lr=0.01)
        np.testing.assert_allclose(w.data, [0.99, -1.99, 0.5], atol=1e-6)
        assert state.step == 1

    def test_minimises_a_quadratic(self):
        params = ModelParams()
        w = params.add("w", np.array([4.0, -3.0]))
        state = AdamState.for_params(params)
        for _ in range(500):
            with ag.recording():
                loss = ag.sum_(w * w)
            adam_step(params, ag.backward(loss), state, lr=0.05)
        np.testing.assert_allclose(w.data, 0.0, atol=1e-2)

    def test_missing_gradient_warns_once(self, caplog):
        params = ModelParams()
        params.add("unused", np.ones(2))
        state = AdamState.for_params(params)
        with caplog.at_level(logging.WARNING, logger="modules.optim"):
            adam_step(params, GradMap(), state, lr=0.1)
            adam_step(params, GradMap(), state, lr=0.1)
        assert sum("unused" in r.message for r in caplog.records) == 1
        np.testing.assert_array_equal(params["unused"].data, [1.0, 1.0])
