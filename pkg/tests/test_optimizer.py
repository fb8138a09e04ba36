import numpy as np
import pytest

from errors import InvalidArgumentError, NumericalFailure
from optimizer import AdamState, adam_step


class TestAdam:
    def test_quadratic_converges(self):
        params = {"theta": np.array([1.0])}
        state = AdamState()
        for _ in range(500):
            adam_step(params, {"theta": params["theta"].copy()}, state, 0.1)
        assert abs(params["theta"][0]) < 1e-3
        assert state.t == 500

    def test_first_step_moves_by_learning_rate(self):
        params = {"a": np.array([0.0, 0.0])}
        adam_step(params, {"a": np.array([3.0, -0.01])}, AdamState(), 0.05)
        np.testing.assert_allclose(params["a"], [-0.05, 0.05], rtol=1e-5)

    def test_per_group_learning_rates(self):
        params = {"layout": np.zeros(2), "offsets": np.zeros((3, 3))}
        grads = {"layout": np.ones(2), "offsets": np.ones((3, 3))}
        adam_step(params, grads, AdamState(), {"layout": 0.1, "offsets": 0.01})
        np.testing.assert_allclose(params["layout"], -0.1, rtol=1e-5)
        np.testing.assert_allclose(params["offsets"], -0.01, rtol=1e-5)

    def test_missing_gradient_counts_as_zero(self):
        params = {"a": np.ones(2), "b": np.ones(2)}
        adam_step(params, {"a": np.ones(2)}, AdamState(), 0.1)
        np.testing.assert_array_equal(params["b"], 1.0)

    def test_non_finite_gradient_leaves_parameters(self):
        params = {"a": np.ones(2), "b": np.ones(2)}
        state = AdamState()
        with pytest.raises(NumericalFailure):
            adam_step(params, {"a": np.ones(2), "b": np.array([np.nan, 0.0])}, state, 0.1)
        np.testing.assert_array_equal(params["a"], 1.0)
        assert state.t == 0 and not state.m

    def test_unknown_parameter(self):
        with pytest.raises(InvalidArgumentError):
            adam_step({"a": np.ones(2)}, {"z": np.ones(2)}, AdamState(), 0.1)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            adam_step({"a": np.ones(2)}, {"a": np.ones(3)}, AdamState(), 0.1)
