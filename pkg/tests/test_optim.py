import numpy as np
import pytest

from sarcnet.autodiff import Tensor
from sarcnet.errors import OptimizerError
from sarcnet.optim import adam_init, adam_step, zero_grads


def make_params(rng, shapes):
    return {f"p{i}": Tensor(rng.normal(size=s), requires_grad=True)
            for i, s in enumerate(shapes)}


class TestAdam:
    def test_zero_gradient_is_identity(self, rng):
        params = make_params(rng, [(3, 2), (4,)])
        before = {k: v.data.copy() for k, v in params.items()}
        state = adam_init(params)
        grads = {k: np.zeros_like(v.data) for k, v in params.items()}
        adam_step(params, grads, state)
        for k in params:
            np.testing.assert_array_equal(params[k].data, before[k])
        assert state.step_count == 1

    def test_first_step_magnitude_equals_lr(self, rng):
        # bias correction collapses the first update to lr * sign(g)
        for _ in range(100):
            g = rng.uniform(1e-3, 10.0) * rng.choice([-1.0, 1.0])
            p = {"w": Tensor(np.asarray([0.5]), requires_grad=True)}
            state = adam_init(p, lr=5e-4)
            adam_step(p, {"w": np.asarray([g])}, state)
            delta = float(p["w"].data[0]) - 0.5
            assert abs(abs(delta) - 5e-4) < 1e-6
            assert np.sign(delta) == -np.sign(g)

    def test_lr_zero_identity_with_nonzero_grads(self, rng):
        params = make_params(rng, [(5,)])
        before = params["p0"].data.copy()
        state = adam_init(params, lr=0.0)
        for _ in range(7):
            adam_step(params, {"p0": rng.normal(size=5)}, state)
        np.testing.assert_array_equal(params["p0"].data, before)
        assert state.step_count == 7

    def test_converges_on_quadratic(self):
        w = {"w": Tensor(np.asarray([0.0]), requires_grad=True)}
        state = adam_init(w, lr=0.05)
        losses = []
        for _ in range(100):
            value = float(w["w"].data[0])
            losses.append((value - 3.0) ** 2)
            adam_step(w, {"w": np.asarray([2.0 * (value - 3.0)])}, state)
        final_gap = abs(float(w["w"].data[0]) - 3.0)
        assert final_gap < abs(0.0 - 3.0)
        # loss decreases over every 20-step window
        for start in range(0, 80, 20):
            assert losses[start + 20] < losses[start]

    def test_nan_gradient_names_parameter(self, rng):
        params = make_params(rng, [(2,)])
        state = adam_init(params)
        bad = np.asarray([1.0, np.nan])
        with pytest.raises(OptimizerError, match="p0"):
            adam_step(params, {"p0": bad}, state)

    def test_second_moment_nonnegative(self, rng):
        params = make_params(rng, [(6,)])
        state = adam_init(params)
        for _ in range(5):
            adam_step(params, {"p0": rng.normal(size=6)}, state)
        assert np.all(state.second_moment["p0"] >= 0.0)

    def test_zero_grads_helper(self, rng):
        params = make_params(rng, [(3,)])
        params["p0"].grad += 5.0
        zero_grads(params)
        np.testing.assert_array_equal(params["p0"].grad, np.zeros(3))
