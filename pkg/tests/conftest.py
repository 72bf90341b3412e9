import numpy as np
import pytest

from sarcnet.autodiff import Tensor


def rel_err(analytic, numeric, floor):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_op_gradients(build_loss, arrays, n_coords=10, dtype=np.float64,
                       seed=0, eps=1e-5, rtol=None, floor=1e-6):
    """Compare reverse-mode gradients against central finite differences.

    ``build_loss`` maps a list of Tensors to a scalar Tensor. The
    analytic pass runs at ``dtype`` (1e-5 tolerance for float64, 1e-3
    for float32); the finite-difference oracle is always evaluated in
    float64 so its own noise never enters the comparison.
    """
    if rtol is None:
        rtol = 1e-5 if dtype == np.float64 else 1e-3

    arrays64 = [np.asarray(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.astype(dtype), requires_grad=True) for a in arrays64]
    loss = build_loss(leaves)
    loss.backward()
    grads = [leaf.grad.copy() for leaf in leaves]

    def loss_value(perturbed):
        out = build_loss([Tensor(a.copy()) for a in perturbed])
        return float(out.data)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for which in range(len(arrays64)):
        size = arrays64[which].size
        coords = rng.choice(size, size=min(n_coords, size), replace=False)
        for flat in coords:
            idx = np.unravel_index(flat, arrays64[which].shape)
            step = eps * max(1.0, abs(float(arrays64[which][idx])))
            plus = [a.copy() for a in arrays64]
            minus = [a.copy() for a in arrays64]
            plus[which][idx] += step
            minus[which][idx] -= step
            numeric = (loss_value(plus) - loss_value(minus)) / (2 * step)
            analytic = float(grads[which][idx])
            err = rel_err(analytic, numeric, floor)
            worst = max(worst, err)
            assert err <= rtol, (
                f"leaf {which} coord {idx}: analytic {analytic:.6g} vs "
                f"numeric {numeric:.6g} (rel err {err:.3g} > {rtol})"
            )
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
