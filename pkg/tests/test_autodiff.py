"""Gradient correctness of every op against central finite differences."""

import numpy as np
import pytest
import scipy.sparse as sp

from talentgraph import autodiff as ad
from talentgraph.autodiff import Tensor
from talentgraph.errors import NumericError, TalentGraphError

FD_STEP = 1e-5
FD_TOL = 1e-4


def finite_difference_check(build_loss, params, step=FD_STEP, tol=FD_TOL):
    """Compare analytic gradients to central differences, elementwise.

    ``build_loss`` must rebuild the forward graph from the params' current
    data each call. Relative error uses a small absolute floor so near-zero
    gradients compare on an absolute scale.
    """
    loss = build_loss()
    for p in params:
        p.zero_grad()
    loss.backward()
    analytic = [np.array(p.grad if p.grad is not None else np.zeros_like(p.data)) for p in params]
    for p, grads in zip(params, analytic):
        flat = p.data.reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + step
            up = build_loss().item()
            flat[idx] = original - step
            down = build_loss().item()
            flat[idx] = original
            numeric = (up - down) / (2 * step)
            a = grads.reshape(-1)[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-4)
            assert err < tol, f"grad mismatch at {idx}: analytic={a}, numeric={numeric}"


def rand(shape, seed):
    return np.random.default_rng(seed).standard_normal(shape)


class TestBasicOps:
    def test_add_mul_chain(self):
        x = Tensor(rand((3, 4), 0), requires_grad=True)
        y = Tensor(rand((3, 4), 1), requires_grad=True)
        finite_difference_check(lambda: ad.tsum(ad.mul(ad.add(x, y), x)), [x, y])

    def test_broadcast_bias(self):
        x = Tensor(rand((5, 4), 2), requires_grad=True)
        b = Tensor(rand((1, 4), 3), requires_grad=True)
        finite_difference_check(lambda: ad.tsum(ad.mul(ad.add(x, b), ad.add(x, b))), [x, b])

    def test_matmul(self):
        a = Tensor(rand((4, 3), 4), requires_grad=True)
        b = Tensor(rand((3, 5), 5), requires_grad=True)
        finite_difference_check(lambda: ad.tsum(ad.matmul(a, b)), [a, b])

    def test_matmul_linear_case_analytic(self):
        # d(sum(h @ w))/dw = h^T @ ones
        h = Tensor(rand((6, 3), 6))
        w = Tensor(rand((3, 2), 7), requires_grad=True)
        loss = ad.tsum(ad.matmul(h, w))
        loss.backward()
        assert np.allclose(w.grad, h.data.T @ np.ones((6, 2)))

    def test_sub_and_scale(self):
        x = Tensor(rand((2, 3), 8), requires_grad=True)
        finite_difference_check(lambda: ad.tsum(ad.scale(ad.sub(x, 1.5), -2.0)), [x])

    def test_mean(self):
        x = Tensor(rand((4, 4), 9), requires_grad=True)
        finite_difference_check(lambda: ad.tmean(ad.mul(x, x)), [x])

    def test_gather_rows(self):
        x = Tensor(rand((6, 3), 10), requires_grad=True)
        rows = np.array([0, 2, 2, 5])
        finite_difference_check(
            lambda: ad.tsum(ad.mul(ad.gather_rows(x, rows), ad.gather_rows(x, rows))), [x]
        )

    def test_concat_cols(self):
        a = Tensor(rand((3, 2), 11), requires_grad=True)
        b = Tensor(rand((3, 1), 12), requires_grad=True)
        finite_difference_check(
            lambda: ad.tsum(ad.mul(ad.concat_cols([a, b]), ad.concat_cols([a, b]))), [a, b]
        )

    def test_spmm(self):
        matrix = sp.csr_matrix(np.array([[0.5, 0.0, 0.2], [0.0, 1.0, 0.0]]))
        matrix_t = matrix.T.tocsr()
        x = Tensor(rand((3, 4), 13), requires_grad=True)
        finite_difference_check(
            lambda: ad.tsum(ad.mul(ad.spmm(matrix, matrix_t, x), ad.spmm(matrix, matrix_t, x))),
            [x],
        )


class TestActivations:
    @pytest.mark.parametrize("name", ["sigmoid", "tanh", "leaky_relu", "elu"])
    def test_finite_difference(self, name):
        fn = ad.ACTIVATIONS[name]
        # Offset away from the kinks of the piecewise activations.
        data = rand((4, 3), 14)
        data[np.abs(data) < 0.05] = 0.1
        x = Tensor(data, requires_grad=True)
        finite_difference_check(lambda: ad.tsum(ad.mul(fn(x), fn(x))), [x])

    def test_softplus(self):
        x = Tensor(rand((3, 3), 15), requires_grad=True)
        finite_difference_check(lambda: ad.tsum(ad.softplus(x)), [x])

    def test_softplus_stability(self):
        out = ad.softplus(Tensor(np.array([[-800.0, 0.0, 800.0]])))
        assert np.all(np.isfinite(out.data))
        assert out.data[0, 2] == pytest.approx(800.0)
        assert out.data[0, 1] == pytest.approx(np.log(2.0))


class TestBCE:
    def test_value_at_equal_logit(self):
        # logit 0 -> p = 0.5 -> loss = ln 2 regardless of target
        out = ad.bce_with_logits(Tensor(np.zeros((2, 3))), np.ones((2, 3)))
        assert np.allclose(out.data, np.log(2.0))

    def test_saturated_prediction_small_loss(self):
        logits = Tensor(np.array([[20.0, -20.0]]))
        targets = np.array([[1.0, 0.0]])
        out = ad.bce_with_logits(logits, targets)
        assert float(out.data.sum()) < 1e-3

    def test_gradient(self):
        z = Tensor(rand((4, 3), 16), requires_grad=True)
        targets = (rand((4, 3), 17) > 0).astype(float)
        weights = np.abs(rand((4, 1), 18)) + 0.5
        finite_difference_check(
            lambda: ad.tsum(ad.bce_with_logits(z, targets, weights)), [z]
        )

    def test_extreme_logits_stay_finite(self):
        z = Tensor(np.array([[1000.0, -1000.0]]), requires_grad=True)
        loss = ad.tsum(ad.bce_with_logits(z, np.array([[0.0, 1.0]])))
        assert np.isfinite(loss.item())
        loss.backward()
        assert np.all(np.isfinite(z.grad))


class TestEngine:
    def test_zero_upstream_gives_zero_grads(self):
        x = Tensor(rand((3, 3), 19), requires_grad=True)
        loss = ad.scale(ad.tsum(x), 0.0)
        loss.backward()
        assert np.all(x.grad == 0.0)

    def test_reused_node_accumulates(self):
        x = Tensor(np.array([[2.0]]), requires_grad=True)
        y = ad.mul(x, x)  # x reused: dy/dx = 2x
        loss = ad.tsum(y)
        loss.backward()
        assert x.grad[0, 0] == pytest.approx(4.0)

    def test_backward_requires_scalar(self):
        x = Tensor(rand((2, 2), 20), requires_grad=True)
        with pytest.raises(TalentGraphError):
            ad.add(x, x).backward()

    def test_backward_requires_recorded_forward(self):
        with pytest.raises(TalentGraphError):
            Tensor(np.array(1.0), requires_grad=True).backward()

    def test_check_finite(self):
        with pytest.raises(NumericError):
            ad.check_finite(Tensor(np.array([np.nan])), "test")

    def test_deterministic_backward(self):
        def grads():
            x = Tensor(rand((4, 4), 21), requires_grad=True)
            w = Tensor(rand((4, 2), 22), requires_grad=True)
            loss = ad.tsum(ad.sigmoid(ad.matmul(x, w)))
            loss.backward()
            return x.grad.copy(), w.grad.copy()

        gx1, gw1 = grads()
        gx2, gw2 = grads()
        assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)
