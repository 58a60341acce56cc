"""Unit tests for the tensor/autodiff core.

Analytic gradients are checked against central finite differences computed
by an independent scalar-perturbation oracle.
"""

import numpy as np
import pytest

from catseq import numcore as nc


def finite_difference(f, arrays, h=1e-5):
    """Central-difference gradients of scalar f w.r.t. a list of arrays."""
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(arrays)
            flat[i] = orig - h
            down = f(arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def check_gradients(build_loss, arrays, tol=1e-5):
    tensors = [nc.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build_loss(tensors)
    nc.backward(loss)
    analytic = [t.grad for t in tensors]

    def f(arrs):
        ts = [nc.Tensor(a) for a in arrs]
        return build_loss(ts).item()

    numeric = finite_difference(f, [a.copy() for a in arrays])
    assert max_rel_err(analytic, numeric) <= tol


class TestForwardSemantics:
    def test_sigmoid_at_zero(self):
        assert nc.sigmoid(nc.Tensor([0.0])).data[0] == pytest.approx(0.5, abs=1e-15)

    def test_relu_definition(self):
        out = nc.relu(nc.Tensor([-1.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 2.0])

    def test_softmax_rows_normalized(self):
        rng = np.random.default_rng(3)
        x = nc.Tensor(rng.normal(size=(7, 5)) * 10)
        rows = nc.softmax_rows(x).data
        assert np.all(rows >= 0)
        np.testing.assert_allclose(rows.sum(axis=-1), 1.0, atol=1e-12)

    def test_mse_examples(self):
        a = nc.Tensor([0.0, 0.0])
        b = nc.Tensor([2.0, 0.0])
        assert nc.mse(a, b).item() == pytest.approx(2.0, abs=1e-15)
        assert nc.mse(a, a).item() == 0.0

    def test_mse_matches_scalar_loop(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(4, 6))
        b = rng.normal(size=(4, 6))
        expected = sum(
            (a[i, j] - b[i, j]) ** 2 for i in range(4) for j in range(6)
        ) / 24
        got = nc.mse(nc.Tensor(a), nc.Tensor(b)).item()
        assert got == pytest.approx(expected, abs=1e-12)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            nc.matmul(nc.Tensor(np.ones((2, 3))), nc.Tensor(np.ones((4, 2))))
        with pytest.raises(ValueError):
            nc.mse(nc.Tensor([1.0]), nc.Tensor([1.0, 2.0]))
        with pytest.raises(ValueError):
            nc.add(nc.Tensor(np.ones((2, 3))), nc.Tensor(np.ones((2, 2))))

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            nc.Tensor([np.nan])
        with pytest.raises(ValueError):
            nc.Tensor([np.inf, 1.0])


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = nc.Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        nc.backward(nc.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_sigmoid_derivative_at_zero(self):
        x = nc.Tensor([0.0], requires_grad=True)
        nc.backward(nc.sum_all(nc.sigmoid(x)))
        assert x.grad[0] == pytest.approx(0.25, abs=1e-14)

    def test_accumulation_over_reuse(self):
        x = nc.Tensor([2.0], requires_grad=True)
        y = nc.add(x, x)
        nc.backward(nc.sum_all(y))
        np.testing.assert_allclose(x.grad, [2.0])

    def test_non_scalar_loss_rejected(self):
        x = nc.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            nc.backward(nc.relu(x))

    def test_graph_reuse_rejected(self):
        x = nc.Tensor([1.0], requires_grad=True)
        loss = nc.sum_all(nc.sigmoid(x))
        nc.backward(loss)
        with pytest.raises(ValueError):
            nc.backward(loss)

    def test_no_grad_disables_recording(self):
        x = nc.Tensor([1.0], requires_grad=True)
        with nc.no_grad():
            y = nc.sigmoid(x)
        assert not y.requires_grad
        with pytest.raises(ValueError):
            nc.backward(nc.sum_all(y))


class TestGradientChecks:
    """Analytic vs central finite differences, h=1e-5, rel err <= 1e-5."""

    def test_matmul(self):
        rng = np.random.default_rng(1)
        arrays = [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]
        check_gradients(lambda t: nc.sum_all(nc.matmul(t[0], t[1])), arrays)

    def test_matmul_batched(self):
        rng = np.random.default_rng(2)
        arrays = [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))]
        check_gradients(
            lambda t: nc.mse(nc.matmul(t[0], t[1]), nc.Tensor(np.zeros((2, 3, 5)))),
            arrays,
        )

    def test_add_broadcast_bias(self):
        rng = np.random.default_rng(3)
        arrays = [rng.normal(size=(5, 4)), rng.normal(size=(4,))]
        check_gradients(lambda t: nc.sum_all(nc.sigmoid(nc.add(t[0], t[1]))), arrays)

    def test_relu(self):
        rng = np.random.default_rng(4)
        arrays = [rng.normal(size=(6, 3)) + 0.05]  # keep away from the kink
        check_gradients(lambda t: nc.mse(nc.relu(t[0]), nc.Tensor(np.ones((6, 3)))), arrays)

    def test_sigmoid(self):
        rng = np.random.default_rng(5)
        arrays = [rng.normal(size=(4, 4))]
        check_gradients(lambda t: nc.sum_all(nc.sigmoid(t[0])), arrays)

    def test_softmax_rows(self):
        rng = np.random.default_rng(6)
        arrays = [rng.normal(size=(3, 5))]
        target = np.random.default_rng(7).random((3, 5))
        check_gradients(lambda t: nc.mse(nc.softmax_rows(t[0]), nc.Tensor(target)), arrays)

    def test_layer_norm(self):
        rng = np.random.default_rng(8)
        arrays = [rng.normal(size=(4, 6)), rng.normal(size=(6,)), rng.normal(size=(6,))]
        target = np.random.default_rng(9).normal(size=(4, 6))
        check_gradients(
            lambda t: nc.mse(nc.layer_norm(t[0], t[1], t[2]), nc.Tensor(target)),
            arrays,
            tol=2e-5,
        )

    def test_concat_scale_transpose(self):
        rng = np.random.default_rng(10)
        arrays = [rng.normal(size=(3, 2)), rng.normal(size=(3, 4))]

        def build(t):
            joined = nc.concat([t[0], t[1]], axis=-1)
            return nc.sum_all(nc.scale(nc.transpose(joined), 0.7))

        check_gradients(build, arrays)

    def test_two_layer_net(self):
        """Composed MLP: analytic vs finite differences within 1e-5."""
        rng = np.random.default_rng(12)
        x = rng.normal(size=(5, 7))
        target = rng.random((5, 3))
        arrays = [
            rng.normal(size=(7, 6)) * 0.5,
            rng.normal(size=(6,)) * 0.1,
            rng.normal(size=(6, 3)) * 0.5,
            rng.normal(size=(3,)) * 0.1,
        ]

        def build(t):
            h = nc.relu(nc.add(nc.matmul(nc.Tensor(x), t[0]), t[1]))
            y = nc.sigmoid(nc.add(nc.matmul(h, t[2]), t[3]))
            return nc.mse(y, nc.Tensor(target))

        check_gradients(build, arrays)


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = nc.Tensor([1.0, -2.0], requires_grad=True)
        opt = nc.Adam([p], lr=0.1)
        p.grad = np.zeros(2)
        before = p.data.copy()
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_magnitude_is_lr(self):
        # bias-corrected ratio m_hat/sqrt(v_hat) is +-1 for any constant gradient
        p = nc.Tensor([0.0], requires_grad=True)
        opt = nc.Adam([p], lr=0.01)
        p.grad = np.array([3.7])
        opt.step()
        assert abs(p.data[0]) == pytest.approx(0.01, rel=1e-6)
        assert p.data[0] < 0  # moves against the gradient

    def test_quadratic_convergence(self):
        p = nc.Tensor([5.0], requires_grad=True)
        opt = nc.Adam([p], lr=0.1)
        for _ in range(500):
            opt.zero_grad()
            loss = nc.mse(p, nc.Tensor([0.0]))
            nc.backward(loss)
            opt.step()
        assert abs(p.item()) < 1e-2

    def test_invalid_lr(self):
        with pytest.raises(ValueError):
            nc.Adam([], lr=0.0)


class TestDeterminism:
    def test_identical_seeds_bitwise_identical(self):
        def run():
            rng = np.random.default_rng(99)
            w = nc.glorot_uniform((4, 3), 4, 3, rng)
            x = nc.Tensor(rng.normal(size=(2, 4)))
            loss = nc.mse(nc.sigmoid(nc.matmul(x, w)), nc.Tensor(np.zeros((2, 3))))
            nc.backward(loss)
            opt = nc.Adam([w], lr=1e-2)
            opt.step()
            return w.data.copy(), loss.item()

        w1, l1 = run()
        w2, l2 = run()
        np.testing.assert_array_equal(w1, w2)
        assert l1 == l2


class TestConvergenceRule:
    def test_stops_after_patience_stalls(self):
        rule = nc.ConvergenceRule(rel_tol=1e-4, patience=5)
        losses = [1.0, 0.5, 0.25] + [0.2499999] * 10
        fired_at = None
        for i, loss in enumerate(losses):
            if rule.update(loss):
                fired_at = i
                break
        # first stall at index 4 (0.2499999 after 0.25 improves < tol); fires on the 5th
        assert fired_at == 7

    def test_improvement_resets(self):
        rule = nc.ConvergenceRule(rel_tol=1e-4, patience=2)
        assert not rule.update(1.0)
        assert not rule.update(0.99999)   # stall 1
        assert not rule.update(0.5)       # big improvement resets
        assert not rule.update(0.49999)   # stall 1
        assert rule.update(0.499985)      # stall 2 -> stop
