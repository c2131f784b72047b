import numpy as np
import pytest

import oracles
from fpnkit import ops
from fpnkit.errors import ShapeError
from fpnkit.tensor import Tensor, no_grad

TOL = 1e-4


def t(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def check_grads(build_loss, *leaves, floor=1e-3):
    """Compare analytic grads of every leaf against central differences."""
    for leaf in leaves:
        leaf.zero_grad()
    loss = build_loss()
    loss.backward()
    for leaf in leaves:
        with no_grad():
            numeric = oracles.finite_difference_grad(lambda: build_loss().item(), leaf.data)
        err = oracles.relative_error(leaf.grad, numeric, floor=floor)
        assert err < TOL, f"gradient mismatch {err} on leaf of shape {leaf.shape}"


class TestBackwardSemantics:
    def test_square_derivative(self):
        x = t([3.0])
        loss = ops.sum_all(ops.mul(x, x))
        loss.backward()
        assert np.array_equal(x.grad, [6.0])

    def test_sum_of_sigmoid_at_zero(self):
        x = t(np.zeros(5))
        ops.sum_all(ops.sigmoid(x)).backward()
        assert np.abs(x.grad - 0.25).max() < 1e-15

    def test_backward_requires_scalar(self, rng):
        x = t(rng.normal(size=(2, 2)))
        with pytest.raises(ShapeError, match="scalar"):
            ops.mul(x, x).backward()

    def test_unused_leaf_grad_is_exactly_zero(self, rng):
        used = t(rng.normal(size=3))
        unused = t(rng.normal(size=3))
        ops.sum_all(ops.mul(used, used)).backward()
        assert unused.grad is not None
        assert np.array_equal(unused.grad, np.zeros(3))

    def test_fanout_accumulates_sum_of_contributions(self):
        x = t([1.0])
        a = ops.mul(x, 2.0)
        loss = ops.sum_all(ops.add(ops.mul(a, 3.0), ops.mul(a, 4.0)))
        loss.backward()
        # double-visiting a node would double-count: dx = 2*3 + 2*4
        assert np.array_equal(x.grad, [14.0])

    def test_visits_in_reverse_creation_order(self, rng):
        x = t(rng.normal(size=2))
        a = ops.sigmoid(x)
        b = ops.relu(a)
        c = ops.mul(a, b)
        loss = ops.sum_all(c)
        visited = []
        for node, tag in ((a, "a"), (b, "b"), (c, "c"), (loss, "loss")):
            original = node._backward_fn

            def wrapped(g, original=original, tag=tag):
                visited.append(tag)
                original(g)

            node._backward_fn = wrapped
        loss.backward()
        assert visited == ["loss", "c", "b", "a"]

    def test_second_backward_raises(self, rng):
        x = t(rng.normal(size=3))
        loss = ops.sum_all(ops.sigmoid(x))
        loss.backward()
        with pytest.raises(RuntimeError, match="freed"):
            loss.backward()

    def test_linearity_of_backward(self, rng):
        xdata = rng.normal(size=4)

        def grad_of(fn):
            x = t(xdata.copy())
            fn(x).backward()
            return x.grad.copy()

        f = lambda x: ops.sum_all(ops.sigmoid(x))
        g = lambda x: ops.sum_all(ops.mul(x, x))
        a, b = 2.5, -1.25
        combined = grad_of(lambda x: ops.add(ops.mul(f(x), a), ops.mul(g(x), b)))
        assert np.abs(combined - (a * grad_of(f) + b * grad_of(g))).max() < 1e-12

    def test_no_grad_suppresses_graph(self, rng):
        x = t(rng.normal(size=3))
        with no_grad():
            y = ops.sigmoid(x)
        assert not y.requires_grad and y._parents == ()

    def test_determinism_bitwise(self, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, 3, 3))

        def run():
            xt, wt = t(x.copy()), t(w.copy())
            loss = ops.sum_all(ops.conv2d(xt, wt, stride=2, pad=1))
            loss.backward()
            return loss.item(), xt.grad.copy(), wt.grad.copy()

        la, xa, wa = run()
        lb, xb, wb = run()
        assert la == lb and np.array_equal(xa, xb) and np.array_equal(wa, wb)


class TestOpGradients:
    def test_conv2d(self, rng):
        x = t(rng.normal(size=(2, 3, 5, 5)))
        w = t(rng.normal(size=(4, 3, 3, 3)))
        b = t(rng.normal(size=4))
        check_grads(lambda: ops.sum_all(ops.sigmoid(ops.conv2d(x, w, b, stride=2, pad=1))), x, w, b)

    def test_transposed_conv2d(self, rng):
        x = t(rng.normal(size=(1, 2, 3, 3)))
        w = t(rng.normal(size=(2, 3, 4, 4)))
        b = t(rng.normal(size=3))
        check_grads(lambda: ops.sum_all(ops.sigmoid(ops.transposed_conv2d(x, w, b))), x, w, b)

    @pytest.mark.parametrize("op", [ops.bilinear_resize, ops.nearest_resize])
    def test_resizes(self, op, rng):
        x = t(rng.normal(size=(2, 2, 3, 4)))
        check_grads(lambda: ops.sum_all(ops.sigmoid(op(x))), x)

    def test_global_avg_pool(self, rng):
        x = t(rng.normal(size=(2, 3, 4, 4)))
        check_grads(lambda: ops.sum_all(ops.sigmoid(ops.global_avg_pool(x))), x)

    def test_cross_channel_mean(self, rng):
        x = t(rng.normal(size=(2, 3, 4, 4)))
        check_grads(lambda: ops.sum_all(ops.sigmoid(ops.cross_channel_mean(x))), x)

    def test_max_pool(self, rng):
        # well-separated values keep the argmax stable under perturbation
        x = t(rng.permutation(64).astype(np.float64).reshape(1, 1, 8, 8))
        check_grads(lambda: ops.sum_all(ops.sigmoid(ops.max_pool2d(x, 3, 2, 1))), x)

    @pytest.mark.parametrize("training", [True, False])
    def test_batch_norm(self, training, rng):
        x = t(rng.normal(size=(3, 2, 4, 4)))
        gamma = t(rng.uniform(0.5, 1.5, size=2))
        beta = t(rng.normal(size=2))
        rm, rv = rng.normal(size=2), rng.uniform(0.5, 2.0, size=2)

        def loss():
            out = ops.batch_norm(x, gamma, beta, rm.copy(), rv.copy(), training=training)
            return ops.sum_all(ops.sigmoid(out))

        check_grads(loss, x, gamma, beta)

    def test_relu(self, rng):
        x_data = rng.normal(size=(3, 3))
        x_data += 0.2 * np.sign(x_data)  # keep away from the kink
        x = t(x_data)
        check_grads(lambda: ops.sum_all(ops.sigmoid(ops.relu(x))), x)

    def test_fully_connected(self, rng):
        x = t(rng.normal(size=(3, 4)))
        w = t(rng.normal(size=(2, 4)))
        b = t(rng.normal(size=2))
        check_grads(lambda: ops.sum_all(ops.sigmoid(ops.fully_connected(x, w, b))), x, w, b)

    def test_softmax_cross_entropy(self, rng):
        logits = t(rng.normal(size=(4, 5)))
        targets = rng.dirichlet(np.ones(5), size=4)
        check_grads(lambda: ops.softmax_cross_entropy(logits, targets), logits)

    def test_add_mul_broadcast(self, rng):
        x = t(rng.normal(size=(2, 3, 4, 4)))
        m = t(rng.normal(size=(2, 1, 4, 4)))
        s = t(rng.normal(size=(2, 3)))
        check_grads(
            lambda: ops.sum_all(ops.sigmoid(ops.add(ops.mul(x, m), ops.channel_scale(x, s)))),
            x,
            m,
            s,
        )

    def test_concat_narrow_reshape(self, rng):
        a = t(rng.normal(size=(2, 3)))
        b = t(rng.normal(size=(2, 2)))

        def loss():
            joined = ops.concat([a, b], axis=1)
            left = ops.narrow(joined, 1, 0, 4)
            return ops.sum_all(ops.sigmoid(ops.reshape(left, (4, 2))))

        check_grads(loss, a, b)
