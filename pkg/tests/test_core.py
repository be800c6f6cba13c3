import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duet.core import Layer, Mlp, Rng, SgdState, as_matrix, fd_check, matmul, mlp_backward, mlp_forward
from duet.errors import InputError


def naive_matmul(a, b):
    """Independent triple-loop oracle."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(a, np.eye(2)), a)

    def test_dot_product(self):
        assert matmul([[1.0, 2.0]], [[3.0], [4.0]])[0, 0] == 11.0

    def test_against_naive_oracle(self):
        rng = Rng(3).generator
        a = rng.standard_normal((5, 7))
        b = rng.standard_normal((7, 3))
        assert np.max(np.abs(matmul(a, b) - naive_matmul(a, b))) < 1e-12

    def test_shape_error(self):
        with pytest.raises(InputError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_rejects_non_2d(self):
        with pytest.raises(InputError):
            as_matrix(np.ones(4))

    @given(st.integers(0, 2**32))
    @settings(max_examples=20, deadline=None)
    def test_associativity(self, seed):
        rng = Rng(seed).generator
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 5))
        c = rng.standard_normal((5, 2))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        assert np.max(np.abs(left - right)) <= 1e-9 * max(1.0, np.max(np.abs(left)))


class TestMlpForward:
    def test_zero_net_is_zero_map(self):
        net = Mlp([Layer(np.zeros((3, 4)), np.zeros(3), "identity")])
        y, _ = mlp_forward(net, np.array([1.0, -2.0, 3.0, 0.5]))
        assert np.array_equal(y, np.zeros(3))

    def test_identity_layer(self):
        net = Mlp([Layer(np.eye(4), np.zeros(4), "identity")])
        x = np.array([0.3, -1.2, 5.0, 0.0])
        y, _ = mlp_forward(net, x)
        assert np.array_equal(y, x)

    def test_two_layer_relu_matches_scalar_evaluation(self):
        rng = Rng(11)
        net = Mlp.init([3, 4, 2], rng)
        x = rng.child("x").standard_normal(3)
        y, _ = mlp_forward(net, x)

        # hand-rolled scalar re-evaluation
        hidden = []
        w1, b1 = net.layers[0].weight, net.layers[0].bias
        for i in range(4):
            s = b1[i]
            for j in range(3):
                s += w1[i, j] * x[j]
            hidden.append(max(s, 0.0))
        w2, b2 = net.layers[1].weight, net.layers[1].bias
        expected = []
        for i in range(2):
            s = b2[i]
            for j in range(4):
                s += w2[i, j] * hidden[j]
            expected.append(s)
        assert np.max(np.abs(y - np.array(expected))) < 1e-12

    def test_dim_mismatch(self):
        net = Mlp.init([3, 2], Rng(0))
        with pytest.raises(InputError):
            mlp_forward(net, np.ones(4))

    def test_chain_mismatch_rejected(self):
        with pytest.raises(InputError):
            Mlp([
                Layer(np.zeros((3, 4)), np.zeros(3), "relu"),
                Layer(np.zeros((2, 5)), np.zeros(2), "identity"),
            ])


class TestMlpBackward:
    def test_zero_cotangent(self):
        net = Mlp.init([3, 5, 2], Rng(1))
        y, tape = mlp_forward(net, np.ones(3))
        grads = mlp_backward(net, tape, np.zeros_like(y))
        for dw, db in grads.layers:
            assert not dw.any() and not db.any()
        assert not grads.d_input.any()

    def test_scalar_linear_net(self):
        # y = w*x, dL/dy = 1 -> dL/dw = x
        net = Mlp([Layer(np.array([[2.0]]), np.zeros(1), "identity")])
        y, tape = mlp_forward(net, np.array([3.0]))
        grads = mlp_backward(net, tape, np.array([1.0]))
        assert grads.layers[0][0][0, 0] == 3.0
        assert grads.layers[0][1][0] == 1.0
        assert grads.d_input[0] == 2.0

    def test_stale_tape_rejected(self):
        net = Mlp.init([2, 2], Rng(5))
        y, tape = mlp_forward(net, np.ones(2))
        net.layers[0].weight += 0.1
        net.touch()
        with pytest.raises(InputError):
            mlp_backward(net, tape, np.ones_like(y))

    def test_gradients_match_finite_differences(self):
        # 20 random architectures up to 3 layers, width <= 32
        arch_rng = Rng(2024)
        for trial in range(20):
            r = arch_rng.child("trial", trial)
            n_layers = int(r.child("L").integers(1, 4))
            dims = [int(d) for d in r.child("dims").integers(1, 33, size=n_layers + 1)]
            acts = [
                ["relu", "tanh", "identity"][int(a)]
                for a in r.child("acts").integers(0, 3, size=n_layers)
            ]
            net = Mlp.init(dims, r.child("init"), activations=acts)
            x = r.child("x").standard_normal(dims[0])
            u = r.child("u").standard_normal(dims[-1])

            def objective(flat, net=net, x=x, u=u):
                net.set_flat(flat)
                y, tape = mlp_forward(net, x)
                grads = mlp_backward(net, tape, u)
                flat_grad = np.concatenate(
                    [np.concatenate([dw.ravel(), db]) for dw, db in grads.layers]
                )
                return float(y @ u), flat_grad

            err = fd_check(objective, net.get_flat())
            assert err < 1e-4, f"trial {trial}: fd error {err}"


class TestFdCheck:
    def test_quadratic(self):
        def f(p):
            return float(p @ p), 2.0 * p

        assert fd_check(f, np.array([0.5, -1.5, 2.0])) < 1e-8

    def test_softplus_sum(self):
        def f(p):
            return float(np.sum(np.log1p(np.exp(p)))), 1.0 / (1.0 + np.exp(-p))

        assert fd_check(f, np.array([-2.0, 0.0, 1.5, 3.0])) < 1e-6

    def test_infonce_on_four_pairs(self):
        from duet.align import infonce_loss

        rng = Rng(7)
        v = rng.child("v").standard_normal((4, 6))
        h = rng.child("h").standard_normal((4, 6))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        h /= np.linalg.norm(h, axis=1, keepdims=True)

        def f(flat):
            vv = flat[:24].reshape(4, 6)
            hh = flat[24:].reshape(4, 6)
            loss, dv, dh = infonce_loss(vv, hh, 0.07)
            return loss, np.concatenate([dv.ravel(), dh.ravel()])

        assert fd_check(f, np.concatenate([v.ravel(), h.ravel()])) < 1e-4


class TestSgd:
    def test_momentum_zero_is_plain_gradient_descent(self):
        p = np.array([1.0, 2.0, 3.0])
        g = np.array([0.5, -1.0, 0.25])
        expected = p - 0.1 * g
        opt = SgdState(lr=0.1, momentum=0.0, weight_decay=0.0)
        opt.step([p], [g])
        assert np.array_equal(p, expected)

    def test_update_rule(self):
        # two steps, checked against the recurrence by hand
        p = np.array([1.0])
        opt = SgdState(lr=0.1, momentum=0.9, weight_decay=0.01)
        g1, g2 = np.array([2.0]), np.array([-1.0])
        v = 0.9 * 0.0 + 2.0 + 0.01 * 1.0
        p1 = 1.0 - 0.1 * v
        opt.step([p], [g1])
        assert abs(p[0] - p1) < 1e-15
        v = 0.9 * v + (-1.0) + 0.01 * p1
        p2 = p1 - 0.1 * v
        opt.step([p], [g2])
        assert abs(p[0] - p2) < 1e-15

    def test_shape_guard(self):
        opt = SgdState(lr=0.1)
        with pytest.raises(InputError):
            opt.step([np.zeros(3)], [np.zeros(4)])


class TestRng:
    def test_reproducible_streams(self):
        a = Rng(42).uniform(size=10**4)
        b = Rng(42).uniform(size=10**4)
        assert np.array_equal(a, b)

    def test_children_are_order_independent(self):
        r1 = Rng(9)
        first = r1.child("a").standard_normal(5)
        _ = r1.child("b").standard_normal(100)
        r2 = Rng(9)
        _ = r2.child("b").standard_normal(3)
        second = r2.child("a").standard_normal(5)
        assert np.array_equal(first, second)

    def test_distinct_names_give_distinct_streams(self):
        r = Rng(1)
        assert not np.array_equal(
            r.child("x").standard_normal(8), r.child("y").standard_normal(8)
        )

    def test_seed_validation(self):
        with pytest.raises(InputError):
            Rng(-1)
