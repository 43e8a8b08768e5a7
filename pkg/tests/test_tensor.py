import math

import numpy as np
import pytest

from mopdistill import tensor as T
from mopdistill.optim import Adam, NonFiniteGradient, SGD
from mopdistill.tensor import Tensor


def test_softmax_symmetry():
    out = T.softmax(Tensor([0.0, 0.0]))
    assert np.allclose(out.data, [0.5, 0.5], atol=1e-15)


def test_softmax_closed_form():
    out = T.softmax(Tensor([1.0, 3.0]))
    e2 = math.exp(2.0)
    assert np.allclose(out.data, [1 / (1 + e2), e2 / (1 + e2)], rtol=1e-14)


def test_softmax_rows_sum_to_one_and_shift_invariance():
    rng = np.random.default_rng(7)
    for _ in range(100):
        x = rng.normal(scale=5.0, size=(4, 9))
        s = T.softmax(Tensor(x)).data
        assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-12)
        shifted = T.softmax(Tensor(x + rng.normal())).data
        assert np.allclose(s, shifted, atol=1e-12)


def test_logsumexp_uniform_case():
    out = T.logsumexp(Tensor([0.0] * 5))
    assert abs(out.item() - math.log(5)) < 1e-12


def test_logsumexp_stable_for_large_inputs():
    out = T.logsumexp(Tensor([1000.0, 1000.0]))
    assert np.isfinite(out.item())
    assert abs(out.item() - (1000.0 + math.log(2))) < 1e-9


def test_shape_mismatch_rejected_with_diagnostic():
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(T.ShapeError, match="add"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    y = T.mul(x, x)
    T.backward(y)
    assert abs(float(x.grad) - 6.0) < 1e-14


def test_backward_softmax_component():
    x = Tensor([0.0, 0.0], requires_grad=True)
    y = T.softmax(x)[0]
    T.backward(y)
    assert np.allclose(x.grad, [0.25, -0.25], atol=1e-14)


def test_backward_rejects_non_scalar_seed():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = T.mul(x, x)
    with pytest.raises(ValueError, match="scalar"):
        T.backward(y)


def test_backward_shared_gradient_buffers_do_not_alias():
    # add() hands the same upstream array to both parents; accumulation into
    # one parent must not corrupt the other.
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0, 4.0], requires_grad=True)
    s = T.add(x, y)
    loss = T.reduce_sum(T.add(T.mul(s, s), T.mul(x, x)))
    T.backward(loss)
    # d/dx = 2(x+y) + 2x, d/dy = 2(x+y)
    assert np.allclose(x.grad, 2 * (x.data + y.data) + 2 * x.data)
    assert np.allclose(y.grad, 2 * (x.data + y.data))


def _rel_err(a, b):
    scale = max(abs(a), abs(b), 1e-6)
    return abs(a - b) / scale


@pytest.mark.parametrize("op_name", [
    "add", "sub", "mul", "matmul", "relu", "softmax", "logsumexp",
    "layer_norm", "concat", "gather", "mean", "attention", "broadcast",
])
def test_primitive_gradients_match_finite_differences(op_name):
    rng = np.random.default_rng(hash(op_name) % 2**32)
    for trial in range(100):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True, name="a")
        b = Tensor(rng.normal(size=(3, 4)), requires_grad=True, name="b")
        w = Tensor(rng.normal(size=(4, 5)), requires_grad=True, name="w")

        if op_name == "add":
            fn = lambda: T.reduce_sum(T.mul(T.add(a, b), T.add(a, b)))
            params = [a, b]
        elif op_name == "sub":
            fn = lambda: T.reduce_sum(T.mul(T.sub(a, b), T.sub(a, b)))
            params = [a, b]
        elif op_name == "mul":
            fn = lambda: T.reduce_sum(T.mul(a, b))
            params = [a, b]
        elif op_name == "matmul":
            fn = lambda: T.reduce_sum(T.mul(T.matmul(a, w), T.matmul(a, w)))
            params = [a, w]
        elif op_name == "relu":
            # keep values away from the kink where central differences lie
            a.data[np.abs(a.data) < 0.05] += 0.1
            fn = lambda: T.reduce_sum(T.mul(T.relu(a), T.relu(a)))
            params = [a]
        elif op_name == "softmax":
            fn = lambda: T.reduce_sum(T.mul(T.softmax(a), b))
            params = [a]
        elif op_name == "logsumexp":
            fn = lambda: T.reduce_sum(T.logsumexp(a))
            params = [a]
        elif op_name == "layer_norm":
            g = Tensor(rng.normal(size=(4,)), requires_grad=True, name="g")
            bb = Tensor(rng.normal(size=(4,)), requires_grad=True, name="bb")
            fn = lambda: T.reduce_sum(T.mul(T.layer_norm(a, g, bb), b))
            params = [a, g, bb]
        elif op_name == "concat":
            fn = lambda: T.reduce_sum(T.mul(T.concat([a, b], axis=1),
                                            T.concat([b, a], axis=1)))
            params = [a, b]
        elif op_name == "gather":
            idx = rng.integers(0, 4, size=3)
            fn = lambda: T.reduce_sum(T.mul(T.gather(a, idx), T.gather(b, idx)))
            params = [a]
        elif op_name == "mean":
            fn = lambda: T.reduce_sum(T.mul(T.reduce_mean(a, axis=0, keepdims=True), b))
            params = [a]
        elif op_name == "attention":
            q = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True, name="q")
            k = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True, name="k")
            v = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True, name="v")
            c = rng.normal(size=(2, 3, 4))
            fn = lambda: T.reduce_sum(T.mul(T.attention(q, k, v), Tensor(c)))
            params = [q, k, v]
        elif op_name == "broadcast":
            e = Tensor(rng.normal(size=(1, 4)), requires_grad=True, name="e")
            fn = lambda: T.reduce_sum(T.mul(T.broadcast_to(e, (3, 4)), b))
            params = [e]

        report = T.finite_diff_check(fn, params)
        assert report["max_rel_error"] < 1e-4, (op_name, trial, report)
        if trial >= 4:  # 5 full FD sweeps per op keeps the suite quick
            break


def test_two_layer_network_gradient_matches_finite_differences():
    rng = np.random.default_rng(42)
    x = Tensor(rng.normal(size=(6, 5)))
    w1 = Tensor(rng.normal(size=(5, 8), scale=0.5), requires_grad=True, name="w1")
    b1 = Tensor(np.zeros(8), requires_grad=True, name="b1")
    w2 = Tensor(rng.normal(size=(8, 3), scale=0.5), requires_grad=True, name="w2")
    b2 = Tensor(np.zeros(3), requires_grad=True, name="b2")
    target = rng.normal(size=(6, 3))

    def loss_fn():
        h = T.relu(T.add(T.matmul(x, w1), b1))
        out = T.add(T.matmul(h, w2), b2)
        d = T.sub(out, Tensor(target))
        return T.reduce_mean(T.mul(d, d))

    report = T.finite_diff_check(loss_fn, [w1, b1, w2, b2])
    assert report["max_rel_error"] < 1e-4, report


def test_finite_diff_check_linear_map_zero_error():
    x = Tensor([1.5, -2.0], requires_grad=True, name="x")
    report = T.finite_diff_check(lambda: T.reduce_sum(T.mul(x, 2.0)), [x])
    assert report["max_rel_error"] < 1e-9


def test_finite_diff_check_flags_corrupted_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True, name="x")

    def corrupted():
        # wrong backward rule: claims d(3x)/dx = 1
        return Tensor(x.data.sum() * 3.0, requires_grad=True, parents=(x,),
                      grad_fns=(lambda g: np.ones_like(x.data) * g,))

    report = T.finite_diff_check(corrupted, [x])
    assert report["max_rel_error"] > 1e-4
    name, idx, analytic, numeric = report["worst"]
    assert name == "x"
    assert abs(numeric - 3.0) < 1e-6


def test_graph_reevaluation_is_bit_identical():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 4))
    w = rng.normal(size=(4, 4))

    def run():
        t = T.matmul(Tensor(x), Tensor(w))
        t = T.softmax(T.relu(t))
        return t.data.tobytes()

    assert run() == run()


def test_input_gradients_available_alongside_parameters():
    # attacks need d(loss)/d(input) from the same backward pass
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True, name="x")
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True, name="w")
    loss = T.reduce_sum(T.softmax(T.matmul(x, w)))
    T.backward(loss)
    assert x.grad is not None and x.grad.shape == (2, 3)
    assert w.grad is not None and w.grad.shape == (3, 2)


def test_frozen_parameters_receive_no_gradient():
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=False)
    loss = T.reduce_sum(T.matmul(x, w))
    T.backward(loss)
    assert w.grad is None
    assert x.grad is not None


def test_layer_norm_epsilon_keeps_zero_input_finite():
    x = Tensor(np.zeros((3, 4)))
    g = Tensor(np.ones(4))
    b = Tensor(np.zeros(4))
    out = T.layer_norm(x, g, b)
    assert np.all(np.isfinite(out.data))


# -- optimizers ----------------------------------------------------------


def test_adam_zero_gradient_leaves_parameters_unchanged():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True, name="p")
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.zeros(2)
    before = p.data.copy()
    opt.step()
    assert np.array_equal(p.data, before)


def test_adam_constant_gradient_moves_monotonically_against_sign():
    p = Tensor(np.array([0.0]), requires_grad=True, name="p")
    opt = Adam({"p": p}, lr=0.01)
    prev = p.data.copy()
    for _ in range(50):
        p.grad = np.array([2.5])
        opt.step()
        assert p.data[0] < prev[0]
        prev = p.data.copy()


def test_adam_first_step_magnitude_close_to_lr():
    # fresh state, one step: m/(1-b1) = g, v/(1-b2) = g^2, update = lr*g/(|g|+eps)
    lr = 0.003
    for g in (0.5, -4.0, 100.0):
        p = Tensor(np.array([1.0]), requires_grad=True, name="p")
        opt = Adam({"p": p}, lr=lr)
        p.grad = np.array([g])
        opt.step()
        expected = 1.0 - lr * np.sign(g) * abs(g) / (abs(g) + opt.eps)
        assert abs(p.data[0] - expected) < 1e-12
        assert abs(abs(1.0 - p.data[0]) - lr) < 1e-6


def test_adam_rejects_non_finite_gradient_with_parameter_name():
    p = Tensor(np.array([1.0]), requires_grad=True, name="p")
    q = Tensor(np.array([1.0]), requires_grad=True, name="q")
    opt = Adam({"p": p, "q": q}, lr=0.1)
    p.grad = np.array([1.0])
    q.grad = np.array([np.nan])
    before = p.data.copy()
    with pytest.raises(NonFiniteGradient, match="q"):
        opt.step()
    assert np.array_equal(p.data, before)  # nothing applied


def test_adam_skips_frozen_parameters_and_their_moments():
    p = Tensor(np.array([1.0]), requires_grad=True, name="p")
    f = Tensor(np.array([1.0]), requires_grad=False, name="f")
    opt = Adam({"p": p, "f": f}, lr=0.1)
    p.grad = np.array([1.0])
    f.grad = np.array([1.0])
    opt.step()
    assert "f" not in opt._m
    assert f.data[0] == 1.0


def test_sgd_step():
    p = Tensor(np.array([1.0]), requires_grad=True, name="p")
    opt = SGD({"p": p}, lr=0.5)
    p.grad = np.array([2.0])
    opt.step()
    assert abs(p.data[0] - 0.0) < 1e-15
