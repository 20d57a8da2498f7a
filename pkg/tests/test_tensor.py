import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mceiu import tensor as T
from mceiu.errors import ContractError, DomainError, NumericError, ShapeError


def leaf(x):
    return T.Tensor(np.asarray(x, dtype=float), requires_grad=True)


# --- forward values -----------------------------------------------------------


def test_matmul_identity_and_hand_values():
    A = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal((T.tensor(np.eye(3)) @ T.tensor(A)).data, A)
    out = T.matmul(T.tensor([[1.0, 2.0], [3.0, 4.0]]), T.tensor([[5.0], [6.0]]))
    assert out.data.tolist() == [[17.0], [39.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.tensor(np.ones((2, 3))), T.tensor(np.ones((2, 3))))


def test_elementwise_identities():
    x = T.tensor([1.5, -2.0, 3.0])
    assert np.array_equal(T.add(x, 0.0).data, x.data)
    assert np.array_equal(T.mul(x, 1.0).data, x.data)
    assert T.mul(T.tensor([2.0, 3.0]), T.tensor([4.0, 5.0])).data.tolist() == [8.0, 15.0]
    with pytest.raises(ShapeError):
        T.add(T.tensor(np.ones(3)), T.tensor(np.ones(4)))


def test_unary_values():
    assert T.sigmoid(0.0).item() == 0.5
    assert abs(T.sigmoid(1.0).item() - 0.7310585786300049) < 1e-12
    assert T.relu(-3.0).item() == 0.0
    assert T.ew_unary("neg", 2.0).item() == -2.0


def test_log_domain_error_names_index():
    with pytest.raises(DomainError, match=r"\(1,\)"):
        T.log(T.tensor([1.0, 0.0, 2.0]))


def test_concat():
    assert T.concat([T.tensor(np.ones(2)), T.tensor(np.ones(3))]).shape == (5,)
    assert T.concat([T.tensor(np.ones(128))] * 3).shape == (384,)
    with pytest.raises(ShapeError):
        T.concat([T.tensor(np.ones((2, 3))), T.tensor(np.ones((2, 4)))], axis=0)


def test_reductions():
    assert T.reduce("mean", T.tensor(np.full(5, 2.5))).item() == 2.5
    assert T.reduce("sum", T.tensor([1.0, 2.0, 3.0])).item() == 6.0
    x = leaf([1.0, 7.0, 3.0])
    m = T.reduce("max", x)
    assert m.item() == 7.0
    T.backward(m)
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_max_ties_route_to_lowest_index():
    x = leaf([[2.0, 5.0, 5.0], [4.0, 4.0, 1.0]])
    T.backward(T.reduce("sum", T.reduce("max", x, axis=1)))
    assert x.grad.tolist() == [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]


def test_empty_axis_is_domain_error():
    with pytest.raises(DomainError):
        T.reduce("max", T.tensor(np.ones((2, 0))), axis=1)


def test_softmax_values():
    assert np.allclose(T.softmax(T.tensor(np.zeros(4))).data, 0.25)
    assert np.allclose(T.softmax(T.tensor([0.0, np.log(3.0)])).data, [0.25, 0.75], atol=1e-15)
    with pytest.raises(NumericError):
        T.softmax(T.tensor([0.0, np.nan]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_normalized_and_shift_invariant(x, c):
    p = T.softmax(T.tensor(x), axis=-1).data
    assert np.all(p > 0)
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-6)
    assert np.allclose(T.softmax(T.tensor(x + c), axis=-1).data, p, atol=1e-9)


# --- backward -----------------------------------------------------------------


def test_backward_examples():
    x = leaf(np.arange(6.0).reshape(2, 3))
    T.backward(T.reduce("sum", x))
    assert np.array_equal(x.grad, np.ones((2, 3)))

    x = leaf([1.0, 2.0])
    T.backward(T.reduce("sum", x * x) / 1.0)
    assert x.grad.tolist() == [2.0, 4.0]
    T.backward(T.reduce("sum", x * x))
    assert x.grad.tolist() == [4.0, 8.0]


def test_backward_needs_scalar():
    with pytest.raises(ContractError):
        T.backward(leaf([1.0, 2.0]) * 2.0)


def test_no_grad_leaf_never_accumulates():
    a, b = leaf([1.0, 2.0]), T.tensor([3.0, 4.0])
    T.backward(T.reduce("sum", a * b))
    assert b.grad is None
    with T.no_grad():
        out = a * 3.0
    assert out.node is None and not out.requires_grad


def test_gradient_linearity():
    rng = np.random.default_rng(3)
    x = leaf(rng.normal(size=(3, 4)))
    W = T.tensor(rng.normal(size=(4, 2)))

    def l1():
        return T.reduce("sum", T.tanh(x @ W))

    def l2():
        return T.reduce("mean", T.square(T.sigmoid(x)))

    T.backward(l1() + l2())
    both = x.grad.copy()
    x.grad = None
    T.backward(l1())
    T.backward(l2())
    assert np.allclose(both, x.grad, atol=1e-12, rtol=0)


def test_shared_subexpression_gradient():
    x = leaf([0.3, -0.7])
    y = T.exp(x)
    T.backward(T.reduce("sum", y * y + y))
    e = np.exp(x.data)
    assert np.allclose(x.grad, 2 * e * e + e, rtol=1e-14)


def test_forward_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(9)
        x = T.tensor(rng.normal(size=(5, 6)))
        W = T.tensor(rng.normal(size=(6, 3)))
        return T.log_softmax(T.tanh(x @ W), axis=-1).data.tobytes()

    assert run() == run()


# --- grad_check ---------------------------------------------------------------


def test_grad_check_linear_is_exact():
    rng = np.random.default_rng(0)
    W = leaf(rng.normal(size=(3, 2)))
    c = rng.normal(size=(4, 3))
    # no truncation error for a linear map, so the widest step minimises rounding
    assert T.grad_check(lambda: T.reduce("sum", T.tensor(c) @ W), [W], eps=1e-3) < 1e-10


def test_grad_check_sigmoid_matmul():
    rng = np.random.default_rng(1)
    W = leaf(rng.normal(size=(3, 2)))
    x = leaf(rng.normal(size=(4, 3)))
    assert T.grad_check(lambda: T.reduce("sum", T.sigmoid(x @ W)), [W, x]) < 1e-6


def test_grad_check_contracts():
    x = leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        T.grad_check(lambda: x * 2.0, [x])
    with pytest.raises(ContractError):
        T.grad_check(lambda: T.reduce("sum", x), [x], eps=1e-9)


SMOOTH_OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (T.square(b) + 1.0),
    "matmul": lambda a, b: a @ T.transpose(b),
    "sigmoid": lambda a, b: T.sigmoid(a),
    "tanh": lambda a, b: T.tanh(a),
    "exp": lambda a, b: T.exp(a),
    "log": lambda a, b: T.log(T.square(a) + 0.5),
    "square": lambda a, b: T.square(a),
    "power": lambda a, b: T.power(T.square(a) + 1.0, 1.5),
    "softmax": lambda a, b: T.softmax(a, axis=-1) * b,
    "log_softmax": lambda a, b: T.log_softmax(a, axis=0) * b,
    "concat": lambda a, b: T.concat([a, b], axis=1) * 1.7,
    "stack": lambda a, b: T.stack([a, b], axis=0) * 0.3,
    "reshape": lambda a, b: T.reshape(a, (4, 3)),
    "transpose": lambda a, b: T.transpose(a) * T.transpose(b),
    "getitem": lambda a, b: a[1:, ::2] + a[np.array([0, 0])][:, :2],
    "mean": lambda a, b: T.reduce("mean", a * b, axis=0),
}


@pytest.mark.parametrize("name", sorted(SMOOTH_OPS))
def test_registered_ops_pass_grad_check(name):
    for seed in range(10):
        rng = np.random.default_rng([seed, 5])
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(3, 4)))
        probe = None

        def f():
            nonlocal probe
            out = SMOOTH_OPS[name](a, b)
            if probe is None:
                probe = rng.normal(size=out.shape)
            return T.reduce("sum", out * probe)

        assert T.grad_check(f, [a, b], eps=1e-5) < 1e-4, (name, seed)


def test_relu_and_max_grad_check_away_from_kinks():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(4, 5))
        x += 0.05 * np.sign(x)  # keep relu inputs off zero
        a = leaf(x)
        probe = rng.normal(size=(4,))
        assert T.grad_check(lambda: T.reduce("sum", T.reduce("max", T.relu(a), axis=1) * probe), [a], eps=1e-6) < 1e-4


def test_f32_mode():
    with T.precision("f32"):
        assert T.tensor([1.0]).data.dtype == np.float32
        with pytest.raises(ContractError):
            T.grad_check(lambda: T.reduce("sum", leaf([1.0])), [leaf([1.0])])
    assert T.get_precision() == "f64"


def test_kink_monitor_reports_margin():
    with T.kink_monitor() as mon:
        T.relu(T.tensor([0.3, -0.01, 2.0]))
        T.reduce("max", T.tensor([[1.0, 1.5, 0.2]]), axis=1)
    assert mon.margin == pytest.approx(0.01)
