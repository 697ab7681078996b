import numpy as np
import pytest

from omnifer import autodiff as ad
from omnifer.autodiff import (Graph, NonFiniteError, ShapeError, UnboundVariableError, constant,
                              evaluate, finite_diff, gradient, variable)


def grad_value(target, wrt, bindings, dtype=np.float64):
    nodes = gradient(target, wrt)
    return evaluate(nodes, bindings, dtype=dtype)


def test_scalar_product():
    x, y = variable("x"), variable("y")
    out = evaluate(x * y, {"x": np.array([2.0]), "y": np.array([3.0])})
    np.testing.assert_array_equal(out, [6.0])


def test_softmax_symmetric():
    out = evaluate(ad.softmax(variable("z")), {"z": np.zeros((1, 2))})
    np.testing.assert_allclose(out, [[0.5, 0.5]])


def test_relu_values():
    out = evaluate(ad.relu(variable("x")), {"x": np.array([-1.0, 2.0])})
    np.testing.assert_array_equal(out, [0.0, 2.0])


def test_square_first_and_second_derivative():
    x = variable("x")
    y = (x * x).sum()
    (dy,) = gradient(y, [x])
    (d2y,) = gradient(dy.sum(), [x])
    for point in (3.0, -1.5, 0.0, 7.25):
        b = {"x": np.array(point)}
        d1, d2 = evaluate([dy, d2y], b, dtype=np.float64)
        assert d1 == pytest.approx(2 * point)
        assert d2 == pytest.approx(2.0)


def test_cross_entropy_gradient_at_symmetric_logits():
    z = variable("z")
    loss = ad.softmax_cross_entropy(z, variable("y"))
    g = grad_value(loss, [z], {"z": np.zeros((1, 2)), "y": np.array([0])})[0]
    np.testing.assert_allclose(g, [[-0.5, 0.5]], atol=1e-12)
    assert float(evaluate(loss, {"z": np.zeros((1, 2)), "y": np.array([0])})) == pytest.approx(np.log(2), rel=1e-6)


def test_finite_diff_polynomial():
    g = finite_diff(lambda x: float(x ** 2), np.array(3.0), eps=1e-4)
    assert abs(float(g) - 6.0) < 1e-6


def test_finite_diff_constant_is_zero():
    np.testing.assert_array_equal(finite_diff(lambda x: 4.0, np.ones(5)), np.zeros(5))


def test_finite_diff_matches_ce_gradient():
    rng = np.random.default_rng(0)
    z = variable("z")
    y = rng.integers(0, 4, size=6)
    loss = ad.softmax_cross_entropy(z, constant(y))
    point = rng.standard_normal((6, 4))
    g = grad_value(loss, [z], {"z": point})[0]
    fd = finite_diff(lambda v: float(evaluate(loss, {"z": v}, dtype=np.float64)), point, eps=1e-5)
    assert np.abs(g - fd).max() / np.abs(fd).max() < 1e-4


def test_third_power_second_derivative():
    x = variable("x")
    (g,) = gradient((x * x * x).sum(), [x])
    (h,) = gradient(g.sum(), [x])
    v = np.array([-2.0, 0.5, 3.0])
    np.testing.assert_allclose(evaluate(h, {"x": v}, dtype=np.float64), 6 * v)


# --- compositions for the randomized property --------------------------------

def _mlp_case(rng):
    x, w1, w2 = variable("x"), variable("w1"), variable("w2")
    y = rng.integers(0, 3, size=5)
    loss = ad.softmax_cross_entropy(ad.tanh(x @ w1) @ w2, constant(y))
    pts = {"x": rng.standard_normal((5, 4)), "w1": rng.standard_normal((4, 6)),
           "w2": rng.standard_normal((6, 3))}
    return loss, [x, w1, w2], pts


def _broadcast_case(rng):
    a, b, c = variable("a"), variable("b"), variable("c")
    loss = ad.reduce_mean((a * b + c) * ad.tanh(a))
    pts = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4,)), "c": rng.standard_normal((1, 4))}
    return loss, [a, b, c], pts


def _pool_case(rng):
    x, w = variable("x"), variable("w")
    pooled = ad.mean_pool(ad.tanh(x), 2)
    loss = ad.reduce_sum(ad.reshape(pooled, (2, 4)) @ w)
    pts = {"x": rng.standard_normal((2, 4, 4, 1)), "w": rng.standard_normal((4, 2))}
    return loss, [x, w], pts


def _softmax_case(rng):
    z, t = variable("z"), variable("t")
    loss = ad.reduce_sum(ad.softmax(z) * t) - ad.reduce_mean(ad.scale(z, 0.3))
    pts = {"z": rng.standard_normal((3, 5)), "t": rng.standard_normal((3, 5))}
    return loss, [z, t], pts


def _relu_case(rng):
    x, w = variable("x"), variable("w")
    loss = ad.reduce_sum(ad.relu(x @ w) * ad.relu(x @ w)) - ad.reduce_sum(ad.transpose(w))
    # keep pre-activations away from the kink where central differences break down
    while True:
        xs, ws = rng.standard_normal((4, 3)), rng.standard_normal((3, 2))
        if np.abs(xs @ ws).min() > 1e-3:
            break
    return loss, [x, w], {"x": xs, "w": ws}


CASES = [_mlp_case, _broadcast_case, _pool_case, _softmax_case, _relu_case]


def _check(case, seed, dtype, tol, eps):
    rng = np.random.default_rng(seed)
    loss, wrt, pts = case(rng)
    grads = evaluate(gradient(loss, wrt), pts, dtype=dtype)
    for var, g in zip(wrt, grads):
        def fn(v, name=var.name):
            b = dict(pts)
            b[name] = v
            return float(evaluate(loss, b, dtype=np.float64))
        fd = finite_diff(fn, pts[var.name], eps)
        err = np.abs(g - fd).max() / max(np.abs(fd).max(), np.abs(g).max(), 1e-12)
        assert err < tol, (case.__name__, seed, var.name, err)


def test_gradient_matches_finite_differences_1000_seeds():
    for seed in range(1000):
        _check(CASES[seed % len(CASES)], seed, np.float64, 1e-4, 1e-6)


def test_gradient_matches_finite_differences_float32():
    for seed in range(50):
        _check(CASES[seed % len(CASES)], seed, np.float32, 1e-2, 1e-4)


@pytest.mark.parametrize("case", CASES, ids=lambda c: c.__name__)
def test_second_order_matches_finite_differences(case):
    rng = np.random.default_rng(7)
    loss, wrt, pts = case(rng)
    g = gradient(loss, wrt)
    # directional second derivative: d/dv of <grad, u>
    u = {v.name: rng.standard_normal(pts[v.name].shape) for v in wrt}
    inner = None
    for var, gv in zip(wrt, g):
        term = ad.reduce_sum(gv * constant(u[var.name]))
        inner = term if inner is None else inner + term
    target = wrt[0]
    h = evaluate(gradient(inner, [target]), pts, dtype=np.float64)[0]

    def fn(v):
        b = dict(pts)
        b[target.name] = v
        return float(evaluate(inner, b, dtype=np.float64))

    fd = finite_diff(fn, pts[target.name], 1e-5)
    assert np.abs(h - fd).max() / max(np.abs(fd).max(), 1e-12) < 1e-4


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((10, 6)) * 5
    s = evaluate(ad.softmax(variable("z")), {"z": z}, dtype=np.float64)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    s2 = evaluate(ad.softmax(variable("z")), {"z": z + 100.0}, dtype=np.float64)
    np.testing.assert_allclose(s, s2, atol=1e-12)


def test_large_logits_stay_finite():
    z = np.array([[1000.0, 0.0], [-1000.0, 0.0]])
    s = evaluate(ad.softmax(variable("z")), {"z": z}, dtype=np.float64)
    assert np.isfinite(s).all()


def test_evaluation_is_deterministic():
    loss, wrt, pts = _mlp_case(np.random.default_rng(11))
    graph = Graph([loss] + gradient(loss, wrt))
    a = graph.run(pts)
    b = graph.run(pts)
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


def test_unbound_variable():
    with pytest.raises(UnboundVariableError):
        evaluate(variable("x") + variable("y"), {"x": np.ones(2)})


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        evaluate(variable("a") @ variable("b"), {"a": np.ones((2, 3)), "b": np.ones((2, 3))})


def test_non_finite_intermediate():
    x = variable("x")
    with pytest.raises(NonFiniteError):
        evaluate(x * x, {"x": np.array([1e200])}, dtype=np.float64)


def test_gradient_of_unreachable_variable_is_zero():
    x, y = variable("x"), variable("y")
    gx, gy = evaluate(gradient((x * x).sum(), [x, y]), {"x": np.ones(3), "y": np.ones(2)})
    np.testing.assert_array_equal(gy, np.zeros(2))


def test_gradient_requires_scalar():
    x = variable("x")
    with pytest.raises(ShapeError):
        evaluate(gradient(x * x, [x]), {"x": np.ones(3)})


def test_default_dtype_and_precision_context():
    assert ad.get_default_dtype() == np.float32
    out = evaluate(variable("x") * 2.0, {"x": np.ones(2)})
    assert out.dtype == np.float32
    with ad.precision(np.float64):
        assert evaluate(variable("x") * 2.0, {"x": np.ones(2)}).dtype == np.float64
    assert ad.get_default_dtype() == np.float32


def test_node_ids_are_topological():
    loss, wrt, _ = _mlp_case(np.random.default_rng(0))
    order = ad._ancestors([loss])
    seen = set()
    for node in order:
        assert all(inp.id in seen for inp in node.inputs)
        seen.add(node.id)
