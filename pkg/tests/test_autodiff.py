import numpy as np
import numpy.testing as npt
import pytest

from groundprobe.autodiff import (
    ExprGraph,
    GraphError,
    ShapeError,
    backward,
    finite_diff,
)


def test_sigmoid_at_zero():
    g = ExprGraph()
    s = g.op("sigmoid", g.input([0.0]))
    npt.assert_allclose(g.value(s), [0.5])


def test_softmax_symmetry():
    g = ExprGraph()
    s = g.op("softmax", g.input([0.0, 0.0]))
    npt.assert_allclose(g.value(s), [0.5, 0.5])


def test_concat_definition():
    g = ExprGraph()
    c = g.op("concat", g.input([1.0, 2.0]), g.input([3.0]))
    npt.assert_allclose(g.value(c), [1.0, 2.0, 3.0])


def test_dot_product_gradient_is_linear():
    # dot(x, w) built as sum(mul(x, w))
    g = ExprGraph()
    x = g.input([3.0, 4.0])
    w = g.input([1.0, 2.0])
    target = g.op("sum", g.op("mul", x, w))
    grads = backward(g, target)
    npt.assert_allclose(grads[x], [1.0, 2.0])
    npt.assert_allclose(grads[w], [3.0, 4.0])


def test_sigmoid_gradient_at_zero():
    g = ExprGraph()
    x = g.input([0.0])
    target = g.op("sum", g.op("sigmoid", x))
    npt.assert_allclose(backward(g, target)[x], [0.25])


def test_three_layer_composition_matches_finite_differences(rng):
    w1 = rng.standard_normal((5, 4))
    b1 = rng.standard_normal(5)
    w2 = rng.standard_normal((3, 5))
    x0 = rng.standard_normal(4)

    def build(xv):
        g = ExprGraph()
        x = g.input(xv)
        hidden = g.op("sigmoid", g.op("add", g.op("matvec", g.input(w1), x), g.input(b1)))
        out = g.op("softmax", g.op("matvec", g.input(w2), hidden))
        return g, x, g.op("pick", out, index=1)

    g, x, target = build(x0)
    grads = backward(g, target)

    def f(xv):
        g2, _, t2 = build(xv)
        return float(g2.value(t2)[0])

    npt.assert_allclose(grads[x], finite_diff(f, x0, 1e-5), rtol=1e-4, atol=1e-7)


def test_finite_diff_of_sum():
    npt.assert_allclose(finite_diff(lambda v: float(v.sum()), [1.0, 2.0], 1e-5),
                        [1.0, 1.0], atol=1e-9)


def test_finite_diff_of_square():
    npt.assert_allclose(finite_diff(lambda v: float(v[0] ** 2), [3.0], 1e-5),
                        [6.0], atol=1e-6)


_OP_CASES = [
    "matvec", "matmul", "add", "mul", "sigmoid", "tanh", "softmax",
    "concat", "slice", "embed", "pick", "log", "neg", "sum",
]


@pytest.mark.parametrize("op_kind", _OP_CASES)
def test_every_op_gradient_matches_finite_differences(op_kind):
    # 12 randomized shapes/seeds per op kind (>= 100 cases overall).
    for seed in range(12):
        rng = np.random.default_rng(1000 + seed)
        n = int(rng.integers(2, 6))
        m = int(rng.integers(2, 6))

        if op_kind in ("matvec", "matmul"):
            a = rng.standard_normal((n, m))
            b = rng.standard_normal(m) if op_kind == "matvec" else rng.standard_normal((m, n))
            inputs = [a, b]
        elif op_kind in ("add", "mul"):
            inputs = [rng.standard_normal(n), rng.standard_normal(n)]
        elif op_kind == "concat":
            inputs = [rng.standard_normal(n), rng.standard_normal(m)]
        elif op_kind == "embed":
            inputs = [rng.standard_normal((n, m))]
        elif op_kind == "log":
            inputs = [np.abs(rng.standard_normal(n)) + 0.5]
        else:
            inputs = [rng.standard_normal(n)]

        attrs = {}
        if op_kind == "slice":
            attrs = {"start": 0, "stop": max(1, n - 1)}
        elif op_kind == "embed":
            attrs = {"row": int(rng.integers(n))}
        elif op_kind == "pick":
            attrs = {"index": int(rng.integers(n))}

        # Random 1-D weighting before the reduction so every output coordinate
        # contributes distinctly to the checked scalar; the weights are fixed
        # per seed so rebuilds inside finite_diff see the same function.
        probe = ExprGraph()
        out_val = probe.value(probe.op(op_kind, *[probe.input(a) for a in inputs], **attrs))
        w = (np.random.default_rng(2000 + seed).standard_normal(out_val.shape)
             if out_val.ndim == 1 and out_val.size > 1 else None)

        def scalar_of(arrays):
            g = ExprGraph()
            ids = [g.input(arr) for arr in arrays]
            out = g.op(op_kind, *ids, **attrs)
            if w is not None:
                out = g.op("sum", g.op("mul", out, g.input(w)))
            elif g.value(out).size > 1 or g.value(out).ndim != 1:
                out = g.op("sum", out)
            return g, ids, out

        g, ids, target = scalar_of(inputs)
        grads = backward(g, target)
        for i, arr in enumerate(inputs):
            def f(xv, i=i):
                trial = [x if j != i else xv for j, x in enumerate(inputs)]
                g2, _, t2 = scalar_of(trial)
                return float(g2.value(t2)[0])

            npt.assert_allclose(grads[ids[i]], finite_diff(f, arr, 1e-5),
                                rtol=1e-4, atol=1e-7,
                                err_msg=f"{op_kind} grad of input {i}, seed {seed}")


def test_softmax_positive_and_normalized(rng):
    for _ in range(200):
        x = rng.standard_normal(int(rng.integers(1, 40))) * 10
        g = ExprGraph()
        s = g.value(g.op("softmax", g.input(x)))
        assert np.all(s > 0)
        assert abs(s.sum() - 1.0) <= 1e-9


def test_forward_and_backward_deterministic(rng):
    x = rng.standard_normal(6)
    w = rng.standard_normal((4, 6))

    def run():
        g = ExprGraph()
        xi = g.input(x)
        out = g.op("softmax", g.op("tanh", g.op("matvec", g.input(w), xi)))
        t = g.op("pick", out, index=2)
        return g.value(out), backward(g, t)[xi]

    v1, g1 = run()
    v2, g2 = run()
    assert np.array_equal(v1, v2)
    assert np.array_equal(g1, g2)


def test_gradient_shapes_match_value_shapes(rng):
    g = ExprGraph()
    x = g.input(rng.standard_normal(5))
    a = g.input(rng.standard_normal((3, 5)))
    out = g.op("softmax", g.op("matvec", a, x))
    t = g.op("pick", out, index=0)
    for nid, grad in backward(g, t).items():
        assert grad.shape == g.value(nid).shape


def test_unreachable_nodes_absent_from_gradient_map():
    g = ExprGraph()
    x = g.input([1.0, 2.0])
    unused = g.op("tanh", x)
    used = g.op("sigmoid", x)
    t = g.op("sum", used)
    grads = backward(g, t)
    assert unused not in grads
    assert x in grads and used in grads


def test_shape_mismatch_errors_name_op_and_shapes():
    g = ExprGraph()
    a = g.input([1.0, 2.0])
    b = g.input([1.0, 2.0, 3.0])
    with pytest.raises(ShapeError) as err:
        g.op("add", a, b)
    assert "add" in str(err.value)
    assert "(2,)" in str(err.value) and "(3,)" in str(err.value)

    m = g.input(np.ones((2, 2)))
    with pytest.raises(ShapeError, match="matvec"):
        g.op("matvec", m, b)


def test_structural_errors():
    g = ExprGraph()
    x = g.input([1.0, 2.0])
    with pytest.raises(GraphError):
        g.op("sigmoid", 99)  # parent id out of range
    with pytest.raises(GraphError):
        g.op("slice", x, start=1, stop=5)
    with pytest.raises(GraphError):
        g.op("pick", x, index=2)
    with pytest.raises(GraphError):
        g.op("nonsense", x)
    with pytest.raises(GraphError):
        backward(g, x)  # non-scalar target
    with pytest.raises(GraphError):
        g.input([np.nan, 1.0])
    with pytest.raises(ShapeError):
        g.op("softmax", g.input(np.ones((2, 2))))
    with pytest.raises(ValueError):
        finite_diff(lambda v: 0.0, [1.0], step=0.0)


def test_no_broadcasting():
    g = ExprGraph()
    a = g.input(np.ones((2, 1)))
    b = g.input(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        g.op("add", a, b)
