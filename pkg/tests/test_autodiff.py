import numpy as np
import pytest

from implicit_scene import autodiff as ad


def scalar(ex, graph, name):
    return float(ex.values[graph.outputs[name]])


def test_matmul_shape_algebra():
    g = ad.Graph()
    a = g.input("a", (2, 3))
    b = g.input("b", (3, 1))
    g.output("c", g.matmul(a, b))
    ex = ad.evaluate_graph(g, {"a": np.ones((2, 3)), "b": np.ones((3, 1))})
    assert ex.outputs["c"].shape == (2, 1)
    np.testing.assert_array_equal(ex.outputs["c"].values, np.full((2, 1), 3.0))


def test_elementwise_analytic_values():
    g = ad.Graph()
    x = g.input("x", (3,))
    g.output("relu", g.relu(x))
    g.output("sig", g.sigmoid(x))
    ex = ad.evaluate_graph(g, {"x": np.array([-1.0, 0.0, 2.0])})
    np.testing.assert_array_equal(ex.outputs["relu"].values, [0.0, 0.0, 2.0])
    assert ex.outputs["sig"].values[1] == 0.5


def test_sigmoid_gradient_at_zero():
    g = ad.Graph()
    x = g.input("x", (1,))
    g.output("y", g.reduce_sum(g.sigmoid(x)))
    ex = ad.evaluate_graph(g, {"x": np.zeros(1)})
    grads = ad.backward(g, ex, "y")
    np.testing.assert_allclose(grads["x"], [0.25], rtol=0, atol=1e-15)


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    a0 = rng.uniform(-2, 2, (3, 4))
    b0 = rng.uniform(-2, 2, (4, 2))
    g = ad.Graph()
    a = g.input("a", (3, 4))
    b = g.input("b", (4, 2))
    g.output("loss", g.reduce_sum(g.matmul(a, b)))
    report = ad.finite_diff_check(g, {"a": a0, "b": b0}, leaf="a", seed="loss",
                                  step=1e-4, tol=1e-4)
    assert report.passed, str(report)
    # the analytic gradient of sum(A@B) w.r.t. A is the B^T-structured outer term
    ex = ad.evaluate_graph(g, {"a": a0, "b": b0})
    grads = ad.backward(g, ex, "loss")
    np.testing.assert_allclose(grads["a"], np.ones((3, 2)) @ b0.T, rtol=1e-12)


def test_gradient_wrt_unused_leaf_is_zero():
    g = ad.Graph()
    a = g.input("a", (2,))
    b = g.input("b", (2,))
    g.output("y", g.reduce_sum(g.relu(a)))
    ex = ad.evaluate_graph(g, {"a": np.array([1.0, 2.0]), "b": np.ones(2)})
    grads = ad.backward(g, ex, "y")
    np.testing.assert_array_equal(grads["b"], np.zeros(2))


@pytest.mark.parametrize("kind", [
    "matmul", "add", "mul", "scale", "relu", "sigmoid", "concat",
    "reduce_sum", "squared_error", "wrap_angle", "gather_cols", "mean_cols",
])
def test_every_op_kind_gradient_vs_finite_differences(kind):
    out_shape = {
        "matmul": (3, 3), "add": (3, 4), "mul": (3, 4), "scale": (3, 4),
        "relu": (3, 4), "sigmoid": (3, 4), "concat": (3, 8),
        "reduce_sum": (), "squared_error": (), "wrap_angle": (3, 4),
        "gather_cols": (3, 4), "mean_cols": (3, 3),
    }[kind]
    rng = np.random.default_rng(hash(kind) % (2 ** 32))
    x0 = rng.uniform(-2, 2, (3, 4))
    # keep clear of relu kinks and wrap branches for the probe
    x0[np.abs(x0) < 0.2] += 0.4
    g = ad.Graph()
    x = g.input("x", (3, 4))
    other = g.const(rng.uniform(-2, 2, (3, 4)))
    if kind == "matmul":
        node = g.matmul(x, g.const(rng.uniform(-2, 2, (4, 3))))
    elif kind == "add":
        node = g.add(x, other)
    elif kind == "mul":
        node = g.mul(x, other)
    elif kind == "scale":
        node = g.scale(x, -1.7)
    elif kind == "relu":
        node = g.relu(x)
    elif kind == "sigmoid":
        node = g.sigmoid(x)
    elif kind == "concat":
        node = g.concat([x, other], axis=1)
    elif kind == "reduce_sum":
        node = g.reduce_sum(x)
    elif kind == "squared_error":
        node = g.squared_error(x, other)
    elif kind == "wrap_angle":
        node = g.wrap_angle(x)
    elif kind == "gather_cols":
        node = g.gather_cols(x, [0, 2, 2, 3])
    elif kind == "mean_cols":
        node = g.mean_cols(x, [(0, 1), (2,), (1, 2, 3)])
    if out_shape != ():
        node = g.squared_error(node, g.const(np.zeros(out_shape)))
    g.output("loss", node)
    report = ad.finite_diff_check(g, {"x": x0}, leaf="x", seed="loss",
                                  step=1e-5, tol=1e-4)
    assert report.passed, f"{kind}: {report}"


def test_quadratic_finite_diff_pass():
    g = ad.Graph()
    x = g.input("x", (4,))
    g.output("loss", g.squared_error(x, g.const(np.arange(4.0))))
    report = ad.finite_diff_check(g, {"x": np.array([0.5, 1.5, -0.5, 3.0])},
                                  leaf="x", seed="loss", step=1e-4, tol=1e-4)
    assert report.passed
    assert report.n_checked == 4


def test_relu_probed_at_kink_is_skipped():
    g = ad.Graph()
    x = g.input("x", (2,))
    g.output("loss", g.reduce_sum(g.relu(x)))
    report = ad.finite_diff_check(g, {"x": np.array([0.0, 1.0])},
                                  leaf="x", seed="loss", step=1e-4, tol=1e-4)
    assert report.passed
    assert (0,) in report.skipped
    assert report.n_checked == 1


def test_corrupted_gradient_fails_with_offending_index():
    def fwd(a):
        return np.asarray((a * a).sum())

    def bad_vjp(ins, out, gout):
        grad = 2.0 * ins[0] * float(gout)
        grad = grad.copy()
        grad[1] += 0.5  # deliberate corruption
        return [grad]

    g = ad.Graph()
    x = g.input("x", (3,))
    g.output("loss", g.custom(fwd, bad_vjp, [x]))
    report = ad.finite_diff_check(g, {"x": np.array([1.0, 2.0, 3.0])},
                                  leaf="x", seed="loss")
    assert not report.passed
    assert report.failures[0][0] == (1,)


def test_evaluate_is_pure_and_deterministic():
    rng = np.random.default_rng(3)
    g = ad.Graph()
    x = g.input("x", (5, 5))
    h = g.relu(g.matmul(x, g.const(rng.normal(size=(5, 5)))))
    g.output("y", g.sigmoid(h))
    arr = rng.normal(size=(5, 5))
    a = ad.evaluate_graph(g, {"x": arr}).outputs["y"].values
    b = ad.evaluate_graph(g, {"x": arr}).outputs["y"].values
    np.testing.assert_array_equal(a, b)


def test_backward_linearity_over_sum_of_scalars():
    rng = np.random.default_rng(11)
    x0 = rng.uniform(-2, 2, (3,))
    g = ad.Graph()
    x = g.input("x", (3,))
    s1 = g.reduce_sum(g.sigmoid(x))
    s2 = g.squared_error(x, g.const(np.ones(3)))
    g.output("s1", s1)
    g.output("s2", s2)
    g.output("total", g.add(s1, s2))
    ex = ad.evaluate_graph(g, {"x": x0})
    g1 = ad.backward(g, ex, "s1")["x"]
    g2 = ad.backward(g, ex, "s2")["x"]
    gt = ad.backward(g, ex, "total")["x"]
    np.testing.assert_allclose(gt, g1 + g2, rtol=1e-14)


def test_shape_mismatch_error_names_node():
    g = ad.Graph()
    a = g.input("a", (2, 3))
    b = g.input("b", (2, 3))
    g.output("c", g.matmul(a, b, name="bad_mm"))
    with pytest.raises(ad.GraphError, match="bad_mm"):
        ad.evaluate_graph(g, {"a": np.ones((2, 3)), "b": np.ones((2, 3))})


def test_nonfinite_intermediate_raises():
    g = ad.Graph()
    x = g.input("x", (1,))
    g.output("y", g.scale(x, 1e308))
    ex_ok = ad.evaluate_graph(g, {"x": np.ones(1)})
    assert np.isfinite(ex_ok.outputs["y"].values).all()
    with pytest.raises(ad.GraphError, match="non-finite"):
        ad.evaluate_graph(g, {"x": np.full(1, 1e10)})


def test_backward_requires_scalar_seed():
    g = ad.Graph()
    x = g.input("x", (2,))
    g.output("y", g.relu(x))
    ex = ad.evaluate_graph(g, {"x": np.ones(2)})
    with pytest.raises(ad.GraphError, match="scalar"):
        ad.backward(g, ex, "y")


def test_tensor_rejects_nonfinite():
    with pytest.raises(ad.GraphError):
        ad.Tensor(np.array([1.0, np.nan]))
