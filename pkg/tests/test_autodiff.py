import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from colld.autodiff import Graph, Tensor, evaluate, finite_difference_check, grad, gradient, ops, relative_error
from colld.exceptions import ConfigurationError, NumericError, UsageError
from colld.gradcheck import PRIMITIVE_CASES, run_case


def test_square_forward_and_gradient():
    g = Graph(lambda x: x * x, ["x"])
    assert float(evaluate(g, {"x": 3.0})["y"]) == 9.0
    assert float(gradient(g, "y", {"x": 3.0})["x"]) == 6.0


def test_softmax_of_equal_logits():
    g = Graph(lambda v: ops.softmax(v), ["v"])
    np.testing.assert_array_equal(evaluate(g, {"v": [0.0, 0.0]})["y"], [0.5, 0.5])


def test_cosine_of_orthogonal_vectors():
    g = Graph(lambda u, v: ops.cosine(u, v), ["u", "v"])
    assert float(evaluate(g, {"u": [1.0, 0.0], "v": [0.0, 1.0]})["y"]) == 0.0


def test_cosine_with_itself_has_zero_gradient():
    g = Graph(lambda u: ops.cosine(u, u), ["u"])
    u = np.array([0.3, -1.2, 2.0])
    # the 1e-8 norm guard leaves a residual slope of order eps / |u|
    np.testing.assert_allclose(gradient(g, "y", {"u": u})["u"], 0.0, atol=1e-8)


def test_logsumexp_gradient_is_softmax():
    g = Graph(lambda v: ops.logsumexp(v), ["v"])
    np.testing.assert_allclose(gradient(g, "y", {"v": [0.0, 0.0]})["v"], [0.5, 0.5])


def test_gradient_needs_scalar_output():
    g = Graph(lambda x: x * 2.0, ["x"])
    with pytest.raises(UsageError):
        gradient(g, "y", {"x": np.ones(3)})


def test_shape_mismatch_is_configuration_error():
    g = Graph(lambda a, b: ops.matmul(a, b), ["a", "b"])
    with pytest.raises(ConfigurationError):
        evaluate(g, {"a": np.ones((2, 3)), "b": np.ones((4, 2))})


def test_unbound_input_is_configuration_error():
    g = Graph(lambda a, b: a + b, ["a", "b"])
    with pytest.raises(ConfigurationError):
        evaluate(g, {"a": 1.0})


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_intermediate_names_the_node():
    g = Graph(lambda x: ops.log_softmax(x * 1e308 * 10.0), ["x"])
    with pytest.raises(NumericError, match="node"):
        evaluate(g, {"x": np.array([1.0, 2.0])})


def test_finite_difference_on_square_is_tight():
    g = Graph(lambda x: x * x, ["x"])
    report = finite_difference_check(g, {"x": 3.0}, epsilon=1e-5, tolerance=1e-4)
    assert report.passed
    assert report.errors["x"] < 1e-6


def test_identity_graph_has_negligible_error():
    g = Graph(lambda x: ops.sum(x), ["x"])
    report = finite_difference_check(g, {"x": np.arange(4.0)})
    assert report.errors["x"] < 1e-9


def test_report_flags_wrong_gradient():
    def bad_square(x):
        # correct value, gradient deliberately halved
        return Tensor.from_op(x.data ** 2, "bad", [x], lambda g: [g * x.data])

    report = finite_difference_check(Graph(bad_square, ["x"]), {"x": 3.0})
    assert not report.passed
    assert report.failures == ["x"]


def test_relative_error_properties():
    a = np.array([1.0, -2.0])
    assert relative_error(a, a) == 0.0
    assert relative_error(np.zeros(2), np.zeros(2)) == 0.0
    assert relative_error(a, a * 1.01) == pytest.approx(0.01 * 2 / 2.02)


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(name):
    for seed in range(10):
        report = run_case(name, seed)
        assert report.passed, (seed, report.errors)


@pytest.mark.parametrize("name", ["masked_contrastive", "masked_l2"])
def test_full_loss_graph_gradients(name):
    for seed in range(3):
        report = run_case(name, seed)
        assert report.passed, (seed, report.errors)


@given(st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_chain_rule_matches_product_of_derivatives(x0, seed):
    # f(g(x)) with g = swish, f = logsumexp over [g, 2g]; compare to f'(g) * g'(x)
    x = Tensor(np.array([x0]), requires_grad=True)
    gx = ops.swish(x)
    y = ops.logsumexp(ops.add(ops.mul(gx, np.array([1.0, 2.0])), np.zeros(2)))
    (dx,) = grad(y, [x])

    g_leaf = Tensor(gx.data.copy(), requires_grad=True)
    y2 = ops.logsumexp(ops.mul(g_leaf, np.array([1.0, 2.0])))
    (df,) = grad(y2, [g_leaf])
    x_leaf = Tensor(np.array([x0]), requires_grad=True)
    (dg,) = grad(ops.sum(ops.swish(x_leaf)), [x_leaf])
    np.testing.assert_allclose(dx, df * dg, rtol=1e-12, atol=1e-15)


def test_evaluate_is_bitwise_deterministic(rng):
    a = rng.normal(size=(16, 32)).astype(np.float32)
    b = rng.normal(size=(32, 8)).astype(np.float32)
    g = Graph(lambda a, b: ops.layer_norm(ops.matmul(a, b), np.ones(8, np.float32), np.zeros(8, np.float32)),
              ["a", "b"])
    first = evaluate(g, {"a": a, "b": b})["y"]
    second = evaluate(g, {"a": a, "b": b})["y"]
    assert first.tobytes() == second.tobytes()


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = ops.sum(x * x * x)
    (g,) = grad(y, [x])
    assert g[0] == pytest.approx(12.0)


def test_python_scalars_keep_float32():
    y = ops.mul(ops.add(Tensor(np.ones(2, np.float32)), 1.0), 0.5)
    assert y.dtype == np.float32


def test_default_encoder_precision_is_float32(small_encoder):
    assert all(small_encoder.params[n].dtype == np.float32 for n in small_encoder.params)


def test_frozen_inputs_record_no_graph():
    y = ops.mul(Tensor(np.ones(3)), Tensor(np.ones(3)))
    assert not y.requires_grad
    assert y.parents == ()
