import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lifelong_depth import autodiff as ad
from lifelong_depth.autodiff import AutodiffError, Graph, ShapeError, backward, finite_diff_check, forward


def scalar_graph(fn, **params):
    return Graph(lambda p, i: fn(**p), {k: np.asarray(v, dtype=float) for k, v in params.items()})


class TestForward:
    def test_square(self):
        g = scalar_graph(lambda x: ad.square(x), x=3.0)
        assert forward(g).item() == 9.0

    def test_exp_at_zero(self):
        g = scalar_graph(lambda s: ad.exp(-s), s=0.0)
        assert forward(g).item() == 1.0

    def test_uncertainty_integrand(self):
        # exp(-s) * (y - yhat)**2 + s with yhat=1, y=2, s=0
        g = scalar_graph(lambda yhat, s: ad.exp(-s) * ad.square(2.0 - yhat) + s, yhat=1.0, s=0.0)
        assert forward(g).item() == 1.0

    def test_exp_clamped(self):
        out = ad.exp(ad.Tensor([100.0, -100.0]))
        np.testing.assert_array_equal(out.data, [math.exp(30), math.exp(-30)])

    def test_shape_mismatch_names_node(self):
        g = Graph(lambda p, i: ad.add(p["a"], p["b"]), {"a": np.zeros(3), "b": np.zeros(4)})
        with pytest.raises(ShapeError) as exc:
            forward(g)
        assert exc.value.node == "add"

    def test_scalar_operand_allowed(self):
        out = ad.multiply(ad.Tensor(np.ones((2, 3))), ad.Tensor(2.0))
        np.testing.assert_array_equal(out.data, np.full((2, 3), 2.0))

    def test_non_finite_input_rejected(self):
        g = Graph(lambda p, i: ad.sum(i["x"] * p["w"]), {"w": np.ones(2)})
        with pytest.raises(AutodiffError):
            forward(g, {"x": np.array([1.0, np.nan])})

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        g = Graph(lambda p, i: ad.conv2d(i["x"], p["w"], p["b"], padding=1),
                  {"w": rng.normal(size=(2, 3, 3, 3)), "b": rng.normal(size=2)})
        x = rng.normal(size=(1, 3, 5, 5))
        np.testing.assert_array_equal(forward(g, {"x": x}).data, forward(g, {"x": x}).data)


class TestBackward:
    def test_square_gradient(self):
        g = scalar_graph(lambda x: ad.square(x), x=3.0)
        assert backward(g, forward(g))["x"] == 6.0

    def test_stationary_in_s(self):
        g = scalar_graph(lambda s: ad.exp(-s) * 4.0 + s, s=math.log(4.0))
        assert abs(backward(g, forward(g))["s"]) < 1e-15

    def test_chain_rule(self):
        g = scalar_graph(lambda yhat: ad.exp(ad.Tensor(0.0)) * ad.square(2.0 - yhat), yhat=1.0)
        assert backward(g, forward(g))["yhat"] == -2.0

    def test_unreached_parameter_zero(self):
        g = Graph(lambda p, i: ad.square(p["a"]), {"a": np.array(2.0), "b": np.ones(3)})
        grads = backward(g, forward(g))
        np.testing.assert_array_equal(grads["b"], np.zeros(3))

    def test_before_forward(self):
        g = scalar_graph(lambda x: ad.square(x), x=3.0)
        with pytest.raises(AutodiffError):
            backward(g, ad.Tensor(1.0))

    def test_non_scalar_loss(self):
        g = Graph(lambda p, i: ad.square(p["x"]), {"x": np.ones(3)})
        with pytest.raises(AutodiffError):
            backward(g, forward(g))

    def test_exp_saturation_has_zero_gradient(self):
        g = scalar_graph(lambda s: ad.exp(s), s=40.0)
        assert backward(g, forward(g))["s"] == 0.0

    def test_shared_subexpression_visited_once(self):
        def build(p, i):
            h = ad.square(p["x"])
            return h + h * 3.0

        g = Graph(build, {"x": np.array(2.0)})
        grads = backward(g, forward(g))
        assert grads["x"] == pytest.approx(4 * 2 * 2.0)


class TestFiniteDifference:
    def test_quadratic(self):
        g = scalar_graph(lambda x: ad.square(x), x=3.0)
        assert finite_diff_check(g, epsilon=1e-5) < 1e-6

    def test_constant_graph(self):
        g = Graph(lambda p, i: ad.Tensor(7.0), {"x": np.array(1.0)})
        assert finite_diff_check(g, epsilon=1e-5) == 0.0

    def test_three_layer_dense_relu(self):
        rng = np.random.default_rng(3)
        shapes = {"w1": (4, 6), "b1": (6,), "w2": (6, 6), "b2": (6,), "w3": (6, 1), "b3": (1,)}
        params = {k: rng.normal(size=s) for k, s in shapes.items()}
        assert sum(v.size for v in params.values()) >= 70

        def build(p, i):
            h = ad.relu(ad.dense(i["x"], p["w1"], p["b1"]))
            h = ad.relu(ad.dense(h, p["w2"], p["b2"]))
            return ad.mean(ad.dense(h, p["w3"], p["b3"]))

        g = Graph(build, params)
        assert finite_diff_check(g, {"x": rng.normal(size=(5, 4))}, epsilon=1e-6) < 1e-4

    def test_epsilon_range(self):
        g = scalar_graph(lambda x: ad.square(x), x=3.0)
        with pytest.raises(ValueError):
            finite_diff_check(g, epsilon=1e-2)


PRIMITIVE_CASES = {
    "dense": (lambda p: ad.dense(p["x"], p["w"], p["b"]), {"x": (3, 4), "w": (4, 2), "b": (2,)}),
    "conv2d_s2": (lambda p: ad.conv2d(p["x"], p["w"], p["b"], stride=2, padding=1),
                  {"x": (2, 2, 6, 6), "w": (3, 2, 3, 3), "b": (3,)}),
    "conv2d_1x1": (lambda p: ad.conv2d(p["x"], p["w"], p["b"]), {"x": (1, 3, 4, 4), "w": (2, 3, 1, 1), "b": (2,)}),
    "avg_pool2d": (lambda p: ad.avg_pool2d(p["x"], 2), {"x": (1, 2, 4, 4)}),
    "upsample": (lambda p: ad.upsample_nearest(p["x"], 2), {"x": (1, 2, 3, 3)}),
    "concat": (lambda p: ad.concat([p["x"], p["y"]], axis=1), {"x": (1, 2, 3, 3), "y": (1, 1, 3, 3)}),
    "exp": (lambda p: ad.exp(p["x"]), {"x": (5,)}),
    "negate": (lambda p: ad.negate(p["x"]), {"x": (5,)}),
    "absolute": (lambda p: ad.absolute(p["x"]), {"x": (5,)}),
    "square": (lambda p: ad.square(p["x"]), {"x": (5,)}),
    "add": (lambda p: ad.add(p["x"], p["y"]), {"x": (5,), "y": (5,)}),
    "subtract": (lambda p: ad.subtract(p["x"], p["y"]), {"x": (5,), "y": (5,)}),
    "multiply": (lambda p: ad.multiply(p["x"], p["y"]), {"x": (5,), "y": (5,)}),
    "multiply_scalar": (lambda p: ad.multiply(p["x"], p["y"]), {"x": (5,), "y": ()}),
    "sum_axis": (lambda p: ad.sum(p["x"], axis=1), {"x": (3, 4)}),
    "mean_axis": (lambda p: ad.mean(p["x"], axis=(2, 3)), {"x": (2, 3, 2, 2)}),
}


def random_primitive_graph(name: str, rng: np.random.Generator) -> Graph:
    fn, shapes = PRIMITIVE_CASES[name]
    params = {k: rng.uniform(-3, 3, size=s) for k, s in shapes.items()}
    if name == "absolute":
        params["x"] = np.where(np.abs(params["x"]) < 1e-3, 0.5, params["x"])
    probe = rng.normal(size=fn({k: ad.Tensor(v) for k, v in params.items()}).shape)
    return Graph(lambda p, i: ad.sum(fn(p) * probe), params)


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    assert finite_diff_check(random_primitive_graph(name, rng), epsilon=1e-6) < 1e-4


def test_relu_away_from_kink():
    rng = np.random.default_rng(1)
    x = rng.uniform(-3, 3, size=20)
    x = np.where(np.abs(x) < 1e-3, 0.5, x)
    g = Graph(lambda p, i: ad.sum(ad.relu(p["x"]) * np.arange(20.0)), {"x": x})
    assert finite_diff_check(g, epsilon=1e-6) < 1e-4


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), seed=st.integers(0, 2**31))
def test_linearity_of_backward(a, b, seed):
    rng = np.random.default_rng(seed)
    w = rng.uniform(-3, 3, size=(3, 2, 3, 3))
    x = rng.uniform(-1, 1, size=(1, 2, 4, 4))

    def f(p):
        return ad.sum(ad.square(ad.conv2d(x, p["w"], np.zeros(3), padding=1)))

    def g_(p):
        return ad.sum(ad.exp(ad.mean(p["w"], axis=(2, 3))))

    grads = []
    for build in (lambda p, i: f(p), lambda p, i: g_(p), lambda p, i: a * f(p) + b * g_(p)):
        graph = Graph(build, {"w": w})
        grads.append(backward(graph, forward(graph))["w"])
    np.testing.assert_allclose(grads[2], a * grads[0] + b * grads[1], rtol=0, atol=1e-10 * max(1.0, np.abs(grads[2]).max()))


def test_backward_bit_identical():
    rng = np.random.default_rng(7)
    params = {"w": rng.normal(size=(4, 3, 3, 3)), "b": rng.normal(size=4)}
    x = rng.normal(size=(2, 3, 8, 8))
    build = lambda p, i: ad.mean(ad.square(ad.relu(ad.conv2d(i["x"], p["w"], p["b"], stride=2, padding=1))))
    g1, g2 = Graph(build, params), Graph(build, params)
    r1 = backward(g1, forward(g1, {"x": x}))
    r2 = backward(g2, forward(g2, {"x": x}))
    for k in params:
        assert r1[k].tobytes() == r2[k].tobytes()


def test_composites():
    z = ad.Tensor(np.array([-50.0, -1.0, 0.0, 1.0, 50.0]))
    sq = ad.unit_squash(z).data
    assert np.all((sq >= 0) & (sq <= 1)) and np.all(np.diff(sq) > 0)
    assert sq[2] == 0.5
    np.testing.assert_array_equal(ad.clamp(ad.Tensor([-20.0, 3.0, 20.0]), -10, 10).data, [-10.0, 3.0, 10.0])


def test_composite_gradients():
    rng = np.random.default_rng(11)
    x = rng.uniform(-3, 3, size=12)
    g = Graph(lambda p, i: ad.sum(ad.unit_squash(p["x"]) * np.arange(12.0)), {"x": x})
    assert finite_diff_check(g, epsilon=1e-6) < 1e-4
