import numpy as np
import pytest

from pixrel import attribution as at
from pixrel import network as nn
from pixrel.errors import InvalidMethodParams, TraceMismatch

from helpers import (loop_conv_transpose, loop_zplus, nondegenerate_nets, random_linear,
                     random_net)


def _dense_model(w, b=0.0):
    w = np.atleast_2d(np.asarray(w, dtype=float))
    return nn.NetworkModel((w.shape[1],), [nn.Dense(w, np.full(w.shape[0], b))],
                           [f"c{i}" for i in range(w.shape[0])])


# --- method parameters ----------------------------------------------------------


@pytest.mark.parametrize("alpha,beta", [(0.5, 0.5), (1.0, 0.5), (0.0, 1.0), (2.0, -0.5), (-1.0, 2.0)])
def test_alpha_beta_constraints_rejected(alpha, beta):
    with pytest.raises(InvalidMethodParams):
        at.LrpAlphaBeta(alpha, beta)


@pytest.mark.parametrize("alpha,beta", [(1.0, 0.0), (2.0, -1.0), (3.0, -2.0)])
def test_alpha_beta_constraints_accepted(alpha, beta):
    assert at.LrpAlphaBeta(alpha, beta).alpha == alpha


@pytest.mark.parametrize("eps", [-1.0, float("nan"), float("inf")])
def test_bad_epsilon_rejected(eps):
    with pytest.raises(InvalidMethodParams):
        at.LrpEpsilon(eps)


def test_bad_deconv_mode_and_unknown_method():
    with pytest.raises(InvalidMethodParams):
        at.Deconvolution("clip")
    model = _dense_model([[1.0, 2.0]])
    with pytest.raises(InvalidMethodParams):
        at.attribute(model, [1.0, 1.0], 0, "gradient")
    _, trace = nn.forward(model, [1.0, 1.0])
    with pytest.raises(InvalidMethodParams):
        at.lrp_relevance(trace, 0, at.Gradient())


def test_attribute_rejects_bad_class_index():
    with pytest.raises(IndexError):
        at.attribute(_dense_model([[1.0, 2.0]]), [1.0, 1.0], 1, at.Gradient())


def test_labels():
    assert at.LrpEpsilon(0.01).label == "lrp-eps(0.01)"
    assert at.LrpAlphaBeta(2, -1).label == "lrp-ab(2,-1)"
    assert at.Deconvolution().label == "deconv"
    assert [r.label for r in at.standard_recipes()] == [
        "gradient", "deconv", "lrp-ab(1,0)", "lrp-ab(2,-1)", "lrp-eps(1)", "lrp-eps(0.01)"]


# --- hand-worked examples ----------------------------------------------------------


@pytest.mark.parametrize("method,expected", [
    (at.LrpEpsilon(0.0), [2.0, -1.0]),
    (at.LrpAlphaBeta(1.0, 0.0), [1.0, 0.0]),
    (at.LrpEpsilon(1.0), [1.0, -0.5]),
    (at.LrpAlphaBeta(2.0, -1.0), [2.0, -1.0]),
])
def test_lrp_two_input_examples(method, expected):
    r = at.attribute(_dense_model([[1.0, -1.0]]), [2.0, 1.0], 0, method)
    np.testing.assert_allclose(r.scores, expected, rtol=0, atol=1e-15)


def test_epsilon_sign_of_zero_is_positive():
    # sum z = 0 -> denominator is +eps, so R = z * f / eps with f = bias
    r = at.attribute(_dense_model([[1.0, -1.0]], b=0.5), [1.0, 1.0], 0, at.LrpEpsilon(0.25))
    np.testing.assert_allclose(r.scores, [2.0, -2.0])


def test_zero_denominator_drops_relevance():
    r = at.attribute(_dense_model([[1.0, -1.0]], b=0.5), [1.0, 1.0], 0, at.LrpEpsilon(0.0))
    assert r.scores.tolist() == [0.0, 0.0]


def test_deconv_linear_example():
    r = at.attribute(_dense_model([[0.5, -0.5]]), [3.0, 1.0], 0, at.Deconvolution())
    assert r.scores.tolist() == [0.5, -0.5]


def test_deconv_pool_routes_to_winner():
    model = nn.NetworkModel((1, 2, 2), [nn.MaxPool2D((2, 2), (2, 2)), nn.Flatten()], ["c"])
    x = np.array([[[0.2, 1.0], [0.5, 0.1]]])
    r = at.attribute(model, x, 0, at.Deconvolution())
    assert r.scores[0].tolist() == [[0.0, 1.0], [0.0, 0.0]]


def test_lrp_pool_is_winner_take_all():
    model = nn.NetworkModel((1, 2, 2), [nn.MaxPool2D((2, 2), (2, 2)), nn.Flatten()], ["c"])
    x = np.array([[[0.2, 0.3], [0.7, 0.1]]])
    r = at.attribute(model, x, 0, at.LrpEpsilon(0.0))
    assert r.scores[0].tolist() == [[0.0, 0.0], [0.7, 0.0]]


def test_deconv_modes_differ_only_at_relu():
    # hidden unit is inactive; "pass" masks it away, "rectify" lets the positive score through
    model = nn.NetworkModel((1,), [nn.Dense([[1.0], [1.0]], [-5.0, 0.0]), nn.ReLU(),
                                   nn.Dense([[2.0, 1.0]], [0.0])], ["y"])
    passed = at.attribute(model, [1.0], 0, at.Deconvolution("pass"))
    rect = at.attribute(model, [1.0], 0, at.Deconvolution("rectify"))
    assert passed.scores.tolist() == [1.0]
    assert rect.scores.tolist() == [3.0]


@pytest.mark.parametrize("seed", range(6))
def test_deconv_pass_is_score_times_gradient(seed):
    model, x = random_net(seed)
    scores, trace = nn.forward(model, x)
    for c in range(model.num_classes):
        d = at.deconv_relevance(trace, c).scores
        g = nn.input_gradient(model, trace, c)
        np.testing.assert_allclose(d, scores[c] * g, rtol=1e-12, atol=1e-12 * abs(scores[c]) * np.abs(g).max())


@pytest.mark.parametrize("seed", range(5))
def test_conv_backward_matches_transposed_filter_loops(seed):
    rng = np.random.default_rng(seed)
    stride, padding = [(1, 0), (2, 1), ((1, 2), (2, 0)), (1, 1), (3, 2)][seed]
    layer = nn.Conv2D(rng.standard_normal((3, 2, 3, 2)), rng.standard_normal(3), stride=stride, padding=padding)
    x = rng.standard_normal((2, 7, 6))
    out = nn.conv_forward(x, layer)
    g = rng.standard_normal(out.shape)
    np.testing.assert_allclose(nn.conv_transpose(g, layer, x.shape), loop_conv_transpose(g, layer, x.shape),
                               rtol=1e-12, atol=1e-12)


# --- closed forms on linear models ----------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_linear_closed_forms(seed):
    rng = np.random.default_rng(seed)
    model, w = random_linear(rng, bias=0.0)
    x = rng.standard_normal(model.input_shape)
    f = float(np.sum(w * x))
    lrp = at.attribute(model, x, 0, at.LrpEpsilon(0.0)).scores
    np.testing.assert_allclose(lrp, w * x, rtol=1e-12, atol=1e-12)
    dec = at.attribute(model, x, 0, at.Deconvolution()).scores
    np.testing.assert_allclose(dec, f * w, rtol=1e-12, atol=1e-12)
    grad = at.attribute(model, x, 0, at.Gradient())
    assert np.array_equal(grad.scores, w)
    l2 = at.aggregate_subpixels(grad, "l2").scores
    np.testing.assert_allclose(l2, np.sqrt((w ** 2).sum(axis=0)), rtol=1e-12, atol=0)


def test_gradient_l2_pythagorean_pixel():
    w = np.zeros((3, 1, 2))
    w[:, 0, 0] = (3.0, 4.0, 0.0)
    model = nn.NetworkModel((3, 1, 2), [nn.Flatten(), nn.Dense(w.reshape(1, -1), [0.0])], ["c"])
    h = at.aggregate_subpixels(at.attribute(model, np.ones((3, 1, 2)), 0, at.Gradient()), "l2")
    assert h.scores.tolist() == [[5.0, 0.0]]


def test_gradient_ignores_sign_of_input_on_linear_models():
    rng = np.random.default_rng(3)
    model, _ = random_linear(rng)
    x = rng.standard_normal(model.input_shape)
    a = at.attribute(model, x, 0, at.Gradient()).scores
    b = at.attribute(model, -x, 0, at.Gradient()).scores
    assert np.array_equal(a, b)


@pytest.mark.parametrize("seed", range(8))
def test_gradient_map_equals_input_gradient_bitwise(seed):
    model, x = random_net(seed)
    _, trace = nn.forward(model, x)
    for c in range(model.num_classes):
        assert at.gradient_relevance(trace, c).scores.tobytes() == nn.input_gradient(model, trace, c).tobytes()


# --- LRP properties ------------------------------------------------------------------


@pytest.mark.parametrize("method,rule", [
    (at.LrpEpsilon(0.0), "eps"),
    (at.LrpAlphaBeta(1.0, 0.0), "zplus"),
    (at.LrpAlphaBeta(2.0, -1.0), "ab"),
])
def test_conservation_on_random_nets(method, rule):
    for seed, model, x in nondegenerate_nets(25, rule):
        scores, trace = nn.forward(model, x)
        for c in range(model.num_classes):
            total = at.lrp_relevance(trace, c, method).total()
            assert abs(total - scores[c]) <= 1e-9 * max(abs(scores[c]), 1e-300), (seed, c)


@pytest.mark.parametrize("seed", range(8))
def test_alpha_one_beta_zero_is_zplus_rule(seed):
    model, x = random_net(seed)
    _, trace = nn.forward(model, x)
    for c in range(model.num_classes):
        got = at.lrp_relevance(trace, c, at.LrpAlphaBeta(1.0, 0.0)).scores
        want = loop_zplus(model, x, c)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12 * max(np.abs(want).max(), 1e-300))


@pytest.mark.parametrize("seed", range(10))
def test_epsilon_shrinks_total_absolute_relevance(seed):
    rng = np.random.default_rng(seed)
    model = _dense_model(rng.standard_normal((2, 5)), b=0.0)
    x = rng.standard_normal(5)
    totals = [np.abs(at.attribute(model, x, 0, at.LrpEpsilon(e)).scores).sum()
              for e in (0.0, 1e-3, 0.01, 0.1, 1.0, 10.0)]
    assert all(a >= b for a, b in zip(totals, totals[1:]))


def _scale_last_dense(model, lam):
    layers = list(model.layers)
    last = max(i for i, l in enumerate(layers) if isinstance(l, nn.Dense))
    layers[last] = nn.Dense(layers[last].weights * lam, np.zeros_like(layers[last].bias))
    return nn.NetworkModel(model.input_shape, layers, model.class_names)


@pytest.mark.parametrize("seed", range(6))
def test_output_scale_covariance(seed):
    model, x = random_net(seed)
    base = _scale_last_dense(model, 1.0)
    lam = 2.5
    scaled = _scale_last_dense(model, lam)
    expect = {"gradient": lam, "deconv": lam ** 2, "lrp-eps(0)": lam, "lrp-ab(1,0)": lam}
    for method in (at.Gradient(), at.Deconvolution(), at.LrpEpsilon(0.0), at.LrpAlphaBeta(1.0, 0.0)):
        a = at.attribute(base, x, 0, method).scores
        b = at.attribute(scaled, x, 0, method).scores
        k = expect[method.label]
        np.testing.assert_allclose(b, k * a, rtol=1e-10, atol=1e-12 * max(np.abs(b).max(), 1.0))
        ha = at.aggregate_subpixels(at.RelevanceMap(a, 0, method), "sum").scores
        hb = at.aggregate_subpixels(at.RelevanceMap(b, 0, method), "sum").scores
        if np.ptp(ha) > 0:
            assert np.argmax(ha) == np.argmax(hb)


def test_recipes_share_one_trace_without_mutating_it():
    model, x = random_net(2)
    _, trace = nn.forward(model, x)
    before = [a.copy() for a in trace.inputs]
    maps = [r.apply(trace, 0) for r in at.standard_recipes()]
    assert all(np.array_equal(a, b) for a, b in zip(before, trace.inputs))
    assert all(m.scores.min() >= 0 for m in maps)


def test_foreign_trace_rejected():
    m1, x1 = random_net(0)
    m2, _ = random_net(4)
    _, trace = nn.forward(m1, x1)
    with pytest.raises(TraceMismatch):
        nn.input_gradient(m2, trace, 0)


# --- aggregation and rectification -------------------------------------------------------


def _pixel(*channels):
    return at.RelevanceMap(np.array(channels, dtype=float).reshape(-1, 1, 1), 0, at.Gradient())


@pytest.mark.parametrize("mode,expected", [("sum", 0.0), ("negsum", 0.5), ("l2", np.sqrt(0.5))])
def test_aggregation_examples(mode, expected):
    assert at.aggregate_subpixels(_pixel(0.5, -0.5, 0.0), mode).scores[0, 0] == pytest.approx(expected, abs=1e-15)


def test_l2_example():
    assert at.aggregate_subpixels(_pixel(3, 4, 0), at.AggregationMode.L2).scores[0, 0] == 5.0


def test_aggregation_rejects_unknown_mode():
    with pytest.raises(ValueError):
        at.aggregate_subpixels(_pixel(1, 2), "max")


def test_rectify_examples():
    assert at.rectify(at.Heatmap([[-1.0, 2.0]])).scores.tolist() == [[0.0, 2.0]]
    assert not at.rectify(at.Heatmap(-np.ones((2, 3)))).scores.any()
    h = at.Heatmap(np.abs(np.random.default_rng(0).standard_normal((4, 4))))
    once = at.rectify(h)
    assert np.array_equal(once.scores, h.scores)
    assert np.array_equal(at.rectify(once).scores, once.scores)


def test_heatmap_rejects_non_finite():
    with pytest.raises(ValueError):
        at.Heatmap([[np.nan]])
