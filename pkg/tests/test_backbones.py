import numpy as np
import pytest

from viashap.core import stable_link
from viashap.layers import BatchNorm, KANRBFLayer, KANSplineLayer, Linear
from viashap.network import (
    BACKBONES,
    NetworkSpec,
    ShapNetwork,
    expected_param_count,
    network_forward,
)


def small(kind, n=4, d=1, **kw):
    return ShapNetwork.build(NetworkSpec(kind, n, d, hidden=(5, 7, 5), **kw), seed=0)


# -- KAN spline ---------------------------------------------------------------


def test_spline_zero_parameters_give_zero_output():
    layer = KANSplineLayer(3, 2)
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(layer(x), np.zeros((4, 2)))


def test_spline_can_interpolate_identity_on_grid_knots():
    layer = KANSplineLayer(1, 1)
    grid = np.linspace(-1.0, 1.0, layer.grid_size + 1)
    basis, _ = layer.basis(grid[:, None])
    coef, *_ = np.linalg.lstsq(basis[:, 0, :], grid, rcond=None)
    layer.params["coef"][0, :, 0] = coef
    np.testing.assert_allclose(layer(grid[:, None])[:, 0], grid, atol=1e-10)


def test_spline_basis_is_partition_of_unity_inside_grid():
    layer = KANSplineLayer(2, 1)
    x = np.random.default_rng(1).uniform(-1, 1, size=(50, 2))
    basis, deriv = layer.basis(x, with_derivative=True)
    np.testing.assert_allclose(basis.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(deriv.sum(axis=-1), 0.0, atol=1e-9)


def test_spline_basis_derivative_matches_finite_difference():
    layer = KANSplineLayer(1, 1)
    x = np.linspace(-1.7, 1.7, 41)[:, None]
    _, deriv = layer.basis(x, with_derivative=True)
    h = 1e-6
    fd = (layer.basis(x + h)[0] - layer.basis(x - h)[0]) / (2 * h)
    np.testing.assert_allclose(deriv, fd, atol=1e-6)


def test_identical_rows_give_identical_outputs():
    layer = KANSplineLayer(3, 4, rng=np.random.default_rng(0))
    row = np.array([[0.2, -0.7, 1.1]])
    out = layer(np.vstack([row, row]))
    np.testing.assert_array_equal(out[0], out[1])


def test_spline_layer_validates_config():
    with pytest.raises(ValueError):
        KANSplineLayer(2, 2, spline_degree=0)
    with pytest.raises(ValueError):
        KANSplineLayer(2, 2, grid_size=1)
    with pytest.raises(ValueError):
        KANSplineLayer(2, 2, grid_range=(1.0, -1.0))


# -- KAN RBF ------------------------------------------------------------------


def test_rbf_zero_coefficients_give_zero():
    layer = KANRBFLayer(2, 3)
    np.testing.assert_array_equal(layer(np.ones((2, 2))), np.zeros((2, 3)))


def test_rbf_single_gaussian_at_center_contributes_one():
    layer = KANRBFLayer(1, 1)
    layer.params["coef"][0, 3, 0] = 1.0
    out = layer(np.array([[layer.centers[3]]]))
    assert out[0, 0] == 1.0


def test_rbf_far_outside_grid_decays():
    layer = KANRBFLayer(1, 1)
    layer.params["coef"][:] = 1.0
    assert np.all(np.abs(layer(np.array([[50.0], [-50.0]]))) <= 1e-8)


# -- MLP ----------------------------------------------------------------------


def test_mlp_zero_weights_give_zero_outputs():
    net = small("mlp")
    for p in net.parameters().values():
        p[:] = 0.0
    np.testing.assert_array_equal(net.attributions(np.ones((3, 4))), np.zeros((3, 4, 1)))


def test_mlp_eval_mode_is_pure():
    net = small("mlp")
    x = np.random.default_rng(0).normal(size=(6, 4))
    np.testing.assert_array_equal(net.attributions(x), net.attributions(x))


def test_mlp_train_mode_needs_two_rows():
    net = small("mlp")
    with pytest.raises(ValueError):
        net.forward_raw(np.zeros((1, 4)), train=True)


def test_batchnorm_running_statistics_converge():
    bn = BatchNorm(3)
    x = np.random.default_rng(0).normal(loc=[1.0, -2.0, 0.5], scale=[0.5, 2.0, 1.0], size=(32, 3))
    for _ in range(1000):
        bn.forward(x, train=True)
    np.testing.assert_allclose(bn.buffers["running_mean"], x.mean(axis=0), atol=1e-10)
    np.testing.assert_allclose(bn.buffers["running_var"], x.var(axis=0, ddof=1), atol=1e-10)


# -- ShapNetwork --------------------------------------------------------------


@pytest.mark.parametrize("kind", BACKBONES)
def test_prediction_is_link_of_column_sums(kind):
    for link, d in (("identity", 2), ("sigmoid", 1), ("softmax", 3)):
        net = small(kind, d=d, link=link, relaxed=True)
        net.delta[0] = 0.37
        x = np.random.default_rng(0).normal(size=(5, 4))
        f = net.forward(x)
        np.testing.assert_array_equal(f.prediction, stable_link(f.phi.sum(axis=1) + 0.37, link))


def test_sigmoid_of_zero_sum_is_half():
    net = small("kan_spline", link="sigmoid")
    for p in net.parameters().values():
        p[:] = 0.0
    assert network_forward(net, np.ones(4)).prediction[0] == 0.5


def test_attribution_shape_and_length_check():
    net = small("kan_rbf", n=4, d=3)
    f = net.forward(np.zeros(4))
    assert f.phi.shape == (4, 3) and f.logits.shape == (3,)
    with pytest.raises(ValueError):
        net.forward(np.zeros(5))


def test_local_accuracy_over_many_random_pairs():
    worst = 0.0
    rng = np.random.default_rng(0)
    for i in range(20):
        kind = BACKBONES[i % len(BACKBONES)]
        spec = NetworkSpec(kind, 5, 1 + i % 3, hidden=(6, 6), relaxed=bool(i % 2))
        net = ShapNetwork.build(spec, seed=i)
        net.delta[0] = rng.normal() if spec.relaxed else 0.0
        f = net.forward(rng.normal(size=(50, 5)))
        worst = max(worst, np.max(np.abs(f.logits - f.phi.sum(axis=1) - net.delta[0])))
    assert worst <= 1e-9


@pytest.mark.parametrize("kind", BACKBONES)
def test_param_count_formula(kind):
    spec = NetworkSpec(kind, 6, 2, hidden=(8, 16, 8))
    assert ShapNetwork.build(spec).param_count() == expected_param_count(spec)


def test_kan_param_count_matches_layer_formula():
    spec = NetworkSpec("kan_spline", 6, 2, hidden=(8, 16, 8))
    dims = [6, 8, 16, 8, 12]
    per = spec.grid_size + spec.spline_degree
    assert expected_param_count(spec) == sum(a * b * per + a * b for a, b in zip(dims, dims[1:]))
    rbf = NetworkSpec("kan_rbf", 6, 2, hidden=(8, 16, 8))
    assert expected_param_count(rbf) == sum(a * b * 8 for a, b in zip(dims, dims[1:]))


@pytest.mark.parametrize("n,d", [(8, 1), (14, 2), (30, 3), (6, 1)])
def test_matched_mlp_within_two_percent(n, d):
    kan = ShapNetwork.build(NetworkSpec("kan_spline", n, d)).param_count()
    mlp = ShapNetwork.build(NetworkSpec("mlp_matched", n, d)).param_count()
    assert abs(mlp - kan) <= 0.02 * kan


@pytest.mark.parametrize("kind", BACKBONES)
def test_eval_forward_is_batch_order_invariant(kind):
    net = small(kind)
    x = np.random.default_rng(3).normal(size=(9, 4))
    perm = np.random.default_rng(4).permutation(9)
    np.testing.assert_allclose(net.attributions(x)[perm], net.attributions(x[perm]), rtol=0, atol=1e-13)


def test_backward_requires_forward():
    net = small("kan_spline")
    with pytest.raises(RuntimeError):
        net.backward(d_logits=np.ones((2, 1)))


def test_zero_upstream_gives_zero_gradients():
    net = small("mlp")
    net.zero_grad()
    net.attributions(np.random.default_rng(0).normal(size=(4, 4)), train=True, record=True)
    net.backward(d_phi=np.zeros((4, 4, 1)))
    assert all(np.all(g == 0) for g in net.gradients().values())


def test_delta_gradient_is_sum_of_logit_gradients():
    net = small("kan_rbf", d=2, relaxed=True)
    net.zero_grad()
    net.attributions(np.ones((3, 4)), record=True)
    up = np.arange(6, dtype=float).reshape(3, 2)
    net.backward(d_logits=up)
    assert net.delta_grad[0] == up.sum()


def test_spec_round_trip_and_validation():
    spec = NetworkSpec("kan_rbf", 3, 2, hidden=(4,), link="softmax", feature_names=["a", "b", "c"])
    assert NetworkSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        NetworkSpec("cnn", 3)


def test_linear_layer_without_rng_is_zero():
    layer = Linear(2, 3)
    assert np.all(layer.params["weight"] == 0)
