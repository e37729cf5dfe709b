from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viashap.metrics import (
    MetricReport,
    accuracy,
    auc_binary,
    auc_weighted_ovr,
    benchmark_timing,
    cosine_similarity,
    explanation_fidelity,
    ground_truth,
    inclusion_exclusion_curve,
    r_squared,
    spearman,
    time_amortized,
)
from viashap.network import NetworkSpec, ShapNetwork
from viashap.shapley import ShapleyEstimate, ValueFunction, exact_shapley, model_game
from viashap.training import explain


def pairwise_auc(scores, labels):
    """Fraction of positive/negative pairs ordered correctly, ties count one half."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in product(pos, neg))
    return wins / (len(pos) * len(neg))


# -- AUC ------------------------------------------------------------------------


def test_auc_examples():
    assert auc_binary([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc_binary([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert pairwise_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auc_binary([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    with pytest.raises(ValueError):
        auc_binary([0.1, 0.2], [1, 1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.booleans()), min_size=2, max_size=30))
def test_auc_matches_pair_enumeration(pairs):
    scores, labels = zip(*pairs)
    if len(set(labels)) < 2:
        return
    assert auc_binary(scores, labels) == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)


def test_auc_monotone_invariance():
    rng = np.random.default_rng(0)
    s = rng.normal(size=200)
    y = rng.integers(0, 2, size=200)
    assert auc_binary(np.exp(3 * s) + 1, y) == auc_binary(s, y)


def test_weighted_ovr():
    rng = np.random.default_rng(1)
    s, y = rng.normal(size=50), rng.integers(0, 2, size=50)
    assert auc_weighted_ovr(s[:, None], y) == auc_binary(s, y)
    labels = np.repeat([0, 1, 2], 10)
    assert auc_weighted_ovr(np.eye(3)[labels], labels) == 1.0
    big = rng.integers(0, 3, size=10_000)
    assert abs(auc_weighted_ovr(rng.random((10_000, 3)), big) - 0.5) <= 0.02


def test_weighted_ovr_absent_class():
    labels = np.array([0, 1, 0, 1])
    with pytest.warns(UserWarning, match="class 2"):
        assert auc_weighted_ovr(np.eye(3)[labels], labels) == 1.0
    with pytest.raises(ValueError):
        auc_weighted_ovr(np.eye(3)[[0, 0]], np.array([0, 0]))


# -- similarity metrics ------------------------------------------------------------


def test_similarity_examples():
    v = np.array([0.3, -1.2, 2.0, 0.7])
    assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-15)
    assert spearman(v, v) == 1.0 and r_squared(v, v) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert spearman([1, 2, 3], [3, 2, 1]) == -1.0
    assert r_squared(v, np.full(4, v.mean())) == pytest.approx(0.0, abs=1e-15)


def test_similarity_errors():
    with pytest.raises(ValueError):
        cosine_similarity([0, 0], [1, 2])
    with pytest.raises(ValueError):
        r_squared([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        spearman([2, 2, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        cosine_similarity([1, 2, 3], [1, 2])
    with pytest.raises(ValueError):
        spearman([1], [1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-100, 100), min_size=3, max_size=12), st.floats(0.01, 100))
def test_metric_invariances(values, c):
    a = np.array(values, dtype=float)
    b = a[::-1] + np.arange(len(a))
    if np.linalg.norm(a) == 0 or np.linalg.norm(b) == 0:
        return
    assert cosine_similarity(a, c * b) == pytest.approx(cosine_similarity(a, b), abs=1e-9)
    assert -1.0 <= cosine_similarity(a, b) <= 1.0
    if np.ptp(a) > 0 and np.ptp(b) > 0:
        rho = spearman(a, b)
        assert spearman(np.arctan(a), b ** 3) == pytest.approx(rho, abs=1e-12)
        assert -1.0 <= rho <= 1.0
        assert r_squared(a, b) <= 1.0


def test_metric_report_summary():
    r = MetricReport.of("cosine", [1.0, 0.5])
    assert r.summary() == {"mean": 0.75, "std": 0.25, "count": 2}


# -- fidelity -------------------------------------------------------------------


def estimates(values, converged=True):
    return [ShapleyEstimate(np.asarray(v), np.zeros_like(v), 1, converged) for v in values]


def test_self_comparison_is_perfect():
    phi = np.random.default_rng(0).normal(size=(7, 5, 1))
    rep = explanation_fidelity(phi, estimates(phi[:, :, 0]))
    assert rep.cosine.mean == pytest.approx(1.0) and rep.spearman.mean == 1.0 and rep.r2.mean == 1.0
    assert len(rep.cosine.values) == 7 and rep.dropped == 0


def test_fidelity_drops_nonconverged_and_checks_shape():
    phi = np.random.default_rng(1).normal(size=(3, 4))
    ests = estimates(phi)
    ests[1].converged = False
    rep = explanation_fidelity(phi, ests)
    assert rep.dropped == 1 and len(rep.cosine.values) == 2
    with pytest.raises(ValueError):
        explanation_fidelity(phi, ests[:2])
    with pytest.raises(ValueError):
        explanation_fidelity(phi, estimates(np.zeros((3, 5))))


def test_fidelity_uses_requested_column():
    phi = np.random.default_rng(2).normal(size=(2, 4, 3))
    truth = [phi[0], phi[1]]
    rep = explanation_fidelity(phi, estimates(truth), columns=[2, 0])
    assert rep.r2.mean == 1.0


def test_additive_model_fidelity_against_exact():
    net = ShapNetwork.build(NetworkSpec("kan_spline", 6, 1, hidden=()), seed=5)
    # phi_i = w_i * silu(x_i): additive, univariate and zero at the baseline
    params = net.parameters()
    params["0.kan_spline.base_weight"][~np.eye(6, dtype=bool)] = 0.0
    params["0.kan_spline.coef"][:] = 0.0
    x = np.random.default_rng(3).normal(size=(20, 6))
    vf = ValueFunction.baseline_removal(6)
    truth = [exact_shapley(model_game(net, row, vf, output=0), 6) for row in x]
    rep = explanation_fidelity(explain(net, x, vf), estimates(truth))
    assert rep.cosine.mean >= 0.99


def test_ground_truth_oracle_agrees_with_exact():
    net = ShapNetwork.build(NetworkSpec("kan_rbf", 5, 2, hidden=(6,)), seed=1)
    x = np.random.default_rng(4).normal(size=(3, 5))
    vf = ValueFunction.baseline_removal(5)
    gt = ground_truth(net, x, vf, tolerance=0.005, max_samples=200_000)
    cls = np.argmax(net.logits(x), axis=1)
    for row, c, est in zip(x, cls, gt):
        exact = exact_shapley(model_game(net, row, vf, output=int(c)), 5)
        assert np.linalg.norm(est.values - exact) <= 0.05 * np.linalg.norm(exact)


# -- curves -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def curve_setup():
    rng = np.random.default_rng(0)
    net = ShapNetwork.build(NetworkSpec("kan_spline", 6, 1, hidden=(8,), link="sigmoid"), seed=2)
    x = rng.normal(size=(200, 6))
    y = (net.predict(x)[:, 0] > 0.5).astype(int)
    y[::7] ^= 1
    return net, x, y


def test_inclusion_at_one_equals_accuracy(curve_setup):
    net, x, y = curve_setup
    c = inclusion_exclusion_curve(net, x, y, [0.25, 0.5, 1.0])
    assert abs(c.inclusion[-1] - accuracy(net, x, y)) <= 1e-12
    base = net.predict(np.zeros((1, 6)))[0, 0] > 0.5
    assert abs(c.exclusion[-1] - np.mean(y == int(base))) <= 1e-12
    assert c.inclusion.shape == c.exclusion.shape == (3,)


def test_curves_accept_external_attributions(curve_setup):
    net, x, y = curve_setup
    fr = [0.2, 0.6]
    other = inclusion_exclusion_curve(net, x, y, fr, phi=np.random.default_rng(0).normal(size=(200, 6)))
    own = inclusion_exclusion_curve(net, x, y, fr)
    np.testing.assert_array_equal(other.fractions, own.fractions)


def test_curves_under_marginal_value_function(curve_setup):
    net, x, y = curve_setup
    vf = ValueFunction.marginal(x[:10])
    c = inclusion_exclusion_curve(net, x, y, [1.0], vf=vf)
    assert abs(c.inclusion[0] - accuracy(net, x, y)) <= 1e-12


# -- timing -----------------------------------------------------------------------


def test_amortized_time_scales_linearly():
    net = ShapNetwork.build(NetworkSpec("kan_spline", 8, 1, hidden=(8, 8)), seed=0)
    x = np.random.default_rng(0).normal(size=(2000, 8))
    ratio = time_amortized(net, x, repeats=5) / time_amortized(net, x[:1000], repeats=5)
    assert 1.5 <= ratio <= 2.5


def test_repeated_timing_is_stable():
    net = ShapNetwork.build(NetworkSpec("kan_spline", 8, 1, hidden=(8, 8)), seed=0)
    x = np.random.default_rng(1).normal(size=(500, 8))
    runs = [time_amortized(net, x, repeats=5) for _ in range(3)]
    assert (max(runs) - min(runs)) / np.median(runs) <= 0.2


def test_benchmark_timing_contract():
    net = ShapNetwork.build(NetworkSpec("kan_spline", 4, 1, hidden=(4,)), seed=0)
    x = np.random.default_rng(2).normal(size=(100, 4))
    calls = []
    t = benchmark_timing(net, x, lambda row: calls.append(row), oracle_rows=10, repeats=1)
    assert len(calls) == 11 and t.instances == 100
    assert t.amortized_per_instance == t.amortized_total / 100
    with pytest.raises(ValueError):
        benchmark_timing(net, x[:50], lambda row: None)
