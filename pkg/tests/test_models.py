import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import fd_gradient, max_rel_error
from scipy.integrate import dblquad
from scipy.stats import norm

from dsvgd.models import (
    BlrModel,
    DataLoss,
    Dataset,
    DomainError,
    GaussianMixture,
    MlpModel,
    ModelPrior,
    ProductTarget,
    UniformBox,
    blr_score,
    mixture_score,
    mlp_score,
    sample_prior,
    toy1d,
    toy2d,
)


def test_single_gaussian_score():
    assert mixture_score(GaussianMixture.gaussian([1.0], 4.0), [3.0])[0] == pytest.approx(-0.5, rel=1e-15)


def test_toy_factor_two_matches_finite_difference():
    f2 = toy1d().factors[1]
    # independent log-density: scipy normal pdfs, second arguments are variances
    logf = lambda t: math.log(norm.pdf(t[0], -3, 1) + norm.pdf(t[0], 3, math.sqrt(2)))  # noqa: E731
    fd = fd_gradient(logf, [0.0])
    assert max_rel_error(mixture_score(f2, [0.0]), fd, floor=1e-12) < 1e-6


def test_symmetric_mixture_midpoint():
    m = GaussianMixture([1.0, 1.0], [[-2.0], [2.0]], [1.0, 1.0])
    assert mixture_score(m, [0.0])[0] == pytest.approx(0.0, abs=1e-15)


def test_mixture_log_density_normalized_components():
    m = GaussianMixture([1.0, 1.0], [[-3.0], [3.0]], [1.0, 2.0])
    x = np.array([[0.7]])
    expected = math.log(norm.pdf(0.7, -3, 1) + norm.pdf(0.7, 3, math.sqrt(2)))
    assert m.log_density(x)[0] == pytest.approx(expected, rel=1e-13)


def test_mixture_score_2d_finite_difference():
    f1 = toy2d().factors[0]
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.normal(size=2) * 2
        fd = fd_gradient(lambda t: f1.log_density(t), x)
        assert max_rel_error(f1.score(x), fd) < 1e-5


def test_product_score_is_sum():
    toy = toy1d("gaussian")
    prod = ProductTarget([toy.prior, *toy.factors])
    x = np.linspace(-4, 4, 9)[:, None]
    np.testing.assert_allclose(prod.score(x), toy.prior.score(x) + toy.factors[0].score(x) + toy.factors[1].score(x))


def test_mixture_validation():
    with pytest.raises(ValueError):
        GaussianMixture([0.0], [[0.0]], [1.0])
    with pytest.raises(np.linalg.LinAlgError):
        GaussianMixture([1.0], [[0.0, 0.0]], [[[1.0, 2.0], [2.0, 1.0]]])


def test_uniform_box_support():
    box = UniformBox(-6, 6)
    np.testing.assert_array_equal(box.score([[0.0], [6.0]]), [[0.0], [0.0]])
    with pytest.raises(DomainError):
        box.score([[6.5]])
    np.testing.assert_array_equal(box.project(np.array([[-7.0], [1.0], [9.0]])), [[-6.0], [1.0], [6.0]])
    assert box.log_density([7.0]) == -np.inf


def test_uniform_prior_samples():
    s = sample_prior(UniformBox(-6, 6), 10_000, 0)
    assert abs(s.mean()) < 0.1
    assert s.min() >= -6 and s.max() <= 6
    assert np.array_equal(s, sample_prior(UniformBox(-6, 6), 10_000, 0))


# --- Bayesian logistic regression -----------------------------------------


def blr_log_joint(model, theta, x, y, scale=1.0, alpha=1.0):
    """Independent log density: scipy distributions plus the log-xi Jacobian."""
    from scipy.stats import gamma

    w, u = theta[:-1], theta[-1]
    xi = math.exp(u)
    lp = norm.logpdf(w, 0, 1 / math.sqrt(xi)).sum() + gamma.logpdf(xi, model.a, scale=1 / model.b) + u
    margins = y * (x @ w)
    ll = -np.logaddexp(0, -margins).sum()
    return lp + (scale / alpha) * ll


def blr_batch(rng, m=8, d=3):
    x = rng.normal(size=(m, d))
    y = rng.choice([-1.0, 1.0], size=m)
    return x, y


def test_blr_zero_weights_loss_gradient():
    rng = np.random.default_rng(0)
    x, y = blr_batch(rng)
    model = BlrModel(3)
    theta = np.array([0.0, 0.0, 0.0, 1.3])
    data_part = blr_score(model, theta, x, y) - model.prior_score(theta)
    np.testing.assert_allclose(data_part[:-1], 0.5 * (y[:, None] * x).sum(axis=0), rtol=1e-14)
    assert data_part[-1] == 0.0


def test_blr_score_finite_difference():
    rng = np.random.default_rng(1)
    model = BlrModel(3)
    errs = []
    for _ in range(100):
        x, y = blr_batch(rng)
        theta = np.concatenate([rng.normal(size=3), [rng.normal()]])
        scale = rng.uniform(0.5, 3.0)
        fd = fd_gradient(lambda t: blr_log_joint(model, t, x, y, scale), theta)
        errs.append(max_rel_error(blr_score(model, theta, x, y, scale), fd))
    assert max(errs) < 1e-5


def test_blr_prior_normalized_in_log_coordinates():
    model = BlrModel(1)
    # integrate over (w, u); the Jacobian term makes this a proper density
    val, _ = dblquad(
        lambda w, u: math.exp(model.prior_log_density(np.array([w, u]))),
        -8, 9, lambda u: -10 * math.exp(-u / 2), lambda u: 10 * math.exp(-u / 2), epsabs=1e-10,
    )
    assert val == pytest.approx(1.0, abs=1e-5)


def test_blr_scale_linearity():
    rng = np.random.default_rng(2)
    x, y = blr_batch(rng)
    model = BlrModel(3)
    theta = rng.normal(size=4)
    base = blr_score(model, theta, x, y, scale=0.0)
    one = blr_score(model, theta, x, y, scale=1.0) - base
    two = blr_score(model, theta, x, y, scale=2.0) - base
    np.testing.assert_allclose(two, 2 * one, rtol=1e-13)
    np.testing.assert_array_equal(base, model.prior_score(theta))


def test_blr_rejects_bad_labels():
    with pytest.raises(ValueError, match="labels"):
        BlrModel(2).loss_grad(np.zeros(3), np.ones((2, 2)), np.array([0.0, 1.0]))


def test_blr_prior_samples():
    model = BlrModel(2)
    s = sample_prior(ModelPrior(model), 40_000, 0)
    xi = np.exp(s[:, -1])
    assert xi.mean() == pytest.approx(model.a / model.b, rel=0.03)
    # marginal of w is a heavy-tailed Student t centred at 0
    assert abs(np.median(s[:, 0])) < 0.005
    assert abs(np.mean(s[:, :2] > 0) - 0.5) < 0.01


# --- one-hidden-layer network ----------------------------------------------


def mlp_log_joint(model, theta, x, y, scale=1.0):
    """Independent forward pass written with explicit loops over units."""
    dx, h, o = model.d_x, model.hidden, model.d_out
    i = 0
    W1 = theta[i : i + dx * h].reshape(dx, h)
    i += dx * h
    b1 = theta[i : i + h]
    i += h
    W2 = theta[i : i + h * o].reshape(h, o)
    i += h * o
    b2 = theta[i : i + o]
    total = 0.0
    for xb, yb in zip(x, y):
        hid = np.array([max(0.0, sum(xb[a] * W1[a, u] for a in range(dx)) + b1[u]) for u in range(h)])
        out = np.array([sum(hid[u] * W2[u, c] for u in range(h)) + b2[c] for c in range(o)])
        if model.task == "regression":
            total += 0.5 * (out[0] - yb) ** 2
        else:
            total += -(out[int(yb)] - np.log(np.exp(out).sum()))
    lp = -0.5 * model.prior_precision * np.sum(theta**2)
    return lp - scale * total


@pytest.mark.parametrize("task,d_out", [("regression", 1), ("multiclass", 3)])
def test_mlp_score_finite_difference(task, d_out):
    rng = np.random.default_rng(3)
    model = MlpModel(3, 4, d_out, task)
    x = rng.normal(size=(5, 3))
    y = rng.normal(size=5) if task == "regression" else rng.integers(0, d_out, size=5)
    worst = 0.0
    for _ in range(10):
        theta = rng.normal(size=model.dim)
        fd = fd_gradient(lambda t: mlp_log_joint(model, t, x, y), theta)
        worst = max(worst, max_rel_error(mlp_score(model, theta, x, y), fd))
    assert worst < 1e-4


def test_mlp_zero_network_bias_gradient():
    model = MlpModel(2, 3)
    x = np.array([[1.0, 2.0], [-1.0, 0.5]])
    y = np.array([0.3, -0.8])
    g = model.loss_grad(np.zeros(model.dim), x, y)
    # output = 0, so d loss / d b2 = sum(output - y)
    assert g[-1] == pytest.approx(np.sum(0.0 - y))
    np.testing.assert_array_equal(g[: model.d_x * model.hidden], 0.0)


def test_mlp_dead_unit_gets_no_input_gradient():
    model = MlpModel(2, 3)
    rng = np.random.default_rng(4)
    theta = rng.normal(size=model.dim)
    x = np.abs(rng.normal(size=(6, 2)))
    # unit 1 has negative weights and bias on positive inputs: never active
    theta = theta.copy()
    theta[[1, 4]] = -1.0
    theta[6 + 1] = -1.0
    g = model.loss_grad(theta, x, rng.normal(size=6)).reshape(-1)
    W1g = g[:6].reshape(2, 3)
    np.testing.assert_array_equal(W1g[:, 1], 0.0)
    assert g[6 + 1] == 0.0


def test_mlp_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        MlpModel(2, 3).loss_grad(np.zeros(5), np.zeros((1, 2)), np.zeros(1))


def test_mlp_rejects_binary_task():
    with pytest.raises(ValueError):
        MlpModel(2, 3, 2, "binary")


def test_scale_zero_is_prior_score():
    rng = np.random.default_rng(5)
    model = MlpModel(2, 3)
    theta = rng.normal(size=model.dim)
    np.testing.assert_array_equal(mlp_score(model, theta, np.ones((2, 2)), np.ones(2), scale=0.0), model.prior_score(theta))


# --- data losses -----------------------------------------------------------


def test_minibatch_gradient_is_unbiased():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(40, 2))
    y = rng.choice([-1.0, 1.0], size=40)
    data = Dataset(x, y, "binary")
    model = BlrModel(2)
    full = DataLoss(model, data).loss_grad(np.array([[0.3, -0.2, 0.0]]))
    mb = DataLoss(model, data, batch_size=10)
    est = np.mean([mb.loss_grad(np.array([[0.3, -0.2, 0.0]]), rng) for _ in range(20_000)], axis=0)
    np.testing.assert_allclose(est, full, atol=0.05 * np.abs(full).max())


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.ones((2, 1)), np.array([0.0, 1.0]), "binary")
    with pytest.raises(ValueError):
        Dataset(np.ones((2, 1)), np.array([0, 3]), "multiclass", num_classes=3)
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan]]), np.array([1.0]), "regression")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_prior_sampling_deterministic(seed):
    model = MlpModel(2, 3)
    assert np.array_equal(sample_prior(ModelPrior(model), 4, seed), sample_prior(ModelPrior(model), 4, seed))
