import numpy as np
import pytest

from src.core_model import (
    Dataset,
    KernelParams,
    LambdaBasis,
    MonotoneBasis,
    batch_conditional,
    bordered_cov,
    conditional_cov,
    conditional_moments,
    kernel_cov,
    make_grid,
    psd_sqrt,
    mean_function,
    stable_cholesky,
    unit_means,
)
from src.errors import InvalidInputError, NumericalError

from .helpers import flat_mediator


def test_kernel_values():
    grid = np.array([-1.0, 0.0, 0.5])
    cov = kernel_cov(grid, KernelParams(rho=2.0, sigma_s2=1.5))
    assert cov.shape == (3, 3)
    np.testing.assert_allclose(np.diag(cov), 1.5)
    np.testing.assert_allclose(cov[0, 2], 1.5 * np.exp(-(1.5 ** 2) / 2.0))
    np.testing.assert_allclose(cov, cov.T)


def test_kernel_rejects_bad_parameters():
    with pytest.raises(InvalidInputError):
        KernelParams(rho=0.0, sigma_s2=1.0)
    with pytest.raises(InvalidInputError):
        KernelParams(rho=1.0, sigma_s2=np.inf)


def test_bordered_cov_matches_extra_point():
    grid = np.array([-1.0, 0.0, 1.0])
    t_obs = np.array([0.3, -0.7])
    params = KernelParams(1.3, 0.8)
    stacked = bordered_cov(grid, t_obs, params)
    assert stacked.shape == (2, 4, 4)
    for i, t in enumerate(t_obs):
        np.testing.assert_allclose(stacked[i], kernel_cov(grid, params, extra_point=t))


def test_stable_cholesky_reconstructs():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((4, 4))
    cov = a @ a.T + np.eye(4)
    chol = stable_cholesky(cov)
    np.testing.assert_allclose(chol @ chol.T, cov, atol=1e-8)


def test_stable_cholesky_escalates_jitter_on_singular_matrix():
    cov = np.ones((3, 3))
    chol = stable_cholesky(cov)
    np.testing.assert_allclose(chol @ chol.T, cov, atol=1e-3)


def test_stable_cholesky_reports_diagnostics():
    with pytest.raises(NumericalError) as info:
        stable_cholesky(np.stack([np.eye(2), -np.eye(2)]), label="test")
    assert info.value.diagnostics["unit"] == 1
    assert info.value.diagnostics["min_eigenvalue"] == pytest.approx(-1.0)


def test_psd_sqrt_handles_singular_stack():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((3, 3))
    singular = np.zeros((3, 3))
    singular[1:, 1:] = [[2.0, 1.0], [1.0, 1.0]]
    stack = np.stack([a @ a.T + np.eye(3), singular, np.ones((3, 3))])
    root = psd_sqrt(stack)
    np.testing.assert_allclose(root @ np.swapaxes(root, -1, -2), stack, atol=1e-10)
    # the zero row stays exactly pinned
    assert np.max(np.abs(root[1, 0])) < 1e-8


def test_psd_sqrt_rejects_negative_definite():
    with pytest.raises(NumericalError) as info:
        psd_sqrt(np.stack([np.eye(2), -np.eye(2)]), label="test")
    assert info.value.diagnostics["unit"] == 1
    with pytest.raises(NumericalError):
        psd_sqrt(np.array([[np.nan, 0.0], [0.0, 1.0]]))


def test_make_grid():
    t = np.array([-0.4, 0.2, 1.0])
    np.testing.assert_allclose(make_grid(t, size=3), [-0.4, 0.3, 1.0])
    np.testing.assert_allclose(make_grid(t, -1.0, 1.0, 5), np.linspace(-1, 1, 5))
    np.testing.assert_allclose(make_grid(t, points=[0.0, 2.0]), [0.0, 2.0])
    with pytest.raises(InvalidInputError):
        make_grid(t, 1.0, -1.0, 4)


def test_dataset_validation():
    grid = np.array([0.0, 1.0])
    with pytest.raises(InvalidInputError):
        Dataset(y=np.zeros(3), s_obs=np.zeros(2), t_obs=np.zeros(3), x=np.zeros((3, 1)), grid=grid)
    with pytest.raises(InvalidInputError):
        Dataset(y=np.array([0.0, np.nan]), s_obs=np.zeros(2), t_obs=np.zeros(2), x=np.zeros((2, 1)), grid=grid)
    with pytest.raises(InvalidInputError):
        Dataset(y=np.zeros(2), s_obs=np.zeros(2), t_obs=np.zeros(2), x=np.zeros((2, 1)), grid=np.array([1.0, 0.0]))


def test_dataset_is_read_only(small_dataset):
    with pytest.raises(ValueError):
        small_dataset.y[0] = 1.0
    np.testing.assert_allclose(small_dataset.mediator_design[:, 0], 1.0)


def test_far_from_grid():
    data = Dataset(
        y=np.zeros(3), s_obs=np.zeros(3), t_obs=np.array([0.1, 0.9, 3.5]), x=np.zeros((3, 1)),
        grid=np.array([0.0, 1.0]),
    )
    np.testing.assert_array_equal(data.far_from_grid(), [2])


def test_monotone_basis_is_nondecreasing_for_nonnegative_slopes():
    rng = np.random.default_rng(1)
    basis = MonotoneBasis.from_treatments(rng.normal(size=200), n_basis=5)
    t = np.linspace(-3, 3, 400)
    for _ in range(50):
        eta = rng.exponential(size=basis.n_coef)
        eta[0] = rng.normal()
        curve = basis.design(t) @ eta
        assert np.all(np.diff(curve) >= -1e-12)


def test_monotone_basis_layout():
    basis = MonotoneBasis(knots=np.array([0.0, 1.0]), includes_intercept=True)
    assert basis.n_slopes == 3
    assert basis.n_coef == 4
    np.testing.assert_array_equal(basis.constrained, [False, True, True, True])
    # b_j = d_j - d_{j+1}: t capped at the first knot, then clipped ramps between knots
    np.testing.assert_allclose(basis.design(np.array(2.0)), [1.0, 0.0, 1.0, 1.0])
    np.testing.assert_allclose(basis.design(np.array(0.5)), [1.0, 0.0, 0.5, 0.0])
    np.testing.assert_allclose(basis.design(np.array(-2.0)), [1.0, -2.0, 0.0, 0.0])


def test_mean_function():
    basis = MonotoneBasis(knots=np.array([0.0]), includes_intercept=True)
    eta = np.array([0.2, 1.0, 0.5])
    value = mean_function(0.5, [1.0, 2.0], eta, [0.1, 0.3], basis)
    # b(0.5) = (1, 0, 0.5)
    assert value == pytest.approx(0.2 + 0.5 * 0.5 + 0.1 + 0.6)
    with pytest.raises(InvalidInputError):
        mean_function(0.5, [1.0], eta, [0.1, 0.3], basis)


def test_lambda_basis_sizes():
    t = np.linspace(-1, 1, 50)
    spline = LambdaBasis.from_treatments(t, "spline", 4)
    assert spline.n_coef == 4
    assert spline.design(t).shape == (50, 4)
    poly = LambdaBasis.from_treatments(t, "polynomial")
    np.testing.assert_allclose(poly.design(np.array([2.0])), [[1.0, 2.0, 4.0]])


def test_conditional_moments_match_joint_gaussian(small_dataset):
    basis = MonotoneBasis(knots=np.array([0.0]), includes_intercept=True)
    mediator = flat_mediator(small_dataset.n, basis.n_coef, alpha=[0.2, -0.4], rho=1.5, sigma_s2=0.7)
    mediator.clusters.xi[1] = [0.1, 0.6, 0.3]
    mediator.clusters.z[2] = 1
    for i in range(small_dataset.n):
        moments = conditional_moments(i, small_dataset, mediator, basis)

        joint = kernel_cov(small_dataset.grid, mediator.kernel, extra_point=small_dataset.t_obs[i])
        eta = mediator.clusters.xi[mediator.clusters.z[i]]
        xa = small_dataset.mediator_design[i] @ mediator.alpha
        points = np.append(small_dataset.grid, small_dataset.t_obs[i])
        mean = basis.design(points) @ eta + xa
        gain = joint[:-1, -1] / joint[-1, -1]
        expected_mu = mean[:-1] + gain * (small_dataset.s_obs[i] - mean[-1])
        expected_cov = joint[:-1, :-1] - np.outer(gain, joint[-1, :-1])

        np.testing.assert_allclose(moments.mu_tilde, expected_mu, atol=1e-12)
        np.testing.assert_allclose(moments.sigma_tilde, expected_cov, atol=1e-12)


def test_batch_conditional_agrees_with_single_unit(small_dataset):
    basis = MonotoneBasis(knots=np.array([0.0]), includes_intercept=True)
    mediator = flat_mediator(small_dataset.n, basis.n_coef, alpha=[0.2, -0.4], rho=1.5, sigma_s2=0.7)
    m_grid, m_obs = unit_means(small_dataset, mediator, basis)
    mu_tilde, k = batch_conditional(small_dataset, mediator.kernel, m_grid, m_obs)
    sigma = conditional_cov(k, kernel_cov(small_dataset.grid, mediator.kernel), mediator.kernel.sigma_s2)
    for i in range(small_dataset.n):
        single = conditional_moments(i, small_dataset, mediator, basis)
        np.testing.assert_allclose(mu_tilde[i], single.mu_tilde, atol=1e-12)
        np.testing.assert_allclose(sigma[i], single.sigma_tilde, atol=1e-12)


def test_conditional_moments_rejects_bad_index(small_dataset):
    basis = MonotoneBasis(knots=np.array([0.0]))
    mediator = flat_mediator(small_dataset.n, basis.n_coef, alpha=[0.0, 0.0])
    with pytest.raises(InvalidInputError):
        conditional_moments(small_dataset.n, small_dataset, mediator, basis)
