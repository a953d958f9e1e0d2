import numpy as np
import pytest
from scipy.stats import multivariate_normal, qmc

from posesparse.dmd_toy import (
    GaussianDistribution,
    StudentGenerator,
    alpha_sigma,
    dmd_gradient,
    fixed_timestep,
    format_trajectory,
    reverse_kl,
    train_student,
)
from posesparse.errors import ConfigError, DivergenceError, NumericalError


def _kl_1d_grad(a, b, mu, s2, t):
    # d/d(a, b) of KL(N(alpha b, alpha^2 a^2 + sigma^2) || N(alpha mu, alpha^2 s2 + sigma^2))
    al, si = alpha_sigma(t)
    v1 = al ** 2 * a ** 2 + si ** 2
    v2 = al ** 2 * s2 + si ** 2
    d_v1 = 0.5 * (1 / v2 - 1 / v1)
    return np.array([d_v1 * 2 * al ** 2 * a, al * (al * b - al * mu) / v2])


@pytest.mark.parametrize("t", [0.1, 0.5, 0.9])
def test_one_dim_gradient_within_three_standard_errors(t):
    student = StudentGenerator(np.array([[1.3]]), np.array([0.4]))
    teacher = GaussianDistribution([-0.5], [[0.6]])
    g = dmd_gradient(student, teacher, fixed_timestep(t), batch=40_000, seed=11)
    al, _ = alpha_sigma(t)
    expected = _kl_1d_grad(1.3, 0.4, -0.5, 0.6, t) / al
    assert np.all(np.abs(g.flat() - expected) < 3 * g.flat_stderr())


def test_gradient_vanishes_at_teacher():
    cov = np.array([[0.5, 0.2], [0.2, 2.0]])
    teacher = GaussianDistribution([1.0, -1.0], cov)
    student = StudentGenerator(np.linalg.cholesky(cov), np.array([1.0, -1.0]))
    g = dmd_gradient(student, teacher, batch=4096)
    assert np.abs(g.flat()).max() < 1e-12


def test_reverse_kl_matches_quasi_monte_carlo():
    p = GaussianDistribution([0.3, -0.2], [[1.2, 0.3], [0.3, 0.7]])
    q = GaussianDistribution([1.0, -1.0], [[0.5, 0.0], [0.0, 2.0]])
    z = qmc.MultivariateNormalQMC(np.zeros(2), engine=qmc.Sobol(2, scramble=True, seed=0)).random(2 ** 16)
    x = z @ np.linalg.cholesky(p.covariance).T + p.mean
    est = np.mean(multivariate_normal(p.mean, p.covariance).logpdf(x) - multivariate_normal(q.mean, q.covariance).logpdf(x))
    assert reverse_kl(p, q) == pytest.approx(est, abs=2e-3)
    assert reverse_kl(q, q) == 0.0


def test_gradient_is_thread_count_independent():
    teacher = GaussianDistribution([1.0, -1.0], np.diag([0.5, 2.0]))
    s = StudentGenerator.standard(2)
    a = dmd_gradient(s, teacher, batch=30_000, seed=(3, 4), threads=1)
    b = dmd_gradient(s, teacher, batch=30_000, seed=(3, 4), threads=6)
    np.testing.assert_array_equal(a.flat(), b.flat())


def test_training_trajectory_and_format():
    teacher = GaussianDistribution([1.0, -1.0], np.diag([0.5, 2.0]))
    traj = train_student(StudentGenerator.standard(2), teacher, steps=50, batch=256)
    assert len(traj) == 51 and traj[0].step == 0
    assert traj[-1].kl < traj[0].kl
    text = format_trajectory(traj)
    assert text.startswith("# posesparse-dmd-trajectory v1\n")
    assert len(text.splitlines()) == 53


def test_divergence_detected():
    teacher = GaussianDistribution([1.0, -1.0], np.diag([0.5, 2.0]))
    with pytest.raises(DivergenceError):
        train_student(StudentGenerator.standard(2), teacher, steps=50, lr=50.0, batch=256)


def test_invalid_inputs():
    with pytest.raises(NumericalError):
        GaussianDistribution([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
    teacher = GaussianDistribution([0.0], [[1.0]])
    with pytest.raises(ConfigError):
        train_student(StudentGenerator.standard(1), teacher, lr=0.0)
    with pytest.raises(ConfigError):
        dmd_gradient(StudentGenerator.standard(2), teacher)
