"""Distribution matching distillation on Gaussians, where every score is analytic.

The teacher is a Gaussian ``N(mu, Sigma)``; the student is the affine
generator ``G(z) = A z + b`` with ``z ~ N(0, I)``, inducing ``N(b, A A^T)``.
Both are diffused with a variance-preserving schedule
``x_t = alpha_t x + sigma_t eps`` (``alpha_t = cos(pi t / 2)``,
``sigma_t = sin(pi t / 2)``), so their scores at any ``t`` are closed form.

The DMD update direction per sample is ``-(s_data(x_t) - s_gen(x_t)) dG/dtheta``.
At a fixed ``t`` its expectation equals ``(1 / alpha_t)`` times the gradient
of ``KL(p_gen,t || p_data,t)`` with respect to ``theta``, because
``dx_t / dtheta = alpha_t dG / dtheta``.

Random streams: the batch is cut into chunks of ``CHUNK`` samples; chunk
``c`` draws ``z``, then ``t``, then ``eps`` from
``SeedSequence(seed, spawn_key=(c,))``.  Chunks are reduced in index order,
so results do not depend on how many threads evaluate them.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, DivergenceError, NumericalError

CHUNK = 8192
T_MIN, T_MAX = 0.02, 0.98

TimestepSampler = Callable[[np.random.Generator, int], np.ndarray]


def alpha_sigma(t):
    t = np.asarray(t, dtype=np.float64)
    return np.cos(0.5 * np.pi * t), np.sin(0.5 * np.pi * t)


def uniform_timesteps(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.uniform(T_MIN, T_MAX, size=n)


def fixed_timestep(t: float) -> TimestepSampler:
    def sampler(rng, n):
        return np.full(n, float(t))

    return sampler


@dataclass(frozen=True)
class GaussianDistribution:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if cov.shape != (len(mu), len(mu)):
            raise ConfigError(f"covariance shape {cov.shape} does not match mean of length {len(mu)}")
        if not np.allclose(cov, cov.T, rtol=1e-12, atol=1e-12):
            raise NumericalError("covariance is not symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("covariance is not positive definite") from exc
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "covariance", 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return len(self.mean)

    def diffuse(self, t: float) -> "GaussianDistribution":
        a, s = alpha_sigma(t)
        return GaussianDistribution(a * self.mean, a * a * self.covariance + s * s * np.eye(self.dim))


class DiffusedScore:
    """``s(x_t, t) = -(a^2 Sigma + s^2 I)^-1 (x_t - a mu)``, vectorized over samples.

    ``Sigma`` only needs to be positive semi-definite: the diffused
    covariance is SPD for every ``t`` in the sampled range.
    """

    def __init__(self, mean, covariance):
        self.mean = np.asarray(mean, dtype=np.float64)
        cov = np.asarray(covariance, dtype=np.float64)
        self._evals, self._evecs = np.linalg.eigh(0.5 * (cov + cov.T))

    @classmethod
    def of(cls, dist: GaussianDistribution) -> "DiffusedScore":
        return cls(dist.mean, dist.covariance)

    def __call__(self, x_t: np.ndarray, t) -> np.ndarray:
        a, s = alpha_sigma(t)
        a = np.broadcast_to(a, x_t.shape[:1])[:, None]
        s = np.broadcast_to(s, x_t.shape[:1])[:, None]
        if not np.allclose(a * a + s * s, 1.0, rtol=0, atol=1e-12):
            raise NumericalError("noise schedule violates alpha^2 + sigma^2 = 1")
        r = (x_t - a * self.mean) @ self._evecs
        return -(r / (a * a * self._evals + s * s)) @ self._evecs.T


@dataclass(frozen=True)
class StudentGenerator:
    A: np.ndarray
    b: np.ndarray

    @classmethod
    def standard(cls, d: int) -> "StudentGenerator":
        return cls(np.eye(d), np.zeros(d))

    @property
    def dim(self) -> int:
        return len(self.b)

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return z @ self.A.T + self.b

    def distribution(self) -> GaussianDistribution:
        return GaussianDistribution(self.b, self.A @ self.A.T)

    def step(self, grad: "DmdGradient", lr: float) -> "StudentGenerator":
        return StudentGenerator(self.A - lr * grad.A, self.b - lr * grad.b)


@dataclass(frozen=True)
class DmdGradient:
    A: np.ndarray
    b: np.ndarray
    stderr_A: np.ndarray
    stderr_b: np.ndarray
    batch: int

    def flat(self) -> np.ndarray:
        return np.concatenate([self.A.ravel(), self.b])

    def flat_stderr(self) -> np.ndarray:
        return np.concatenate([self.stderr_A.ravel(), self.stderr_b])


def reverse_kl(p_gen: GaussianDistribution, p_data: GaussianDistribution) -> float:
    """Closed-form ``KL(p_gen || p_data)`` between Gaussians."""
    d = p_gen.dim
    try:
        L = np.linalg.cholesky(p_data.covariance)
        Lg = np.linalg.cholesky(p_gen.covariance)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("covariance is not positive definite") from exc
    M = np.linalg.solve(L, Lg)
    diff = np.linalg.solve(L, p_data.mean - p_gen.mean)
    logdet = 2 * (np.log(np.diag(L)).sum() - np.log(np.diag(Lg)).sum())
    # clamp round-off below the true minimum of zero
    return max(0.0, float(0.5 * (np.sum(M * M) + diff @ diff - d + logdet)))


def _chunk_sums(student, s_data, s_gen, sampler, seed_entropy, c, m):
    rng = np.random.default_rng(np.random.SeedSequence(seed_entropy, spawn_key=(c,)))
    d = student.dim
    z = rng.standard_normal((m, d))
    t = np.asarray(sampler(rng, m), dtype=np.float64)
    eps = rng.standard_normal((m, d))
    a, s = alpha_sigma(t)
    x_t = a[:, None] * student(z) + s[:, None] * eps
    delta = s_data(x_t, t) - s_gen(x_t, t)  # (m, d)
    g = np.concatenate([-(delta[:, :, None] * z[:, None, :]).reshape(m, d * d), -delta], axis=1)
    return g.sum(axis=0), (g * g).sum(axis=0)


def dmd_gradient(student: StudentGenerator, teacher: GaussianDistribution,
                 timestep_sampler: TimestepSampler = uniform_timesteps, batch: int = 4096, seed=0,
                 threads: int = 1) -> DmdGradient:
    """Monte-Carlo DMD gradient with respect to the student's ``(A, b)``.

    ``seed`` is an int or a tuple of ints; the same seed gives a bitwise
    identical result for any ``threads``.
    """
    if batch < 1:
        raise ConfigError("batch must be >= 1")
    d = student.dim
    if teacher.dim != d:
        raise ConfigError("teacher and student dimensions differ")
    s_data = DiffusedScore.of(teacher)
    s_gen = DiffusedScore(student.b, student.A @ student.A.T)

    entropy = seed if isinstance(seed, int) else [int(x) for x in seed]
    sizes = [min(CHUNK, batch - c * CHUNK) for c in range(-(-batch // CHUNK))]
    jobs = list(enumerate(sizes))

    def run(job):
        return _chunk_sums(student, s_data, s_gen, timestep_sampler, entropy, job[0], job[1])

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]
    total = np.zeros(d * d + d)
    total_sq = np.zeros(d * d + d)
    for s1, s2 in parts:
        total += s1
        total_sq += s2
    mean = total / batch
    if batch > 1:
        var = np.maximum(total_sq - batch * mean * mean, 0.0) / (batch - 1)
        se = np.sqrt(var / batch)
    else:
        se = np.full_like(mean, np.inf)
    if not np.all(np.isfinite(mean)):
        raise NumericalError("non-finite DMD gradient")
    return DmdGradient(mean[: d * d].reshape(d, d), mean[d * d:], se[: d * d].reshape(d, d), se[d * d:], batch)


@dataclass(frozen=True)
class TrainStep:
    step: int
    A: np.ndarray
    b: np.ndarray
    kl: float


def train_student(student: StudentGenerator, teacher: GaussianDistribution, steps: int = 2000, lr: float = 0.05,
                  batch: int = 1024, seed: int = 0, timestep_sampler: TimestepSampler = uniform_timesteps,
                  threads: int = 1) -> list[TrainStep]:
    """Plain gradient descent on the DMD gradient; records the clean-data reverse KL.

    The trajectory has ``steps + 1`` entries (the initial state first).  Step
    ``s`` draws its samples with seed ``(seed, s)``.
    """
    if lr <= 0:
        raise ConfigError("learning rate must be > 0")
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    kl0 = reverse_kl(student.distribution(), teacher)
    limit = 10 * max(kl0, 0.01)
    traj = [TrainStep(0, student.A.copy(), student.b.copy(), kl0)]
    for s in range(1, steps + 1):
        grad = dmd_gradient(student, teacher, timestep_sampler, batch, (seed, s), threads)
        student = student.step(grad, lr)
        try:
            kl = reverse_kl(student.distribution(), teacher)
        except NumericalError as exc:
            raise DivergenceError(f"student covariance collapsed at step {s}") from exc
        if not np.isfinite(kl) or kl > limit:
            raise DivergenceError(f"reverse KL {kl:.4g} at step {s} exceeds 10x its initial value")
        traj.append(TrainStep(s, student.A.copy(), student.b.copy(), kl))
    return traj


def format_trajectory(traj: list[TrainStep]) -> str:
    lines = ["# posesparse-dmd-trajectory v1", "step\treverse_kl\tA\tb"]
    for st in traj:
        A = ",".join(repr(float(v)) for v in st.A.ravel())
        b = ",".join(repr(float(v)) for v in st.b)
        lines.append(f"{st.step}\t{st.kl!r}\t{A}\t{b}")
    return "\n".join(lines) + "\n"
