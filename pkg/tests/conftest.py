"""Shared fixtures and independent oracles.

The dense oracles below deliberately work on the stacked n-dimensional
problem with materialized covariance matrices so they share no code path
with the blockwise estimator they check.
"""

import numpy as np
import pytest
import scipy.linalg as sla

import abpmix as a
from abpmix.design import BasisContext, build_design
from abpmix.estimation import sigma_d_from_theta


def dense_stacked_loglik(theta, spec, cohort, method="REML"):
    """Stacked-Gaussian (RE)ML log-likelihood with beta profiled out."""
    ctx = BasisContext(spec, cohort)
    sd = sigma_d_from_theta(spec.random_cov, spec.random.n_columns, theta)
    s2 = float(np.exp(theta[-1]))
    xs, ys, blocks = [], [], []
    for s in cohort:
        pair = build_design(spec, s, ctx)
        xs.append(pair.X)
        ys.append(s.y)
        blocks.append(pair.Z @ sd @ pair.Z.T + s2 * np.eye(s.n_obs))
    x = np.vstack(xs)
    y = np.concatenate(ys)
    sigma = sla.block_diag(*blocks)
    si = np.linalg.inv(sigma)
    xtsx = x.T @ si @ x
    beta = np.linalg.solve(xtsx, x.T @ si @ y)
    r = y - x @ beta
    n, q = x.shape
    _, logdet = np.linalg.slogdet(sigma)
    if method == "REML":
        _, logdet_x = np.linalg.slogdet(xtsx)
        return -0.5 * (logdet + logdet_x + r @ si @ r + (n - q) * np.log(2 * np.pi))
    return -0.5 * (logdet + r @ si @ r + n * np.log(2 * np.pi))


def conditional_mean_blup_oracle(z, sigma_d, sigma2, resid):
    """E[d | y] from the joint normal of (d, y - X beta)."""
    cov_dy = sigma_d @ z.T
    var_y = z @ sigma_d @ z.T + sigma2 * np.eye(z.shape[0])
    return cov_dy @ np.linalg.solve(var_y, resid)


def random_tiny_problem(rng, structure="diagonal"):
    """A random tiny mixed-model instance (N <= 3, p <= 5)."""
    n_subjects = int(rng.integers(1, 4))
    degree = int(rng.integers(0, 2))
    spec = a.ModelSpec(
        fixed=a.BasisDescriptor("orthonormal_poly", degree),
        random=a.BasisDescriptor("orthonormal_poly", degree),
        random_cov=structure,
    )
    subjects = []
    for i in range(n_subjects):
        p = int(rng.integers(degree + 2, 6))
        times = np.sort(rng.uniform(0.0, 24.0, size=p))
        while np.any(np.diff(times) <= 1e-6):
            times = np.sort(rng.uniform(0.0, 24.0, size=p))
        subjects.append(
            a.Subject(id=f"t{i}", times=a.TimeGrid(times), y=rng.normal(50.0, 10.0, size=p))
        )
    cohort = a.Cohort(subjects=tuple(subjects))
    m = degree + 1
    k = (m if structure == "diagonal" else m * (m + 1) // 2) + 1
    theta = rng.normal(scale=0.8, size=k)
    return spec, cohort, theta


def poly_spec(degree, random_cov="diagonal"):
    return a.ModelSpec(
        fixed=a.BasisDescriptor("orthonormal_poly", degree),
        random=a.BasisDescriptor("orthonormal_poly", degree),
        random_cov=random_cov,
    )


def simulate(spec, beta, sigma_d, sigma2, n_subjects, seed, **kw):
    cfg = a.SimulationConfig(
        spec=spec,
        beta=np.asarray(beta, dtype=float),
        sigma_d=np.asarray(sigma_d, dtype=float),
        sigma2=sigma2,
        n_subjects=n_subjects,
        seed=seed,
        **kw,
    )
    return a.simulate_cohort(cfg)


@pytest.fixture(scope="session")
def small_fit():
    """A converged degree-2 fit reused by inference/blup tests."""
    spec = poly_spec(2)
    cohort = simulate(spec, [500.0, -20.0, 10.0], np.diag([80.0, 50.0, 30.0]), 25.0,
                      n_subjects=60, seed=314)
    fitted = a.fit(spec, cohort)
    assert fitted.converged
    return spec, cohort, fitted
