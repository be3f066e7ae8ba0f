"""Small covariance-algebra helpers."""

from __future__ import annotations

import numpy as np


def marginal_covariance(z: np.ndarray, sigma_d: np.ndarray, sigma2: float) -> np.ndarray:
    """Sigma = Z Sigma_d Z' + sigma^2 I."""
    p = z.shape[0]
    return z @ sigma_d @ z.T + sigma2 * np.eye(p)


def woodbury_inverse(z: np.ndarray, sigma_d: np.ndarray, sigma2: float) -> np.ndarray:
    """Sigma^-1 via the m-dimensional Woodbury identity.

    Sigma^-1 = I/s2 - Z (s2 Sigma_d^-1 + Z'Z)^-1 Z' / s2.
    Requires an invertible Sigma_d; the direct p-dimensional route in the
    estimator is the robust default, this is its independent counterpart.
    """
    p, m = z.shape
    core = sigma2 * np.linalg.inv(sigma_d) + z.T @ z
    return np.eye(p) / sigma2 - z @ np.linalg.solve(core, z.T) / sigma2
