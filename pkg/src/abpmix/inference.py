"""Fixed-effect inference: F-tests, Satterthwaite ddf, AIC/BIC, R2.

Denominator degrees of freedom follow the Satterthwaite moment match.
For a single-row contrast c, ddf = 2 (c' Phi c)^2 / Var(c' Phi c), with
the variance obtained by the delta method through the inverse observed
information of the covariance parameters.  Multi-row contrasts use the
spectral construction: eigen-split the contrast into single-df
components and moment-match the sum.

The R2 statistics convert an F and its ddf into the proportion-of-
variation scale: R2 = c F / (ddf + c F).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy import stats

from .errors import ComparisonError, ContrastError, StateError
from .estimation import FittedModel


@dataclass(frozen=True)
class Contrast:
    C: np.ndarray
    label: str = ""

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.C, dtype=float))
        if c.size == 0 or not np.all(np.isfinite(c)):
            raise ContrastError("contrast matrix must be finite and nonempty")
        object.__setattr__(self, "C", c)

    @classmethod
    def for_columns(cls, indices, q: int, label: str = "") -> "Contrast":
        indices = list(indices)
        c = np.zeros((len(indices), q))
        for row, idx in enumerate(indices):
            c[row, idx] = 1.0
        return cls(C=c, label=label)


@dataclass(frozen=True)
class TestResult:
    F: float
    ndf: int
    ddf: float
    p_value: float
    label: str = ""


def _information_inverse(fitted: FittedModel) -> np.ndarray:
    if fitted.problem is None:
        raise StateError("fit has no attached data; call attach_data() first")
    cached = getattr(fitted, "_vcov_theta", None)
    if cached is not None:
        return cached
    h = fitted.problem.observed_information(fitted.params.theta, fitted.method)
    # guard against indefinite FD Hessians at a boundary optimum
    ev, vec = np.linalg.eigh(h)
    ev = np.maximum(ev, 1e-12 * max(ev.max(), 1.0))
    vcov = (vec / ev) @ vec.T
    fitted._vcov_theta = vcov
    return vcov


def _satterthwaite_single(fitted: FittedModel, c: np.ndarray) -> float:
    phi = fitted.cov_beta
    var_c = float(c @ phi @ c)
    dphis = fitted.problem.cov_beta_derivatives(fitted.params.theta, fitted.method)
    g = np.array([float(c @ dp @ c) for dp in dphis])
    vv = float(g @ _information_inverse(fitted) @ g)
    if vv <= 0:
        return float(fitted.n_obs - fitted.q)
    return 2.0 * var_c**2 / vv


def f_test(fitted: FittedModel, contrast: Contrast) -> TestResult:
    """F-test of C beta = 0 with Satterthwaite denominator df."""
    if not fitted.converged:
        raise StateError("cannot test a non-converged fit")
    c = contrast.C
    if c.shape[1] != fitted.q:
        raise ContrastError(
            f"contrast has {c.shape[1]} columns, model has {fitted.q}"
        )
    rank = np.linalg.matrix_rank(c)
    if rank < c.shape[0]:
        raise ContrastError("contrast matrix is rank deficient")
    ndf = c.shape[0]
    mid = c @ fitted.cov_beta @ c.T
    cb = c @ fitted.beta_hat
    f_stat = float(cb @ sla.solve(mid, cb, assume_a="pos")) / ndf

    if ndf == 1:
        ddf = _satterthwaite_single(fitted, c[0])
    else:
        # spectral construction: split into orthogonal single-df pieces
        ev, vec = np.linalg.eigh(mid)
        ctil = vec.T @ c
        parts = []
        for lam, row in zip(ev, ctil):
            if lam <= 1e-12 * ev.max():
                continue
            parts.append(_satterthwaite_single(fitted, row))
        e_sum = sum(nu / (nu - 2.0) for nu in parts if nu > 2.0)
        if e_sum > ndf:
            ddf = 2.0 * e_sum / (e_sum - ndf)
        else:
            ddf = float(min(parts)) if parts else 1.0
    p = float(stats.f.sf(f_stat, ndf, ddf))
    return TestResult(F=f_stat, ndf=ndf, ddf=float(ddf), p_value=p, label=contrast.label)


def information_criteria(fitted: FittedModel):
    """(AIC, BIC) counting covariance parameters only, N = subjects."""
    r = fitted.n_cov_params
    neg2ll = -2.0 * fitted.loglik
    aic = neg2ll + 2.0 * r
    bic = neg2ll + r * np.log(fitted.n_subjects)
    return float(aic), float(bic)


def _r2_from_f(f_stat: float, ndf: int, ddf: float) -> float:
    x = ndf * f_stat
    return float(x / (ddf + x))


def r2_statistics(fitted: FittedModel, terms=None):
    """Model R2 plus per-term semi-partial R2 values.

    The model term is every fixed effect except the intercept; by default
    each non-intercept column is its own semi-partial term.
    """
    q = fitted.q
    model_contrast = Contrast.for_columns(range(1, q), q, label="model")
    tr = f_test(fitted, model_contrast)
    model_r2 = _r2_from_f(tr.F, tr.ndf, tr.ddf)
    if terms is None:
        labels = fitted.column_labels
        terms = [
            Contrast.for_columns([j], q, label=labels[j] if j < len(labels) else f"b{j}")
            for j in range(1, q)
        ]
    partials = []
    for term in terms:
        res = f_test(fitted, term)
        partials.append((res.label, _r2_from_f(res.F, res.ndf, res.ddf)))
    return model_r2, partials


def per_column_tests(fitted: FittedModel):
    """Single-column F-tests for every fixed effect (Table-1-style rows)."""
    out = []
    labels = fitted.column_labels
    for j in range(fitted.q):
        label = labels[j] if j < len(labels) else f"b{j}"
        out.append((j, label, f_test(fitted, Contrast.for_columns([j], fitted.q, label=label))))
    return out


def _fixed_structure_signature(fitted: FittedModel):
    spec = fitted.spec
    return (
        tuple(sorted(spec.fixed.to_jsonable().items(), key=str)),
        spec.group_terms,
        spec.interaction_terms,
    )


def assert_comparable(fits, force_reml_compare: bool = False):
    """Refuse REML AIC/BIC comparison across different fixed structures.

    REML likelihoods from different fixed-effect structures are not on a
    common scale; pass ``force_reml_compare=True`` to compare anyway.
    """
    if force_reml_compare:
        return
    reml = [f for f in fits if f.method == "REML"]
    sigs = {_fixed_structure_signature(f) for f in reml}
    if len(sigs) > 1:
        raise ComparisonError(
            "REML criteria are not comparable across fixed-effect structures; "
            "pass --force-reml-compare to compare anyway"
        )


def variance_component_table(fitted: FittedModel):
    """(name, estimate, se) rows for the covariance parameters.

    Standard errors come from the delta method through the observed
    information on the transformed scale.
    """
    from .estimation import _dsigma_d_list  # local import to avoid cycle at module load

    theta = fitted.params.theta
    m = fitted.params.m
    vcov = _information_inverse(fitted) if fitted.problem is not None else None
    dmats = _dsigma_d_list(fitted.params.structure, m, theta)
    rows = []
    if fitted.params.structure == "diagonal":
        entries = [(j, j) for j in range(m)]
    else:
        r, c = np.tril_indices(m)
        entries = list(zip(r.tolist(), c.tolist()))
    for a, b in entries:
        name = f"var(d{a})" if a == b else f"cov(d{a},d{b})"
        est = float(fitted.sigma_d_hat[a, b])
        se = np.nan
        if vcov is not None:
            jac = np.array([d[a, b] for d in dmats] + [0.0])
            se = float(np.sqrt(max(jac @ vcov @ jac, 0.0)))
        rows.append((name, est, se))
    se_s2 = np.nan
    if vcov is not None:
        jac = np.zeros(theta.size)
        jac[-1] = fitted.sigma2_hat
        se_s2 = float(np.sqrt(max(jac @ vcov @ jac, 0.0)))
    rows.append(("sigma2", float(fitted.sigma2_hat), se_s2))
    return rows
