"""JSON schemas for model specs, fitted models, and simulation configs.

All schemas carry ``schema_version`` (currently 1); unknown fields are
rejected so archived files stay unambiguous.  Floats survive the JSON
round trip exactly (shortest-repr encoding).
"""

from __future__ import annotations

import json

import numpy as np

from .design import BasisContext, Cohort, CovariateEncoder, ModelSpec
from .dataio import SimulationConfig
from .errors import SchemaError
from .estimation import CovarianceParams, FittedModel

SCHEMA_VERSION = 1


def _check_version(d: dict, what: str):
    v = d.get("schema_version")
    if v != SCHEMA_VERSION:
        raise SchemaError(f"{what}: unsupported schema_version {v!r}")


def model_spec_to_json(spec: ModelSpec) -> str:
    return json.dumps({"schema_version": SCHEMA_VERSION, **spec.to_jsonable()}, indent=2)


def model_spec_from_json(text: str) -> ModelSpec:
    d = json.loads(text)
    _check_version(d, "model spec")
    d = {k: v for k, v in d.items() if k != "schema_version"}
    return ModelSpec.from_jsonable(d)


def load_model_spec(path) -> ModelSpec:
    with open(path, encoding="utf-8") as fh:
        return model_spec_from_json(fh.read())


def fitted_model_to_json(fitted: FittedModel) -> str:
    d = {
        "schema_version": SCHEMA_VERSION,
        "spec": fitted.spec.to_jsonable(),
        "method": fitted.method,
        "beta_hat": fitted.beta_hat.tolist(),
        "cov_beta": fitted.cov_beta.tolist(),
        "sigma_d_hat": fitted.sigma_d_hat.tolist(),
        "sigma2_hat": fitted.sigma2_hat,
        "loglik": fitted.loglik,
        "converged": fitted.converged,
        "iterations": fitted.iterations,
        "gradient_norm": fitted.gradient_norm,
        "theta": fitted.params.theta.tolist(),
        "n_subjects": fitted.n_subjects,
        "n_obs": fitted.n_obs,
        "column_labels": list(fitted.column_labels),
        "encoder": fitted.context.encoder.to_jsonable() if fitted.context.encoder else None,
    }
    return json.dumps(d, indent=2)


def fitted_model_from_json(text: str) -> FittedModel:
    d = json.loads(text)
    _check_version(d, "fitted model")
    known = {
        "schema_version", "spec", "method", "beta_hat", "cov_beta", "sigma_d_hat",
        "sigma2_hat", "loglik", "converged", "iterations", "gradient_norm", "theta",
        "n_subjects", "n_obs", "column_labels", "encoder",
    }
    extra = set(d) - known
    if extra:
        raise SchemaError(f"fitted model: unknown fields {sorted(extra)}")
    spec = ModelSpec.from_jsonable(d["spec"])
    encoder = CovariateEncoder.from_jsonable(d["encoder"]) if d.get("encoder") else None
    # the basis context rebuilds deterministically from the spec
    context = BasisContext(spec, cohort=None, encoder=encoder)
    params = CovarianceParams(
        structure=spec.random_cov,
        m=spec.random.n_columns,
        theta=np.asarray(d["theta"], dtype=float),
    )
    return FittedModel(
        spec=spec,
        method=d["method"],
        beta_hat=np.asarray(d["beta_hat"], dtype=float),
        cov_beta=np.asarray(d["cov_beta"], dtype=float),
        sigma_d_hat=np.asarray(d["sigma_d_hat"], dtype=float),
        sigma2_hat=float(d["sigma2_hat"]),
        loglik=float(d["loglik"]),
        converged=bool(d["converged"]),
        iterations=int(d["iterations"]),
        gradient_norm=float(d["gradient_norm"]),
        params=params,
        n_subjects=int(d["n_subjects"]),
        n_obs=int(d["n_obs"]),
        column_labels=list(d["column_labels"]),
        context=context,
        problem=None,
    )


def load_fitted_model(path) -> FittedModel:
    with open(path, encoding="utf-8") as fh:
        return fitted_model_from_json(fh.read())


def simulation_config_from_json(text: str) -> SimulationConfig:
    d = json.loads(text)
    _check_version(d, "simulation config")
    known = {
        "schema_version", "spec", "beta", "sigma_d", "sigma2", "n_subjects",
        "missing_rate", "time_jitter_sd", "seed", "base_times",
    }
    extra = set(d) - known
    if extra:
        raise SchemaError(f"simulation config: unknown fields {sorted(extra)}")
    spec = ModelSpec.from_jsonable(d["spec"])
    sigma_d = np.asarray(d["sigma_d"], dtype=float)
    if sigma_d.ndim == 1:
        sigma_d = np.diag(sigma_d)
    return SimulationConfig(
        spec=spec,
        beta=np.asarray(d["beta"], dtype=float),
        sigma_d=sigma_d,
        sigma2=float(d["sigma2"]),
        n_subjects=int(d["n_subjects"]),
        missing_rate=float(d.get("missing_rate", 0.0)),
        time_jitter_sd=float(d.get("time_jitter_sd", 0.0)),
        seed=int(d.get("seed", 0)),
        base_times=np.asarray(d["base_times"], dtype=float) if d.get("base_times") else None,
    )


def load_simulation_config(path) -> SimulationConfig:
    with open(path, encoding="utf-8") as fh:
        return simulation_config_from_json(fh.read())


def load_thresholds(path) -> dict:
    """Per-hour bounds: {"0": [lo, hi], ...} or {"all": [lo, hi]}."""
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if "all" in d:
        lo, hi = d["all"]
        return {h: (float(lo), float(hi)) for h in range(24)}
    out = {}
    for k, bounds in d.items():
        lo, hi = bounds
        out[int(k)] = (float(lo), float(hi))
    return out
