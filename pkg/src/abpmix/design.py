"""Model specification and per-subject design construction.

A ``ModelSpec`` names the fixed and random time bases, the random-effects
covariance structure, and any static covariate terms.  A ``BasisContext``
freezes everything derived from the spec that must be shared across
subjects: the orthonormal-polynomial coefficient table generated on the
reference grid, and the Gram-Schmidt transforms for spline / natural
bases (computed once on the reference grid so every subject gets the same
linear map).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import basis as bas
from .basis import BasisMatrix, PolynomialCoefficients, TimeGrid
from .errors import RankError, SpecError

POLY_KINDS = ("orthonormal_poly", "natural_poly")
BASIS_KINDS = POLY_KINDS + ("restricted_cubic_spline",)


@dataclass(frozen=True)
class BasisDescriptor:
    """Declarative description of one time basis."""

    kind: str
    degree: Optional[int] = None
    knots: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in BASIS_KINDS:
            raise SpecError(f"unknown basis kind {self.kind!r}")
        if self.kind in POLY_KINDS:
            if self.degree is None or self.degree < 0:
                raise SpecError(f"{self.kind} needs a nonnegative degree")
        else:
            if self.knots is None or len(self.knots) < 3:
                raise SpecError("restricted_cubic_spline needs >= 3 knots")
            object.__setattr__(self, "knots", tuple(float(k) for k in self.knots))

    @property
    def n_columns(self) -> int:
        """Design columns contributed, intercept included."""
        if self.kind in POLY_KINDS:
            return self.degree + 1
        # linear term + (k-2) derived covariates + intercept
        return len(self.knots)

    def to_jsonable(self) -> dict:
        d = {"kind": self.kind}
        if self.degree is not None:
            d["degree"] = self.degree
        if self.knots is not None:
            d["knots"] = list(self.knots)
        return d

    @classmethod
    def from_jsonable(cls, d: dict) -> "BasisDescriptor":
        extra = set(d) - {"kind", "degree", "knots"}
        if extra:
            raise SpecError(f"unknown basis descriptor fields: {sorted(extra)}")
        return cls(
            kind=d["kind"],
            degree=d.get("degree"),
            knots=tuple(d["knots"]) if d.get("knots") is not None else None,
        )


@dataclass(frozen=True)
class ModelSpec:
    """Declarative mixed-model description."""

    fixed: BasisDescriptor
    random: BasisDescriptor
    random_cov: str = "diagonal"
    group_terms: tuple = ()
    interaction_terms: tuple = ()
    reference_grid_points: int = 49
    orthonormalize_random: bool = True
    reference_levels: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.random_cov not in ("diagonal", "unstructured"):
            raise SpecError(f"unknown random_cov {self.random_cov!r}")
        if (
            self.fixed.kind == "orthonormal_poly"
            and self.random.kind == "orthonormal_poly"
            and self.random.degree > self.fixed.degree
        ):
            raise SpecError("random polynomial degree must not exceed the fixed degree")
        if self.reference_grid_points < max(
            self.fixed.n_columns, self.random.n_columns
        ):
            raise SpecError("reference grid too small for the requested bases")
        object.__setattr__(self, "group_terms", tuple(self.group_terms))
        object.__setattr__(self, "interaction_terms", tuple(self.interaction_terms))
        object.__setattr__(self, "reference_levels", dict(self.reference_levels))

    def to_jsonable(self) -> dict:
        return {
            "fixed": self.fixed.to_jsonable(),
            "random": self.random.to_jsonable(),
            "random_cov": self.random_cov,
            "group_terms": list(self.group_terms),
            "interaction_terms": list(self.interaction_terms),
            "reference_grid_points": self.reference_grid_points,
            "orthonormalize_random": self.orthonormalize_random,
            "reference_levels": dict(self.reference_levels),
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "ModelSpec":
        known = {
            "fixed",
            "random",
            "random_cov",
            "group_terms",
            "interaction_terms",
            "reference_grid_points",
            "orthonormalize_random",
            "reference_levels",
        }
        extra = set(d) - known
        if extra:
            raise SpecError(f"unknown model spec fields: {sorted(extra)}")
        return cls(
            fixed=BasisDescriptor.from_jsonable(d["fixed"]),
            random=BasisDescriptor.from_jsonable(d["random"]),
            random_cov=d.get("random_cov", "diagonal"),
            group_terms=tuple(d.get("group_terms", ())),
            interaction_terms=tuple(d.get("interaction_terms", ())),
            reference_grid_points=int(d.get("reference_grid_points", 49)),
            orthonormalize_random=bool(d.get("orthonormalize_random", True)),
            reference_levels=d.get("reference_levels", {}),
        )


@dataclass(frozen=True)
class Subject:
    """One sampling unit: observation times, outcomes, static covariates."""

    id: str
    times: TimeGrid
    y: np.ndarray
    covariates: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if len(self.times) == 0:
            raise SpecError(f"subject {self.id!r} has no observations")
        if y.shape != (len(self.times),):
            raise SpecError(f"subject {self.id!r}: y and times lengths differ")
        if not np.all(np.isfinite(y)):
            raise SpecError(f"subject {self.id!r}: non-finite outcome values")
        arr = np.ascontiguousarray(y)
        arr.flags.writeable = False
        object.__setattr__(self, "y", arr)
        object.__setattr__(self, "covariates", dict(self.covariates))

    @property
    def n_obs(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class Cohort:
    subjects: tuple
    outcome_label: str = "SBP"

    def __post_init__(self):
        subs = tuple(self.subjects)
        if not subs:
            raise SpecError("cohort must contain at least one subject")
        ids = [s.id for s in subs]
        if len(set(ids)) != len(ids):
            raise SpecError("subject ids must be unique")
        object.__setattr__(self, "subjects", subs)

    def __len__(self) -> int:
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    @property
    def n_obs(self) -> int:
        return sum(s.n_obs for s in self.subjects)

    def subject(self, sid: str) -> Subject:
        for s in self.subjects:
            if s.id == sid:
                return s
        raise SpecError(f"unknown subject id {sid!r}")


@dataclass(frozen=True)
class DesignPair:
    X: np.ndarray
    Z: np.ndarray


def _is_number(v) -> bool:
    return isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool)


class CovariateEncoder:
    """Reference-cell coding for static covariates.

    Numeric covariates enter as-is; string-valued covariates expand into
    indicators against the alphabetically-first level unless a reference
    level is pinned in the spec.
    """

    def __init__(self, cohort: Optional[Cohort], terms: Sequence[str], reference_levels=None):
        reference_levels = reference_levels or {}
        self.terms = tuple(terms)
        self.term_columns = {}  # term -> list of (column label, level or None)
        for term in self.terms:
            if cohort is None:
                raise SpecError("covariate terms require cohort data")
            values = []
            for s in cohort:
                if term not in s.covariates:
                    raise SpecError(f"subject {s.id!r} missing covariate {term!r}")
                values.append(s.covariates[term])
            if all(_is_number(v) for v in values):
                self.term_columns[term] = [(term, None)]
            else:
                levels = sorted({str(v) for v in values})
                ref = str(reference_levels.get(term, levels[0]))
                if ref not in levels:
                    raise SpecError(f"reference level {ref!r} not observed for {term!r}")
                self.term_columns[term] = [
                    (f"{term}={lv}", lv) for lv in levels if lv != ref
                ]

    def n_columns(self, term: str) -> int:
        return len(self.term_columns[term])

    def column_labels(self, terms: Sequence[str]) -> list:
        out = []
        for term in terms:
            out.extend(label for label, _ in self.term_columns[term])
        return out

    def encode(self, subject: Subject, term: str) -> np.ndarray:
        if term not in subject.covariates:
            raise SpecError(f"subject {subject.id!r} missing covariate {term!r}")
        v = subject.covariates[term]
        cols = self.term_columns[term]
        if cols and cols[0][1] is None:
            if not _is_number(v):
                raise SpecError(f"covariate {term!r}: expected numeric value for {subject.id!r}")
            return np.array([float(v)])
        return np.array([1.0 if str(v) == lv else 0.0 for _, lv in cols])

    def to_jsonable(self) -> dict:
        return {
            term: [[label, level] for label, level in cols]
            for term, cols in self.term_columns.items()
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "CovariateEncoder":
        enc = cls.__new__(cls)
        enc.terms = tuple(d.keys())
        enc.term_columns = {
            term: [(label, level) for label, level in cols] for term, cols in d.items()
        }
        return enc


class BasisContext:
    """Shared per-spec basis machinery, generated once on the reference grid."""

    def __init__(self, spec: ModelSpec, cohort: Optional[Cohort] = None,
                 encoder: Optional[CovariateEncoder] = None):
        self.spec = spec
        self.reference_grid = TimeGrid.equispaced(spec.reference_grid_points, 0.0, 24.0)
        self._fixed = self._prepare(spec.fixed, orthonormalize=True)
        self._random = self._prepare(spec.random, orthonormalize=spec.orthonormalize_random)
        if encoder is not None:
            self.encoder = encoder
        else:
            terms = tuple(dict.fromkeys(spec.group_terms + spec.interaction_terms))
            self.encoder = CovariateEncoder(cohort, terms, spec.reference_levels) if terms else None

    def _prepare(self, desc: BasisDescriptor, orthonormalize: bool):
        grid = self.reference_grid
        if desc.kind == "orthonormal_poly":
            _, coeffs = bas.orthonormal_polynomial_basis(grid, desc.degree)
            return ("poly", coeffs)
        if desc.kind == "restricted_cubic_spline":
            raw = bas.restricted_cubic_spline_basis(grid, desc.knots).values
            m = np.column_stack([np.ones(len(grid)), raw])
            _, t = bas.gram_schmidt_transform(m)
            return ("rcs", (np.asarray(desc.knots, dtype=float), t))
        # natural polynomial, optionally Gram-Schmidt transformed (flag exists
        # to demonstrate the non-convergence of raw monomial random effects)
        if orthonormalize:
            m = bas.natural_polynomial_basis(grid, desc.degree).values
            _, t = bas.gram_schmidt_transform(m)
        else:
            t = None
        return ("natural", (desc.degree, t))

    def _matrix(self, prepared, times: TimeGrid) -> np.ndarray:
        kind, payload = prepared
        if kind == "poly":
            return bas.evaluate_polynomial_basis(payload, times).values
        if kind == "rcs":
            knots, t = payload
            raw = bas.restricted_cubic_spline_basis(times, knots).values
            m = np.column_stack([np.ones(len(times)), raw])
            return m @ t
        degree, t = payload
        m = bas.natural_polynomial_basis(times, degree).values
        return m @ t if t is not None else m

    def fixed_time_matrix(self, times: TimeGrid) -> np.ndarray:
        """Fixed-effect time-basis columns, intercept included."""
        return self._matrix(self._fixed, times)

    def random_matrix(self, times: TimeGrid) -> np.ndarray:
        """Random-effect design: intercept plus random-basis time columns."""
        return self._matrix(self._random, times)

    @property
    def n_fixed_time_columns(self) -> int:
        return self.spec.fixed.n_columns

    @property
    def n_random_columns(self) -> int:
        return self.spec.random.n_columns

    def fixed_column_labels(self) -> list:
        spec = self.spec
        if spec.fixed.kind in POLY_KINDS:
            labels = ["intercept"] + [f"time^{j}" for j in range(1, spec.fixed.degree + 1)]
        else:
            labels = ["intercept"] + [f"spline{j}" for j in range(1, spec.fixed.n_columns)]
        if self.encoder is not None:
            labels += self.encoder.column_labels(spec.group_terms)
            for term in spec.interaction_terms:
                for col_label, _ in self.encoder.term_columns[term]:
                    labels += [f"{col_label}:{tl}" for tl in labels[1 : spec.fixed.n_columns]]
        return labels


def build_design(spec: ModelSpec, subject: Subject, context: BasisContext) -> DesignPair:
    """Per-subject fixed and random design matrices.

    X column order: intercept + time-basis columns, then group indicators,
    then interaction columns.  Z never carries covariates.
    """
    s = context.fixed_time_matrix(subject.times)
    blocks = [s]
    if spec.group_terms or spec.interaction_terms:
        if context.encoder is None:
            raise SpecError("spec names covariates but no encoder is available")
        p = subject.n_obs
        for term in spec.group_terms:
            vals = context.encoder.encode(subject, term)
            blocks.append(np.tile(vals, (p, 1)))
        for term in spec.interaction_terms:
            vals = context.encoder.encode(subject, term)
            time_cols = s[:, 1:]  # intercept interactions are the group terms
            for v in vals:
                blocks.append(v * time_cols)
    x = np.hstack(blocks)
    z = context.random_matrix(subject.times)
    return DesignPair(X=x, Z=z)


def parameter_count(spec: ModelSpec, encoder: Optional[CovariateEncoder] = None):
    """(q fixed columns, r covariance parameters including sigma^2).

    Without an encoder each group term counts one column; with one,
    categorical expansions are counted exactly.
    """
    qt = spec.fixed.n_columns
    q = qt
    for term in spec.group_terms:
        q += encoder.n_columns(term) if encoder is not None else 1
    for term in spec.interaction_terms:
        cols = encoder.n_columns(term) if encoder is not None else 1
        q += cols * (qt - 1)
    m = spec.random.n_columns
    r = (m if spec.random_cov == "diagonal" else m * (m + 1) // 2) + 1
    return q, r
