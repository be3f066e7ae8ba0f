import numpy as np
import pytest

import abpmix as a
from abpmix.basis import DEFAULT_SPLINE_CLOCK_KNOTS, TimeGrid, clock_knots_to_elapsed
from abpmix.design import CovariateEncoder
from abpmix.errors import SpecError

from conftest import poly_spec


def complete_subject(sid="a", covariates=None, seed=0):
    grid = TimeGrid.hourly_midpoints()
    rng = np.random.default_rng(seed)
    return a.Subject(id=sid, times=grid, y=rng.normal(120, 10, size=24),
                     covariates=covariates or {})


class TestModelSpec:
    def test_random_degree_bounded_by_fixed(self):
        with pytest.raises(SpecError):
            a.ModelSpec(
                fixed=a.BasisDescriptor("orthonormal_poly", 2),
                random=a.BasisDescriptor("orthonormal_poly", 3),
            )

    def test_json_round_trip(self):
        spec = a.ModelSpec(
            fixed=a.BasisDescriptor("orthonormal_poly", 4),
            random=a.BasisDescriptor("orthonormal_poly", 2),
            random_cov="unstructured",
            group_terms=("diet",),
            interaction_terms=("diet",),
            reference_levels={"diet": "control"},
        )
        assert a.ModelSpec.from_jsonable(spec.to_jsonable()) == spec

    def test_unknown_field_rejected(self):
        d = poly_spec(2).to_jsonable()
        d["surprise"] = 1
        with pytest.raises(SpecError):
            a.ModelSpec.from_jsonable(d)


class TestBuildDesign:
    def test_degree_nine_complete_subject(self):
        spec = poly_spec(9)
        subject = complete_subject()
        ctx = a.BasisContext(spec)
        pair = a.build_design(spec, subject, ctx)
        assert pair.X.shape == (24, 10)
        assert pair.Z.shape == (24, 10)
        np.testing.assert_array_equal(pair.X, pair.Z)

    def test_diet_groups_and_interactions(self):
        spec = a.ModelSpec(
            fixed=a.BasisDescriptor("orthonormal_poly", 9),
            random=a.BasisDescriptor("orthonormal_poly", 9),
            group_terms=("diet",),
            interaction_terms=("diet",),
            reference_levels={"diet": "control"},
        )
        subjects = tuple(
            complete_subject(sid=f"s{i}", covariates={"diet": diet}, seed=i)
            for i, diet in enumerate(["control", "fruitveg", "combination"])
        )
        cohort = a.Cohort(subjects=subjects)
        ctx = a.BasisContext(spec, cohort)
        pair = a.build_design(spec, cohort.subjects[1], ctx)
        # 10 time columns + 2 indicators + 2*9 interactions
        assert pair.X.shape == (24, 30)
        assert pair.Z.shape == (24, 10)
        labels = ctx.fixed_column_labels()
        assert len(labels) == 30
        # reference level carries no indicator column
        assert "diet=control" not in labels
        assert "diet=fruitveg" in labels

    def test_dropping_interactions_reduces_q_by_interaction_count(self):
        base = dict(
            fixed=a.BasisDescriptor("orthonormal_poly", 9),
            random=a.BasisDescriptor("orthonormal_poly", 9),
            group_terms=("diet",),
            reference_levels={"diet": "control"},
        )
        full = a.ModelSpec(interaction_terms=("diet",), **base)
        reduced = a.ModelSpec(**base)
        subjects = tuple(
            complete_subject(sid=f"s{i}", covariates={"diet": d}, seed=i)
            for i, d in enumerate(["control", "fruitveg", "combination"])
        )
        cohort = a.Cohort(subjects=subjects)
        enc = a.BasisContext(full, cohort).encoder
        q_full, _ = a.parameter_count(full, enc)
        q_red, _ = a.parameter_count(reduced, enc)
        assert q_full - q_red == 2 * 9

    def test_missing_covariate_is_spec_error(self):
        spec = a.ModelSpec(
            fixed=a.BasisDescriptor("orthonormal_poly", 2),
            random=a.BasisDescriptor("orthonormal_poly", 2),
            group_terms=("age",),
        )
        good = complete_subject(covariates={"age": 50.0})
        cohort = a.Cohort(subjects=(good,))
        ctx = a.BasisContext(spec, cohort)
        bad = complete_subject(sid="b")
        with pytest.raises(SpecError, match="age"):
            a.build_design(spec, bad, ctx)

    def test_empty_subject_rejected(self):
        with pytest.raises(SpecError):
            a.Subject(id="x", times=TimeGrid(np.array([])), y=np.array([]))

    def test_determinism(self):
        spec = poly_spec(5)
        subject = complete_subject()
        p1 = a.build_design(spec, subject, a.BasisContext(spec))
        p2 = a.build_design(spec, subject, a.BasisContext(spec))
        assert np.array_equal(p1.X, p2.X) and np.array_equal(p1.Z, p2.Z)

    def test_pooled_gram_is_n_times_identity(self):
        # complete balanced subjects on the reference grid itself
        spec = a.ModelSpec(
            fixed=a.BasisDescriptor("orthonormal_poly", 4),
            random=a.BasisDescriptor("orthonormal_poly", 4),
            reference_grid_points=24,
        )
        grid = TimeGrid.equispaced(24)
        ctx = a.BasisContext(spec)
        n = 7
        gram = np.zeros((5, 5))
        for i in range(n):
            s = a.Subject(id=f"s{i}", times=grid, y=np.zeros(24))
            pair = a.build_design(spec, s, ctx)
            gram += pair.X.T @ pair.X
        np.testing.assert_allclose(gram, n * np.eye(5), atol=1e-8)

    def test_spline_fixed_design_shares_one_linear_map(self):
        knots = clock_knots_to_elapsed(DEFAULT_SPLINE_CLOCK_KNOTS, start_hour=8.0)
        spec = a.ModelSpec(
            fixed=a.BasisDescriptor("restricted_cubic_spline", knots=tuple(knots)),
            random=a.BasisDescriptor("natural_poly", 3),
            random_cov="unstructured",
        )
        ctx = a.BasisContext(spec)
        full = ctx.fixed_time_matrix(TimeGrid.hourly_midpoints())
        sub = ctx.fixed_time_matrix(TimeGrid(TimeGrid.hourly_midpoints().points[5:9]))
        # evaluating a subset of times gives the corresponding rows
        np.testing.assert_allclose(sub, full[5:9], atol=1e-12)


class TestParameterCount:
    def test_degree_nine_diagonal(self):
        assert a.parameter_count(poly_spec(9)) == (10, 11)

    def test_degree_nine_unstructured(self):
        assert a.parameter_count(poly_spec(9, "unstructured")) == (10, 56)

    def test_spline_competitor(self):
        knots = tuple(clock_knots_to_elapsed(DEFAULT_SPLINE_CLOCK_KNOTS, 8.0))
        spec = a.ModelSpec(
            fixed=a.BasisDescriptor("restricted_cubic_spline", knots=knots),
            random=a.BasisDescriptor("natural_poly", 3),
            random_cov="unstructured",
        )
        assert a.parameter_count(spec) == (9, 11)


class TestCovariateEncoder:
    def test_numeric_passthrough(self):
        cohort = a.Cohort(subjects=(complete_subject(covariates={"age": 41.0}),))
        enc = CovariateEncoder(cohort, ("age",))
        np.testing.assert_array_equal(enc.encode(cohort.subjects[0], "age"), [41.0])

    def test_alphabetical_reference_default(self):
        subs = tuple(
            complete_subject(sid=f"s{i}", covariates={"diet": d}, seed=i)
            for i, d in enumerate(["b", "a", "c"])
        )
        enc = CovariateEncoder(a.Cohort(subjects=subs), ("diet",))
        assert [label for label, _ in enc.term_columns["diet"]] == ["diet=b", "diet=c"]

    def test_json_round_trip(self):
        subs = tuple(
            complete_subject(sid=f"s{i}", covariates={"diet": d}, seed=i)
            for i, d in enumerate(["x", "y"])
        )
        enc = CovariateEncoder(a.Cohort(subjects=subs), ("diet",))
        back = CovariateEncoder.from_jsonable(enc.to_jsonable())
        assert back.term_columns == enc.term_columns


def test_cohort_requires_unique_ids():
    s = complete_subject()
    with pytest.raises(SpecError):
        a.Cohort(subjects=(s, s))
