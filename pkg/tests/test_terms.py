import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.interpolate import BSpline

from bbfit.exceptions import DegenerateRangeError, DimensionError
from bbfit.terms import (
    Term,
    TermSpec,
    apply_centering,
    build_knots,
    difference_penalty,
    eval_basis,
    parse_term,
    prepare_terms,
    row_kronecker,
    tensor_design,
)


def cox_de_boor(t, i, k, x):
    """Textbook recursive definition of the i-th B-spline of degree k."""
    if k == 0:
        return 1.0 if t[i] <= x < t[i + 1] else 0.0
    out = 0.0
    if t[i + k] != t[i]:
        out += (x - t[i]) / (t[i + k] - t[i]) * cox_de_boor(t, i, k - 1, x)
    if t[i + k + 1] != t[i + 1]:
        out += (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * cox_de_boor(t, i + 1, k - 1, x)
    return out


class TestBuildKnots:
    def test_linear_example(self):
        knots = build_knots(0.0, 1.0, 4, 1)
        np.testing.assert_allclose(knots, [-1 / 3, 0, 1 / 3, 2 / 3, 1, 4 / 3], atol=1e-15)

    def test_degree_zero_has_no_extension(self):
        knots = build_knots(-2.0, 3.0, 6, 0)
        np.testing.assert_allclose(knots, np.linspace(-2, 3, 6), atol=1e-15)

    def test_range_ends_are_exact(self):
        knots = build_knots(0.1, 0.7, 20, 3)
        assert knots[3] == 0.1 and knots[22] == 0.7
        assert np.allclose(np.diff(knots), 0.6 / 19)

    @pytest.mark.parametrize("lo,hi", [(1.0, 1.0), (2.0, 1.0), (0.0, np.inf)])
    def test_degenerate_range(self, lo, hi):
        with pytest.raises(DegenerateRangeError):
            build_knots(lo, hi, 10, 3)


class TestEvalBasis:
    def test_partition_of_unity(self):
        knots = build_knots(-2, 2, 20, 3)
        x = np.random.default_rng(0).uniform(-2, 2, 1000)
        B = eval_basis(knots, np.r_[x, -2.0, 2.0], 3)
        np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-12)
        assert B.min() >= 0.0 and B.max() <= 1.0

    def test_degree_zero_indicator(self):
        knots = build_knots(0, 1, 5, 0)
        B = eval_basis(knots, np.linspace(0, 1, 37), 0)
        assert B.shape == (37, 4)
        assert np.all((B != 0).sum(axis=1) == 1)
        assert np.all(B.max(axis=1) == 1.0)

    def test_textbook_recursion_at_knots(self):
        knots = build_knots(0.0, 1.0, 8, 3)
        # the knots of [0, 1) plus a few off-knot points (the right end is
        # covered by test_right_end_belongs_to_last_interval)
        x = np.r_[knots[3:10], 0.123, 0.5551, 0.9]
        B = eval_basis(knots, x, 3)
        p = len(knots) - 4
        for row, xv in zip(B, x):
            ref = [cox_de_boor(knots, i, 3, xv) for i in range(p)]
            np.testing.assert_allclose(row, ref, atol=1e-12)

    def test_matches_scipy_bspline(self):
        knots = build_knots(-1.0, 2.0, 12, 3)
        x = np.random.default_rng(1).uniform(-1, 2, 200)
        ref = BSpline.design_matrix(x, knots, 3).toarray()
        np.testing.assert_allclose(eval_basis(knots, x, 3), ref, atol=1e-12)

    def test_right_end_belongs_to_last_interval(self):
        knots = build_knots(0.0, 1.0, 6, 3)
        row = eval_basis(knots, [1.0], 3)[0]
        left = eval_basis(knots, [1.0 - 1e-13], 3)[0]
        np.testing.assert_allclose(row, left, atol=1e-10)

    def test_outside_range_is_clamped(self):
        knots = build_knots(0.0, 1.0, 6, 3)
        np.testing.assert_array_equal(
            eval_basis(knots, [-5.0, 7.0], 3), eval_basis(knots, [0.0, 1.0], 3)
        )


class TestDifferencePenalty:
    def test_first_order_p3(self):
        K = difference_penalty(3, 1)
        np.testing.assert_array_equal(K, [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])

    def test_second_order_null_space(self):
        K = difference_penalty(4, 2)
        np.testing.assert_allclose(K @ np.ones(4), 0, atol=1e-14)
        np.testing.assert_allclose(K @ np.arange(1, 5.0), 0, atol=1e-14)

    @pytest.mark.parametrize("p,order", [(5, 1), (10, 2), (23, 2), (12, 3)])
    def test_psd_with_polynomial_null_space(self, p, order):
        K = difference_penalty(p, order)
        ev = np.linalg.eigvalsh(K)
        assert ev.min() >= -1e-10
        assert np.sum(np.abs(ev) < 1e-8) == order
        grid = np.arange(p, dtype=float)
        for d in range(order):
            np.testing.assert_allclose(K @ grid**d, 0, atol=1e-8 * p**order)

    @pytest.mark.parametrize("p,order", [(2, 2), (3, 3), (4, 0)])
    def test_dimension_error(self, p, order):
        with pytest.raises(DimensionError):
            difference_penalty(p, order)


class TestTensor:
    def setup_method(self):
        self.spec = TermSpec(kind="tensor2d", covariates=("a", "b"), n_knots=3, degree=1, penalty_order=1)
        self.k1 = build_knots(0, 1, 3, 1)
        self.k2 = build_knots(-1, 1, 3, 1)
        rng = np.random.default_rng(2)
        self.x1 = rng.uniform(0, 1, 50)
        self.x2 = rng.uniform(-1, 1, 50)

    def test_row_sums(self):
        tm = tensor_design(self.spec, self.k1, self.k2, self.x1, self.x2)
        assert tm.design.shape == (50, 9)
        np.testing.assert_allclose(tm.design.sum(axis=1), 1.0, atol=1e-12)

    def test_rows_are_kronecker_products(self):
        tm = tensor_design(self.spec, self.k1, self.k2, self.x1, self.x2)
        B1 = eval_basis(self.k1, self.x1, 1)
        B2 = eval_basis(self.k2, self.x2, 1)
        for i in range(0, 50, 7):
            np.testing.assert_array_equal(tm.design[i], np.kron(B1[i], B2[i]))

    def test_zero_tau_gives_zero_penalty(self):
        tm = tensor_design(self.spec, self.k1, self.k2, self.x1, self.x2)
        assert np.all(tm.penalty([0.0, 0.0]) == 0.0)

    def test_hand_assembled_kronecker_sum(self):
        tm = tensor_design(self.spec, self.k1, self.k2, self.x1, self.x2)
        K1 = np.array([[1, -1, 0], [-1, 2, -1], [0, -1, 1]], dtype=float)
        expected = np.zeros((9, 9))
        # index (a, b) -> 3a + b; margin-1 differences act across a, margin-2 across b
        for a in range(3):
            for b in range(3):
                for a2 in range(3):
                    expected[3 * a + b, 3 * a2 + b] += K1[a, a2]
                for b2 in range(3):
                    expected[3 * a + b, 3 * a + b2] += K1[b, b2]
        np.testing.assert_array_equal(tm.penalty([1.0, 1.0]), expected)

    def test_per_margin_null_space(self):
        spec = TermSpec(kind="tensor2d", covariates=("a", "b"), n_knots=5, degree=3)
        tm = tensor_design(spec, build_knots(0, 1, 5, 3), build_knots(0, 1, 5, 3), self.x1, self.x1)
        g = np.arange(7.0)
        for v in (np.ones(7), g):
            for w in (np.ones(7), g):
                np.testing.assert_allclose(tm.penalty([2.0, 3.0]) @ np.kron(v, w), 0, atol=1e-10)

    def test_needs_two_covariates(self):
        with pytest.raises(DimensionError):
            TermSpec(kind="tensor2d", covariates=("a",))


class TestCentering:
    def test_column_means_vanish(self):
        knots = build_knots(-2, 2, 20, 3)
        x = np.random.default_rng(4).uniform(-2, 2, 500)
        B = eval_basis(knots, x, 3)
        Xc, Kc, con = apply_centering(B, difference_penalty(22, 2))
        assert Xc.shape == (500, 21)
        np.testing.assert_allclose(Xc.mean(axis=0), 0, atol=1e-10)
        assert np.linalg.eigvalsh(Kc).min() >= -1e-10
        np.testing.assert_allclose(Kc, con.Z.T @ difference_penalty(22, 2) @ con.Z)

    def test_constant_column_removed(self):
        x = np.random.default_rng(5).normal(size=100)
        X = np.column_stack([np.ones(100), x])
        Xc, _, _ = apply_centering(X, np.zeros((2, 2)))
        assert Xc.shape == (100, 1)
        # what is left is proportional to the centered covariate
        c = x - x.mean()
        cos = abs(Xc[:, 0] @ c) / (np.linalg.norm(Xc[:, 0]) * np.linalg.norm(c))
        assert cos == pytest.approx(1.0, abs=1e-12)

    def test_fitted_effect_mean_is_zero(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(0, 1, 400)
        y = np.sin(6 * x) + 3.0 + rng.normal(scale=0.1, size=400)
        B = eval_basis(build_knots(0, 1, 10, 3), x, 3)
        Xc, Kc, _ = apply_centering(B, difference_penalty(12, 2))
        # intercept plus centered spline, least squares
        A = np.column_stack([np.ones(400), Xc])
        P = np.zeros((A.shape[1], A.shape[1]))
        P[1:, 1:] = 0.1 * Kc
        coef = np.linalg.solve(A.T @ A + P, A.T @ y)
        assert abs(np.mean(Xc @ coef[1:])) < 1e-8

    def test_idempotent(self):
        B = eval_basis(build_knots(0, 1, 8, 3), np.linspace(0, 1, 200), 3)
        Xc, Kc, _ = apply_centering(B, difference_penalty(10, 2))
        Xcc, Kcc, con = apply_centering(Xc, Kc)
        assert con.is_identity
        np.testing.assert_array_equal(Xcc, Xc)
        np.testing.assert_array_equal(Kcc, Kc)


class TestTermSpec:
    def test_defaults(self):
        s = TermSpec(kind="pspline", covariates=("x",))
        assert (s.n_knots, s.degree, s.penalty_order, s.center) == (20, 3, 2, True)
        assert TermSpec(kind="linear", covariates=("x",)).center is False

    def test_invariants(self):
        with pytest.raises(ValueError):
            TermSpec(kind="pspline", covariates=("x",), n_knots=2, penalty_order=2)
        with pytest.raises(ValueError):
            TermSpec(kind="pspline", covariates=("x",), degree=-1)
        with pytest.raises(ValueError):
            TermSpec(kind="spline", covariates=("x",))

    @pytest.mark.parametrize(
        "text,kind,label",
        [("s(x1)", "pspline", "s(x1)"), ("te(lon, lat)", "tensor2d", "te(lon,lat)"),
         ("x2", "linear", "x2"), ("1", "intercept", "(Intercept)")],
    )
    def test_parse_shorthand(self, text, kind, label):
        s = parse_term(text)
        assert s.kind == kind and s.label == label
        assert parse_term(s.to_dict()) == s


class TestPreparedTerms:
    def setup_method(self):
        rng = np.random.default_rng(7)
        n = 3000
        self.data = {
            "x1": rng.uniform(-2, 2, n),
            "lon": rng.uniform(-2, 2, n),
            "lat": rng.uniform(-2, 2, n),
        }
        self.terms = prepare_terms(
            ["1", "x1", "s(x1)", "te(lon,lat)"], self.data, chunk_size=700
        )

    def test_knots_from_full_scan(self):
        s = self.terms[2]
        assert s.knots[0][3] == self.data["x1"].min()
        assert s.knots[0][-4] == self.data["x1"].max()

    def test_centered_on_reference_data(self):
        for t in self.terms[2:]:
            X = t.design(self.data)
            np.testing.assert_allclose(X.mean(axis=0), 0, atol=1e-10)
        assert self.terms[3].n_tau == 2 and self.terms[2].n_tau == 1
        assert self.terms[0].n_tau == 0 and self.terms[1].n_tau == 0

    def test_batch_rows_bitwise_equal_full_rows(self):
        rng = np.random.default_rng(8)
        for t in self.terms:
            full = t.design(self.data)
            for size in (1, 17, 1000):
                ids = rng.choice(3000, size=size, replace=False)
                batch = t.design({k: v[ids] for k, v in self.data.items()})
                np.testing.assert_array_equal(batch, full[ids])

    def test_chunk_size_does_not_matter(self):
        other = prepare_terms(["s(x1)", "te(lon,lat)"], self.data, chunk_size=3000)
        for a, b in zip(self.terms[2:], other):
            np.testing.assert_array_equal(a.knots[0], b.knots[0])
            np.testing.assert_allclose(a.constraint.Z, b.constraint.Z, atol=1e-12)

    def test_serialization_round_trip(self):
        for t in self.terms:
            back = Term.from_dict(t.to_dict())
            np.testing.assert_array_equal(back.design(self.data), t.design(self.data))
            np.testing.assert_array_equal(back.penalty(np.full(t.n_tau, 0.3)), t.penalty(np.full(t.n_tau, 0.3)))

    def test_centered_linear_term_subtracts_mean(self):
        (t,) = prepare_terms([TermSpec(kind="linear", covariates=("x1",), center=True)], self.data)
        X = t.design(self.data)
        assert X.shape == (3000, 1)
        np.testing.assert_allclose(X[:, 0], self.data["x1"] - self.data["x1"].mean(), atol=1e-12)
        back = Term.from_dict(t.to_dict())
        np.testing.assert_array_equal(back.design(self.data), X)

    def test_fixed_bounds(self):
        (t,) = prepare_terms([TermSpec(covariates=("x1",), bounds=((-3, 3),))], self.data)
        assert t.knots[0][3] == -3 and t.knots[0][-4] == 3


@settings(max_examples=40, deadline=None)
@given(
    lo=st.floats(-100, 100),
    width=st.floats(1e-3, 100),
    n_knots=st.integers(3, 30),
    degree=st.integers(0, 4),
    u=st.lists(st.floats(0, 1), min_size=1, max_size=30),
)
def test_partition_of_unity_property(lo, width, n_knots, degree, u):
    knots = build_knots(lo, lo + width, n_knots, degree)
    x = lo + width * np.asarray(u)
    B = eval_basis(knots, x, degree)
    np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-12)
    assert B.min() >= 0.0


@settings(max_examples=30, deadline=None)
@given(rows=st.integers(1, 20), p=st.integers(1, 5), q=st.integers(1, 5), seed=st.integers(0, 1000))
def test_row_kronecker_property(rows, p, q, seed):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(rows, p)), rng.normal(size=(rows, q))
    R = row_kronecker(A, B)
    for i in range(rows):
        np.testing.assert_array_equal(R[i], np.kron(A[i], B[i]))
