"""Tensor algebra: closed forms, FD-oracle Jacobians, inequality brackets."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pstokes.tensors import (
    MONOTONICITY_BOUNDS,
    ORDERING_CONSTANTS,
    PowerLawParams,
    _sample_matrix_batch,
    _sample_pair_batch,
    frobenius,
    jacobian_coefficients,
    monotonicity_ratio,
    nonlinear_V,
    stress_S,
    stress_jacobian,
    young_gap,
)

FD_STEP = 1e-5
FD_RTOL = 1e-6

finite_entry = st.floats(
    min_value=-1e3, max_value=1e3, allow_nan=False, allow_infinity=False
)


def sym(mat):
    return 0.5 * (mat + mat.T)


@st.composite
def sym_matrices(draw):
    entries = draw(st.lists(finite_entry, min_size=4, max_size=4))
    return sym(np.array(entries).reshape(2, 2))


class TestClosedForms:
    def test_zero_matrix_maps_to_zero(self):
        for p in (1.5, 2.0, 3.0):
            for kappa in (0.0, 0.3):
                params = PowerLawParams(p=p, kappa=kappa)
                assert np.all(stress_S(np.zeros((2, 2)), params) == 0.0)
                assert np.all(nonlinear_V(np.zeros((2, 2)), params) == 0.0)

    def test_p2_is_identity(self):
        rng = np.random.default_rng(7)
        A = sym(rng.standard_normal((2, 2)))
        for kappa in (0.0, 2.0):
            params = PowerLawParams(p=2.0, kappa=kappa)
            np.testing.assert_array_equal(stress_S(A, params), A)
            np.testing.assert_array_equal(nonlinear_V(A, params), A)

    def test_p4_identity_matrix(self):
        params = PowerLawParams(p=4.0, kappa=0.0)
        eye = np.eye(2)
        # |I| = sqrt(2); (sqrt 2)^2 = 2 and (sqrt 2)^1 = sqrt 2.
        np.testing.assert_allclose(stress_S(eye, params), 2.0 * eye, rtol=1e-14)
        np.testing.assert_allclose(
            nonlinear_V(eye, params), np.sqrt(2.0) * eye, rtol=1e-14
        )

    def test_nonfinite_input_rejected(self):
        params = PowerLawParams(p=3.0)
        bad = np.array([[np.nan, 0.0], [0.0, 1.0]])
        with pytest.raises(ValueError):
            stress_S(bad, params)
        with pytest.raises(ValueError):
            nonlinear_V(bad, params)

    def test_invalid_params_rejected(self):
        with pytest.raises(ValueError):
            PowerLawParams(p=1.0)
        with pytest.raises(ValueError):
            PowerLawParams(p=2.0, kappa=-0.1)

    def test_conjugate_exponent_identity(self):
        # |S(A)|^p' = |A|^p for kappa = 0, pointwise.
        rng = np.random.default_rng(11)
        A = _sample_matrix_batch(rng, 512)
        for p in (1.5, 2.0, 3.0, 4.0):
            params = PowerLawParams(p=p, kappa=0.0)
            lhs = frobenius(stress_S(A, params)) ** params.p_conj
            rhs = frobenius(A) ** p
            np.testing.assert_allclose(lhs, rhs, rtol=1e-11)


class TestJacobian:
    def test_p2_identity_map(self):
        params = PowerLawParams(p=2.0, kappa=0.7)
        rng = np.random.default_rng(3)
        A, B = sym(rng.standard_normal((2, 2))), sym(rng.standard_normal((2, 2)))
        np.testing.assert_allclose(stress_jacobian(A, params)(B), B, atol=1e-15)

    def test_zero_point_above_two_is_zero_map(self):
        params = PowerLawParams(p=3.0, kappa=0.0)
        apply = stress_jacobian(np.zeros((2, 2)), params)
        B = np.array([[1.0, 2.0], [2.0, -1.0]])
        np.testing.assert_array_equal(apply(B), np.zeros((2, 2)))

    @pytest.mark.parametrize("p", [1.5, 2.0, 2.5, 3.0, 4.0])
    @pytest.mark.parametrize("kappa", [0.0, 0.4])
    def test_finite_difference_oracle(self, p, kappa):
        # Central differences of S are the independent check on DS.
        params = PowerLawParams(p=p, kappa=kappa)
        rng = np.random.default_rng(int(10 * p) + int(10 * kappa))
        for _ in range(50):
            A = sym(rng.standard_normal((2, 2)))
            if frobenius(A) <= params.newton_reg:
                continue
            B = sym(rng.standard_normal((2, 2)))
            fd = (
                stress_S(A + FD_STEP * B, params) - stress_S(A - FD_STEP * B, params)
            ) / (2.0 * FD_STEP)
            exact = stress_jacobian(A, params)(B)
            assert np.linalg.norm(fd - exact) <= FD_RTOL * max(
                np.linalg.norm(exact), 1e-12
            )

    def test_bilinear_form_symmetric_psd(self):
        rng = np.random.default_rng(5)
        for p in (1.5, 2.0, 3.0, 4.0):
            params = PowerLawParams(p=p, kappa=0.0)
            for _ in range(50):
                A = sym(rng.standard_normal((2, 2))) * 10.0 ** rng.uniform(-6, 2)
                apply = stress_jacobian(A, params)
                B = sym(rng.standard_normal((2, 2)))
                C = sym(rng.standard_normal((2, 2)))
                lhs = np.sum(apply(B) * C)
                rhs = np.sum(apply(C) * B)
                assert abs(lhs - rhs) <= 1e-10 * (abs(lhs) + abs(rhs) + 1e-30)
                assert np.sum(apply(B) * B) >= -1e-13 * np.sum(B * B)

    def test_newton_reg_never_touches_residual(self):
        # Bit-identical stress for any Jacobian floor.
        rng = np.random.default_rng(9)
        A = sym(rng.standard_normal((2, 2))) * 1e-10
        pa = PowerLawParams(p=1.5, kappa=0.0, newton_reg=1e-8)
        pb = PowerLawParams(p=1.5, kappa=0.0, newton_reg=1e-2)
        assert np.array_equal(stress_S(A, pa), stress_S(A, pb))
        assert np.array_equal(nonlinear_V(A, pa), nonlinear_V(A, pb))
        # ... while the Jacobian coefficients do feel the floor here.
        assert not np.allclose(
            jacobian_coefficients(A, pa)[0], jacobian_coefficients(A, pb)[0]
        )


class TestIsotropy:
    def test_rotation_equivariance(self):
        rng = np.random.default_rng(21)
        for p in (1.5, 3.0):
            params = PowerLawParams(p=p, kappa=0.2)
            for _ in range(25):
                A = sym(rng.standard_normal((2, 2)))
                theta = rng.uniform(0.0, 2.0 * np.pi)
                Q = np.array(
                    [
                        [np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)],
                    ]
                )
                for fn in (stress_S, nonlinear_V):
                    left = fn(Q @ A @ Q.T, params)
                    right = Q @ fn(A, params) @ Q.T
                    np.testing.assert_allclose(left, right, atol=1e-12)


class TestInequalityBrackets:
    @pytest.mark.parametrize("p", [1.5, 2.0, 3.0, 4.0])
    def test_monotonicity_ratio_within_frozen_bounds(self, p):
        lo, hi = MONOTONICITY_BOUNDS[p]
        params = PowerLawParams(p=p, kappa=0.0)
        rng = np.random.default_rng(int(100 * p))
        A, B = _sample_pair_batch(rng, 100_000)
        ratio = monotonicity_ratio(A, B, params)
        ratio = ratio[np.isfinite(ratio)]
        assert ratio.size > 90_000
        assert float(ratio.min()) >= lo
        assert float(ratio.max()) <= hi

    @pytest.mark.parametrize("p", [1.5, 2.0, 3.0, 4.0])
    def test_ordering_chain_within_frozen_constants(self, p):
        c1, c2 = ORDERING_CONSTANTS[p]
        params = PowerLawParams(p=p, kappa=0.0)
        rng = np.random.default_rng(int(17 * p))
        A, B = _sample_pair_batch(rng, 100_000)
        dAB = frobenius(A - B)
        dS = frobenius(stress_S(A, params) - stress_S(B, params))
        dV = nonlinear_V(A, params) - nonlinear_V(B, params)
        dV2 = np.einsum("nij,nij->n", dV, dV)
        ok = dV2 > 0.0
        slack = 1e-12 * np.maximum(dV2[ok], 1.0)
        if p >= 2.0:
            assert np.all(dAB[ok] ** p <= c1 * dV2[ok] + slack)
            assert np.all(dV2[ok] <= c2 * dS[ok] ** params.p_conj + slack)
        else:
            assert np.all(dS[ok] ** params.p_conj <= c1 * dV2[ok] + slack)
            assert np.all(dV2[ok] <= c2 * dAB[ok] ** p + slack)

    def test_young_gap_trivial_cases(self):
        params = PowerLawParams(p=3.0, kappa=0.0)
        A = np.array([[1.0, 0.5], [0.5, -0.2]])
        assert young_gap(A, A, A, params, delta=0.5) == 0.0
        # C = A reduces to monotonicity plus the V-distance terms.
        B = np.array([[0.2, 0.0], [0.0, 0.1]])
        assert young_gap(A, B, A, params, delta=0.5) >= -1e-14

    @pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
    def test_young_gap_nonnegative_on_calibrated_constant(self, p):
        params = PowerLawParams(p=p, kappa=0.0)
        rng = np.random.default_rng(int(1000 * p))
        A, B = _sample_pair_batch(rng, 100_000)
        C = _sample_matrix_batch(rng, 100_000)
        gaps = young_gap(A, B, C, params, delta=0.5)
        assert float(gaps.min()) >= -1e-12

    def test_young_constant_missing_entry_raises(self):
        params = PowerLawParams(p=2.7)
        A = np.eye(2)
        with pytest.raises(KeyError):
            young_gap(A, 2 * A, 3 * A, params, delta=0.5)


class TestHypothesisProperties:
    @settings(max_examples=200, deadline=None)
    @given(A=sym_matrices(), B=sym_matrices(), p=st.sampled_from([1.5, 2.0, 3.0]))
    def test_monotonicity_sign(self, A, B, p):
        params = PowerLawParams(p=p, kappa=0.0)
        gap = np.sum((stress_S(A, params) - stress_S(B, params)) * (A - B))
        assert gap >= -1e-9 * (1.0 + abs(gap))

    @settings(max_examples=200, deadline=None)
    @given(
        A=sym_matrices(),
        B=sym_matrices(),
        C=sym_matrices(),
        p=st.sampled_from([1.5, 2.0, 3.0]),
    )
    def test_young_gap_nonnegative(self, A, B, C, p):
        params = PowerLawParams(p=p, kappa=0.0)
        gap = float(young_gap(A, B, C, params, delta=0.5))
        scale = max(
            float(np.einsum("ij,ij", v, v))
            for v in (
                nonlinear_V(A, params) - nonlinear_V(B, params),
                nonlinear_V(C, params) - nonlinear_V(B, params),
            )
        )
        assert gap >= -1e-9 * (1.0 + scale)
