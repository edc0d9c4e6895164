"""Tests for the time stepper: projections, per-step identities, causality.

The energy identity is algebraic (test the scheme with its own solution)
so its defect is bounded by the solver tolerance; the divergence bound
is the Scott-Vogelius exactness propagated through the KKT solves.
"""

import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from pstokes.grids import TimeGrid
from pstokes.meshing import alfeld_split, unit_square_mesh
from pstokes.noise import NoiseModel, sample_increments
from pstokes.spaces import (
    Field,
    assemble,
    divergence_pointwise_max,
    norms,
    project_div,
    stress_tangent_matrix,
    velocity_at_qp,
)
from pstokes.stepper import (
    NewtonConfig,
    SchemeConfig,
    StepperWorkspace,
    _picard_fallback,
    initial_velocity,
    run_trajectory,
    velocity_step,
)
from pstokes.tensors import PowerLawParams

ABS_TOL = 1e-10
ENERGY_TOL = 10 * ABS_TOL
DIV_TOL = 1e-8


def u0_smooth(pts: np.ndarray) -> np.ndarray:
    x, y = pts[:, 0], pts[:, 1]
    ux = 2 * x**2 * (1 - x) ** 2 * y * (1 - y) * (1 - 2 * y)
    uy = -2 * x * (1 - x) * (1 - 2 * x) * y**2 * (1 - y) ** 2
    return np.stack([ux, uy], axis=-1)


def curl_modes(n_modes: int, amplitude: float = 0.1):
    fields = []
    for k in range(n_modes):
        a = k + 1

        def g(pts, a=a):
            x, y = pts[:, 0], pts[:, 1]
            s = amplitude / np.sqrt(2.0)
            return s * np.stack(
                [
                    np.sin(np.pi * a * x) * np.cos(np.pi * a * y),
                    -np.cos(np.pi * a * x) * np.sin(np.pi * a * y),
                ],
                axis=-1,
            )

        fields.append(g)
    return fields


@pytest.fixture(scope="module")
def ops4():
    return assemble(alfeld_split(unit_square_mesh(4)))


@pytest.fixture(scope="module")
def u0h(ops4):
    return initial_velocity(u0_smooth, ops4)


def make_config(p, kappa=0.0, N=16, model=None):
    return SchemeConfig(
        params=PowerLawParams(p=p, kappa=kappa),
        grid=TimeGrid(T=1.0, N=N),
        model=model,
    )


class TestInitialVelocity:
    def test_zero_data(self, ops4):
        u = initial_velocity(lambda pts: np.zeros((len(pts), 2)), ops4)
        assert np.abs(u.coeffs).max() == 0.0

    def test_idempotent_on_projected_fields(self, ops4, u0h):
        again = project_div(u0h, ops4)
        assert np.abs(again.coeffs - u0h.coeffs).max() < ABS_TOL

    def test_result_is_divergence_free(self, ops4, u0h):
        assert divergence_pointwise_max(u0h, ops4) < ABS_TOL

    def test_l2_convergence_order(self):
        # measured L2 errors 3.78e-3, 5.52e-4, 8.01e-5, 1.11e-5 on
        # m = 2,4,8,16: consecutive orders 2.78, 2.78, 2.85 (>= h^2).
        errs = []
        for m in (2, 4, 8, 16):
            ops = assemble(alfeld_split(unit_square_mesh(m)))
            uh = initial_velocity(u0_smooth, ops)
            vals = velocity_at_qp(uh.coeffs, ops)
            exact = u0_smooth(ops.qp_x.reshape(-1, 2)).reshape(vals.shape)
            errs.append(np.sqrt(np.einsum("tq,tqc->", ops.qw, (vals - exact) ** 2)))
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert orders.min() > 2.0


class TestVelocityStep:
    def test_zero_fixed_point(self, ops4):
        for p in (1.5, 2.0, 3.0):
            cfg = make_config(p, kappa=0.1)
            zero = Field("velocity", np.zeros(ops4.space_v.n_dofs))
            inc = sample_increments(np.random.default_rng(0), cfg.grid, n_modes=1)
            u1, lam, load, stats = velocity_step(1, zero, zero, inc, cfg, ops4)
            assert np.abs(u1.coeffs).max() < ABS_TOL
            assert stats.converged

    def test_linear_case_single_iteration(self, ops4, u0h):
        cfg = make_config(2.0, kappa=0.7)
        inc = sample_increments(np.random.default_rng(1), cfg.grid, n_modes=1)
        u1, _, _, stats = velocity_step(1, u0h, u0h, inc, cfg, ops4)
        assert stats.iterations == 1
        assert stats.converged
        assert stats.residual < ENERGY_TOL

    @pytest.mark.parametrize("p,kappa", [(1.5, 0.01), (2.0, 0.0), (3.0, 0.0)])
    def test_energy_identity_with_noise(self, ops4, u0h, p, kappa):
        model = NoiseModel(mode_fields=curl_modes(4), rule="linear")
        cfg = make_config(p, kappa=kappa, N=24, model=model)
        inc = sample_increments(np.random.default_rng(7), cfg.grid, n_modes=4)
        traj = run_trajectory(u0h, inc, cfg, ops4)
        assert traj.ok
        assert max(abs(s.energy_defect) for s in traj.stats) < ENERGY_TOL
        assert max(divergence_pointwise_max(f, ops4) for f in traj.fields) < DIV_TOL

    def test_noise_zero_initialized_steps(self, ops4, u0h):
        model = NoiseModel(mode_fields=curl_modes(3), rule="additive")
        cfg = make_config(2.0, N=8, model=model)
        inc = sample_increments(np.random.default_rng(3), cfg.grid, n_modes=3)
        traj = run_trajectory(u0h, inc, cfg, ops4)
        hs = [s.hs_G for s in traj.stats]
        assert hs[0] == 0.0 and hs[1] == 0.0
        assert all(h > 0.0 for h in hs[2:])

    def test_matches_direct_linear_solver(self, ops4, u0h):
        # independent implicit-Euler Stokes step assembled from scratch
        cfg = make_config(2.0)
        tau = cfg.grid.tau
        inc = sample_increments(np.random.default_rng(5), cfg.grid, n_modes=1)
        u1, lam, _, _ = velocity_step(1, u0h, u0h, inc, cfg, ops4)

        K = stress_tangent_matrix(np.zeros(ops4.space_v.n_dofs), ops4, cfg.params)
        npr = ops4.n_pressure
        c = sp.csc_matrix(
            (ops4.cvec, (np.arange(npr), np.zeros(npr, dtype=int))), shape=(npr, 1)
        )
        KKT = sp.bmat(
            [
                [ops4.M_free + tau * K, -ops4.B_free.T, None],
                [ops4.B_free, None, c],
                [None, c.T, None],
            ],
            format="csc",
        )
        rhs = np.zeros(KKT.shape[0])
        rhs[: ops4.n_free] = (ops4.M_full @ u0h.coeffs)[ops4.free]
        sol = spla.spsolve(KKT, rhs)
        assert np.abs(sol[: ops4.n_free] - u1.coeffs[ops4.free]).max() < ABS_TOL
        assert np.abs(sol[ops4.n_free : ops4.n_free + npr] - lam).max() < ABS_TOL


class TestTrajectory:
    def test_zero_everything(self, ops4):
        cfg = make_config(2.0, N=4)
        zero = Field("velocity", np.zeros(ops4.space_v.n_dofs))
        inc = sample_increments(np.random.default_rng(0), cfg.grid, n_modes=1)
        traj = run_trajectory(zero, inc, cfg, ops4)
        assert traj.ok
        for f in traj.fields:
            assert np.abs(f.coeffs).max() < ABS_TOL

    @pytest.mark.parametrize("p", [2.0, 3.0])
    def test_deterministic_decay_is_monotone(self, ops4, u0h, p):
        cfg = make_config(p, N=16)
        inc = sample_increments(np.random.default_rng(0), cfg.grid, n_modes=1)
        traj = run_trajectory(u0h, inc, cfg, ops4)
        assert traj.ok
        seq = [norms(f, "L2", ops4) for f in traj.fields]
        assert all(b <= a + 1e-14 for a, b in zip(seq, seq[1:]))

    def test_reproducibility(self, ops4, u0h):
        model = NoiseModel(mode_fields=curl_modes(2), rule="bounded_lipschitz")
        cfg = make_config(3.0, N=8, model=model)
        runs = []
        for _ in range(2):
            inc = sample_increments(np.random.default_rng(11), cfg.grid, n_modes=2)
            traj = run_trajectory(u0h, inc, cfg, ops4)
            runs.append(np.stack([f.coeffs for f in traj.fields]))
        assert np.array_equal(runs[0], runs[1])

    def test_causality_audit(self, ops4, u0h):
        model = NoiseModel(mode_fields=curl_modes(2), rule="linear")
        cfg = make_config(2.0, N=8, model=model)
        inc = sample_increments(np.random.default_rng(2), cfg.grid, n_modes=2)
        traj = run_trajectory(u0h, inc, cfg, ops4)
        assert len(traj.increment_access_log) > 0
        for step, accessed in traj.increment_access_log:
            assert accessed <= step

    def test_multiplier_count(self, ops4, u0h):
        cfg = make_config(2.0, N=6)
        inc = sample_increments(np.random.default_rng(4), cfg.grid, n_modes=1)
        traj = run_trajectory(u0h, inc, cfg, ops4)
        assert len(traj.multipliers) == 6
        assert len(traj.noise_loads) == 6
        # multipliers carry the mean-zero normalization
        for lam in traj.multipliers:
            assert abs(ops4.cvec @ lam) < 1e-12


class TestSolverMachinery:
    def test_newton_config_validation(self):
        with pytest.raises(ValueError):
            NewtonConfig(abs_tol=0.0)
        with pytest.raises(ValueError):
            NewtonConfig(max_iter=0)
        with pytest.raises(ValueError):
            NewtonConfig(armijo=1.5)

    def test_picard_fallback_reduces_residual(self, ops4, u0h):
        cfg = make_config(3.0, N=4)
        work = StepperWorkspace(cfg, ops4)
        rhs_free = (ops4.M_full @ u0h.coeffs)[ops4.free]
        cold = np.zeros(ops4.space_v.n_dofs)
        u, lam, mu, res, used = _picard_fallback(cold, rhs_free, cfg, ops4, work)
        assert used
        assert res < 1e-6
        assert np.isfinite(u).all()

    def test_workspace_linear_saddle_reused(self, ops4, u0h):
        cfg = make_config(2.0, N=4)
        work = StepperWorkspace(cfg, ops4)
        inc = sample_increments(np.random.default_rng(6), cfg.grid, n_modes=1)
        run_trajectory(u0h, inc, cfg, ops4, work)
        assert work.refactor_count == 1
