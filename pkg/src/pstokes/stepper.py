"""Time stepping: initial projection, nonlinear velocity step, trajectory.

Each step solves the constrained system

    (u_n, xi) + tau (S(eps u_n), eps xi) - (lam, div xi)
        = (u_{n-1} + G_n(u_{(n-2) v 0}) DW_n, xi)   for all xi in V_h,
    (div u_n, q) = 0                                 for all q in Q_h,

by damped Newton on the KKT system, with the pressure-mean multiplier
removing the constant nullspace.  The constraint rows are linear and the
iteration starts from the feasible u_{n-1}, so every Newton iterate is
discretely divergence free; combined with the Scott-Vogelius inclusion
div V_h in Q_h that makes the velocity pointwise divergence free up to
solver tolerance at every step.

The Jacobian factorization is lagged: it is rebuilt only when the
expansion point has drifted or the line search degrades, so for small
time steps most Newton iterations are a single back-substitution.  At
p = 2 the step is linear and one factorization serves the whole
trajectory (and every Monte Carlo sample on the same grid).

Two interchangeable direction solvers are provided.  solver="kkt"
factors the full saddle system and carries the pressure-increment
multiplier along (the form the reconstruction identities are checked
against).  solver="stream" solves the same Galerkin problem in the
explicit divergence-free basis (curl of the composite-cubic stream
functions, see streamfunc): the factorizations are an order of
magnitude cheaper, iterates stay exactly divergence free, and no
multiplier is produced (the pressure reconstruction recovers it from
the trajectory when needed).  Both backends produce the same velocity
trajectory up to solver tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np
import scipy.sparse.linalg as spla

from pstokes.grids import TimeGrid
from pstokes.noise import AveragedIncrements, NoiseModel, data_G_n
from pstokes.spaces import (
    AssembledOperators,
    Field,
    SaddleSolver,
    interpolate_velocity,
    project_div,
    stress_residual_vector,
    stress_tangent_matrix,
    sym_grad_at_qp,
    velocity_at_qp,
    velocity_load_vector,
)
from pstokes.streamfunc import stream_curl_basis
from pstokes.tensors import PowerLawParams, stress_S

__all__ = [
    "NewtonConfig",
    "SchemeConfig",
    "StepStats",
    "Trajectory",
    "StepperWorkspace",
    "initial_velocity",
    "velocity_step",
    "run_trajectory",
    "dissipation_pairing",
    "hs_norm",
]


@dataclass(frozen=True)
class NewtonConfig:
    abs_tol: float = 1e-10
    max_iter: int = 50
    armijo: float = 0.5
    min_step: float = 2.0**-20
    lag_threshold: float = 0.2
    picard_iters: int = 20
    contraction: float = 0.5

    def __post_init__(self) -> None:
        if self.abs_tol <= 0 or self.min_step <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0 < self.armijo < 1:
            raise ValueError("armijo factor must lie in (0, 1)")
        if not 0 < self.contraction < 1:
            raise ValueError("contraction threshold must lie in (0, 1)")


@dataclass
class SchemeConfig:
    """Everything one scheme instance needs besides the mesh.

    solver picks the Newton direction backend: "kkt" (full saddle
    factorization, carries multipliers) or "stream" (divergence-free
    reduced basis, faster, multipliers recovered by reconstruction)."""

    params: PowerLawParams
    grid: TimeGrid
    model: NoiseModel | None = None
    newton: NewtonConfig = dc_field(default_factory=NewtonConfig)
    solver: str = "kkt"

    def __post_init__(self) -> None:
        if self.solver not in ("kkt", "stream"):
            raise ValueError(f"unknown solver {self.solver!r}")


@dataclass
class StepStats:
    iterations: int
    residual: float
    refactorizations: int
    converged: bool
    used_picard: bool = False
    energy_defect: float = 0.0
    dissipation: float = 0.0
    hs_G: float = 0.0


@dataclass
class Trajectory:
    """Velocity fields u_0..u_N plus everything reconstruction needs.

    multipliers[n-1] is the KKT multiplier of step n (it equals the
    pressure increment d_n pi of the reconstruction); entries are None
    when the step was solved in the divergence-free basis, which
    produces no multiplier.  noise_loads[n-1] is the assembled
    right-hand side (G_n DW_n, xi) on free dofs.
    increment_access_log records every averaged-increment index read
    during the step that is listed with it, for the causality audit.
    """

    fields: list[Field]
    multipliers: list[np.ndarray | None]
    noise_loads: list[np.ndarray]
    stats: list[StepStats]
    increment_access_log: list[tuple[int, int]]
    failed_at: int | None = None

    @property
    def ok(self) -> bool:
        return self.failed_at is None

    @property
    def n_steps(self) -> int:
        return len(self.fields) - 1


class _AuditedIncrements:
    """Pass-through wrapper that records which increments were read."""

    def __init__(self, inner: AveragedIncrements):
        self._inner = inner
        self.accessed: list[int] = []

    @property
    def grid(self) -> TimeGrid:
        return self._inner.grid

    def increment(self, n: int) -> np.ndarray:
        self.accessed.append(n)
        return self._inner.increment(n)


def initial_velocity(
    u0_exact: Callable[[np.ndarray], np.ndarray], ops: AssembledOperators
) -> Field:
    """Nodal interpolation followed by the divergence-free projection."""
    return project_div(interpolate_velocity(u0_exact, ops), ops)


def dissipation_pairing(
    u_coeffs: np.ndarray, ops: AssembledOperators, params: PowerLawParams
) -> float:
    """(S(eps u), eps u) with the same quadrature the residual uses."""
    eps = sym_grad_at_qp(u_coeffs, ops)
    S = stress_S(eps, params)
    return float(np.einsum("tq,tqcd,tqcd->", ops.qw, S, eps))


def hs_norm(g_vals: np.ndarray, ops: AssembledOperators) -> float:
    """Hilbert-Schmidt norm sqrt(sum_k ||g_k||_L2^2) of per-mode fields
    given at quadrature points, shape (n_modes, n_tri, nq, 2)."""
    return float(np.sqrt(np.einsum("tq,ktqc->", ops.qw, g_vals**2)))


class StepperWorkspace:
    """Per-(mesh, config) scratch shared across steps and samples.

    Holds the noise mode values at quadrature points and the lagged
    Jacobian factorization.  Never mutated by concurrent trajectories in
    ways that affect results: the cached factorizations are pure solver
    accelerators keyed on the expansion point.
    """

    def __init__(self, config: SchemeConfig, ops: AssembledOperators):
        self.config = config
        self.ops = ops
        if config.model is not None:
            qp = ops.qp_x.reshape(-1, 2)
            n_tri, nq = ops.qw.shape
            self.g_qp = config.model.mode_values(qp).reshape(-1, n_tri, nq, 2)
        else:
            self.g_qp = None
        self._saddle: SaddleSolver | None = None
        self._factor_point: np.ndarray | None = None
        self._lin_saddle: SaddleSolver | None = None
        self._stream_HM = None
        self._stream_factor = None
        self._stream_point: np.ndarray | None = None
        self._lin_stream = None
        self.refactor_count = 0

    @property
    def is_linear(self) -> bool:
        return self.config.params.p == 2.0

    def stream_gram(self):
        """(C, C^T M C) for the divergence-free basis, built lazily."""
        C = stream_curl_basis(self.ops)
        if self._stream_HM is None:
            self._stream_HM = (C.T @ (self.ops.M_free @ C)).tocsc()
        return C, self._stream_HM

    def _stream_factorize(self, u_full: np.ndarray):
        C, HM = self.stream_gram()
        K = stress_tangent_matrix(u_full, self.ops, self.config.params)
        H = HM + self.config.grid.tau * (C.T @ (K @ C))
        self.refactor_count += 1
        return spla.splu(H.tocsc())

    def linear_stream(self):
        if self._lin_stream is None:
            self._lin_stream = self._stream_factorize(
                np.zeros(self.ops.space_v.n_dofs)
            )
        return self._lin_stream

    def stream_at(self, u_full: np.ndarray, force: bool = False):
        """Reduced-Hessian factorization with the same lag policy as
        saddle_at."""
        if not force and self._stream_factor is not None:
            drift = np.abs(u_full - self._stream_point).max()
            scale = max(np.abs(self._stream_point).max(), 1e-12)
            if drift <= self.config.newton.lag_threshold * scale:
                return self._stream_factor
        self._stream_factor = self._stream_factorize(u_full)
        self._stream_point = u_full.copy()
        return self._stream_factor

    def linear_saddle(self) -> SaddleSolver:
        if self._lin_saddle is None:
            K = stress_tangent_matrix(
                np.zeros(self.ops.space_v.n_dofs), self.ops, self.config.params
            )
            tau = self.config.grid.tau
            self._lin_saddle = SaddleSolver(self.ops.M_free + tau * K, self.ops)
            self.refactor_count += 1
        return self._lin_saddle

    def saddle_at(self, u_full: np.ndarray, force: bool = False) -> SaddleSolver:
        """Jacobian KKT factorization, reused while the expansion point
        is within lag_threshold (relative sup-norm) of u_full."""
        if not force and self._saddle is not None:
            drift = np.abs(u_full - self._factor_point).max()
            scale = max(np.abs(self._factor_point).max(), 1e-12)
            if drift <= self.config.newton.lag_threshold * scale:
                return self._saddle
        K = stress_tangent_matrix(u_full, self.ops, self.config.params)
        tau = self.config.grid.tau
        self._saddle = SaddleSolver(self.ops.M_free + tau * K, self.ops)
        self._factor_point = u_full.copy()
        self.refactor_count += 1
        return self._saddle

    def noise_rhs(
        self, n: int, u_lag_coeffs: np.ndarray, dW: np.ndarray
    ) -> tuple[np.ndarray, float]:
        """Assembled load (G_n(u_lag) DW_n, xi) on free dofs and ||G_n||_HS."""
        ops = self.ops
        if self.g_qp is None:
            return np.zeros(ops.n_free), 0.0
        u_vals = velocity_at_qp(u_lag_coeffs, ops)
        G_vals = data_G_n(n, u_vals, self.config.model, self.config.grid, self.g_qp)
        if not np.any(G_vals):
            return np.zeros(ops.n_free), 0.0
        forcing = np.tensordot(dW, G_vals, axes=1)
        load = velocity_load_vector(forcing, ops)[ops.free]
        return load, hs_norm(G_vals, ops)


def _kkt_residual(
    u_full: np.ndarray,
    lam: np.ndarray,
    mu: float,
    rhs_free: np.ndarray,
    tau: float,
    ops: AssembledOperators,
    params: PowerLawParams,
) -> tuple[np.ndarray, np.ndarray, float]:
    Fu = (
        (ops.M_full @ u_full)[ops.free]
        + tau * stress_residual_vector(u_full, ops, params)
        - ops.B_free.T @ lam
        - rhs_free
    )
    Fp = ops.B_free @ u_full[ops.free] + ops.cvec * mu
    Fc = float(ops.cvec @ lam)
    return Fu, Fp, Fc


def _residual_norm(Fu: np.ndarray, Fp: np.ndarray, Fc: float) -> float:
    return float(np.sqrt(Fu @ Fu + Fp @ Fp + Fc * Fc))


def _stream_residual(
    u_full: np.ndarray,
    rhs_free: np.ndarray,
    tau: float,
    ops: AssembledOperators,
    params: PowerLawParams,
    C,
) -> np.ndarray:
    """Momentum residual tested against the divergence-free basis.

    Equals C^T of the KKT momentum residual for any multiplier, since
    C^T B^T = (B C)^T = 0; the constraint rows stay satisfied because
    every update lies in the span of C."""
    Fu = (
        (ops.M_full @ u_full)[ops.free]
        + tau * stress_residual_vector(u_full, ops, params)
        - rhs_free
    )
    return C.T @ Fu


def velocity_step(
    n: int,
    u_prev: Field,
    u_lag: Field,
    increments,
    config: SchemeConfig,
    ops: AssembledOperators,
    work: StepperWorkspace | None = None,
) -> tuple[Field, np.ndarray, np.ndarray, StepStats]:
    """One implicit step; returns (u_n, multiplier, noise_load, stats).

    u_lag must be u_{(n-2) v 0}; the only increment read is DW_n.  The
    noise load is the assembled (G_n DW_n, xi) on free dofs, returned so
    the pressure reconstruction can verify its equation against data
    that was not derived from the solved step itself.
    """
    if work is None:
        work = StepperWorkspace(config, ops)
    tau = config.grid.tau
    params = config.params
    dW = increments.increment(n)
    noise_free, hs_G = work.noise_rhs(n, u_lag.coeffs, dW)
    rhs_free = (ops.M_full @ u_prev.coeffs)[ops.free] + noise_free

    if config.solver == "stream":
        return _velocity_step_stream(
            u_prev, rhs_free, noise_free, hs_G, config, ops, work
        )

    if work.is_linear:
        u_f, lam, _mu = work.linear_saddle().solve(rhs_free)
        u_full = np.zeros(ops.space_v.n_dofs)
        u_full[ops.free] = u_f
        res = _residual_norm(*_kkt_residual(u_full, lam, 0.0, rhs_free, tau, ops, params))
        stats = StepStats(1, res, 0, res <= 10 * config.newton.abs_tol, hs_G=hs_G)
        return _finish_step(u_full, lam, u_prev, noise_free, tau, ops, params, stats)

    nt = config.newton
    u_full = u_prev.coeffs.copy()
    lam = np.zeros(ops.n_pressure)
    mu = 0.0
    refactors_before = work.refactor_count
    converged = False
    used_picard = False
    res = np.inf
    iterations = 0

    Fu, Fp, Fc = _kkt_residual(u_full, lam, mu, rhs_free, tau, ops, params)
    force_fresh = False
    for it in range(1, nt.max_iter + 1):
        iterations = it
        res = _residual_norm(Fu, Fp, Fc)
        if res <= nt.abs_tol:
            converged = True
            break
        before = work.refactor_count
        saddle = work.saddle_at(u_full, force=force_fresh)
        was_fresh = work.refactor_count > before
        force_fresh = False
        du_f, dlam, dmu = saddle.solve(-Fu, -Fp, -Fc)
        du = np.zeros_like(u_full)
        du[ops.free] = du_f

        step = 1.0
        accepted = False
        retried_fresh = False
        while True:
            trial_u = u_full + step * du
            trial_lam = lam + step * dlam
            trial_mu = mu + step * dmu
            tFu, tFp, tFc = _kkt_residual(trial_u, trial_lam, trial_mu, rhs_free, tau, ops, params)
            tres = _residual_norm(tFu, tFp, tFc)
            if tres <= (1.0 - 1e-4 * step) * res:
                u_full, lam, mu = trial_u, trial_lam, trial_mu
                Fu, Fp, Fc = tFu, tFp, tFc  # carried into the next iteration
                accepted = True
                break
            step *= nt.armijo
            if step < nt.min_step:
                if not retried_fresh and not was_fresh:
                    # stale Jacobian is the usual culprit: refactor at the
                    # current point and retry the search once
                    saddle = work.saddle_at(u_full, force=True)
                    was_fresh = True
                    du_f, dlam, dmu = saddle.solve(-Fu, -Fp, -Fc)
                    du = np.zeros_like(u_full)
                    du[ops.free] = du_f
                    step = 1.0
                    retried_fresh = True
                    continue
                break
        if not accepted:
            break
        # a stale direction may pass the line search while barely
        # contracting; when that happens refresh the factorization
        # before the next correction
        if not was_fresh and tres > nt.contraction * res:
            force_fresh = True

    if not converged:
        u_full, lam, mu, res, used_picard = _picard_fallback(
            u_prev.coeffs, rhs_free, config, ops, work
        )
        converged = res <= nt.abs_tol

    stats = StepStats(
        iterations=iterations,
        residual=res,
        refactorizations=work.refactor_count - refactors_before,
        converged=converged,
        used_picard=used_picard,
        hs_G=hs_G,
    )
    return _finish_step(u_full, lam, u_prev, noise_free, tau, ops, params, stats)


def _picard_fallback(
    u_start: np.ndarray,
    rhs_free: np.ndarray,
    config: SchemeConfig,
    ops: AssembledOperators,
    work: StepperWorkspace,
) -> tuple[np.ndarray, np.ndarray, float, float, bool]:
    """Fixed-point iteration with the radial-weight (Kacanov) matrix.
    Returns the best iterate found (by KKT residual)."""
    tau = config.grid.tau
    params = config.params
    u_full = u_start.copy()
    lam = np.zeros(ops.n_pressure)
    mu = 0.0
    best = (u_full, lam, mu, np.inf)
    for _ in range(config.newton.picard_iters):
        K = stress_tangent_matrix(u_full, ops, params, picard=True)
        saddle = SaddleSolver(ops.M_free + tau * K, ops)
        work.refactor_count += 1
        u_f, lam, mu = saddle.solve(rhs_free)
        u_full = np.zeros(ops.space_v.n_dofs)
        u_full[ops.free] = u_f
        res = _residual_norm(*_kkt_residual(u_full, lam, mu, rhs_free, tau, ops, params))
        if res < best[3]:
            best = (u_full.copy(), lam.copy(), mu, res)
        if res <= config.newton.abs_tol:
            break
    u_full, lam, mu, res = best
    return u_full, lam, mu, res, True


def _velocity_step_stream(
    u_prev: Field,
    rhs_free: np.ndarray,
    noise_free: np.ndarray,
    hs_G: float,
    config: SchemeConfig,
    ops: AssembledOperators,
    work: StepperWorkspace,
) -> tuple[Field, None, np.ndarray, StepStats]:
    """The same damped lagged Newton as the KKT path, formulated in the
    divergence-free basis; returns no multiplier."""
    tau = config.grid.tau
    params = config.params
    nt = config.newton
    C, _ = work.stream_gram()

    if work.is_linear:
        u_full = np.zeros(ops.space_v.n_dofs)
        u_full[ops.free] = C @ work.linear_stream().solve(C.T @ rhs_free)
        res = float(
            np.linalg.norm(_stream_residual(u_full, rhs_free, tau, ops, params, C))
        )
        stats = StepStats(1, res, 0, res <= 10 * nt.abs_tol, hs_G=hs_G)
        return _finish_step(u_full, None, u_prev, noise_free, tau, ops, params, stats)

    u_full = u_prev.coeffs.copy()
    refactors_before = work.refactor_count
    converged = False
    used_picard = False
    res = np.inf
    iterations = 0

    Fr = _stream_residual(u_full, rhs_free, tau, ops, params, C)
    force_fresh = False
    for it in range(1, nt.max_iter + 1):
        iterations = it
        res = float(np.linalg.norm(Fr))
        if res <= nt.abs_tol:
            converged = True
            break
        before = work.refactor_count
        factor = work.stream_at(u_full, force=force_fresh)
        was_fresh = work.refactor_count > before
        force_fresh = False
        du = np.zeros_like(u_full)
        du[ops.free] = C @ factor.solve(-Fr)

        step = 1.0
        accepted = False
        retried_fresh = False
        while True:
            trial_u = u_full + step * du
            tFr = _stream_residual(trial_u, rhs_free, tau, ops, params, C)
            tres = float(np.linalg.norm(tFr))
            if tres <= (1.0 - 1e-4 * step) * res:
                u_full = trial_u
                Fr = tFr
                accepted = True
                break
            step *= nt.armijo
            if step < nt.min_step:
                if not retried_fresh and not was_fresh:
                    factor = work.stream_at(u_full, force=True)
                    was_fresh = True
                    du = np.zeros_like(u_full)
                    du[ops.free] = C @ factor.solve(-Fr)
                    step = 1.0
                    retried_fresh = True
                    continue
                break
        if not accepted:
            break
        if not was_fresh and tres > nt.contraction * res:
            force_fresh = True

    if not converged:
        u_full, res, used_picard = _picard_fallback_stream(
            u_prev.coeffs, rhs_free, config, ops, work
        )
        converged = res <= nt.abs_tol

    stats = StepStats(
        iterations=iterations,
        residual=res,
        refactorizations=work.refactor_count - refactors_before,
        converged=converged,
        used_picard=used_picard,
        hs_G=hs_G,
    )
    return _finish_step(u_full, None, u_prev, noise_free, tau, ops, params, stats)


def _picard_fallback_stream(
    u_start: np.ndarray,
    rhs_free: np.ndarray,
    config: SchemeConfig,
    ops: AssembledOperators,
    work: StepperWorkspace,
) -> tuple[np.ndarray, float, bool]:
    """Kacanov fixed-point iteration in the divergence-free basis."""
    tau = config.grid.tau
    params = config.params
    C, HM = work.stream_gram()
    u_full = u_start.copy()
    best = (u_full, np.inf)
    for _ in range(config.newton.picard_iters):
        K = stress_tangent_matrix(u_full, ops, params, picard=True)
        H = HM + tau * (C.T @ (K @ C))
        work.refactor_count += 1
        x = spla.splu(H.tocsc()).solve(C.T @ rhs_free)
        u_full = np.zeros(ops.space_v.n_dofs)
        u_full[ops.free] = C @ x
        res = float(
            np.linalg.norm(_stream_residual(u_full, rhs_free, tau, ops, params, C))
        )
        if res < best[1]:
            best = (u_full.copy(), res)
        if res <= config.newton.abs_tol:
            break
    return best[0], best[1], True


def _finish_step(
    u_full: np.ndarray,
    lam: np.ndarray,
    u_prev: Field,
    noise_free: np.ndarray,
    tau: float,
    ops: AssembledOperators,
    params: PowerLawParams,
    stats: StepStats,
) -> tuple[Field, np.ndarray, np.ndarray, StepStats]:
    u_n = Field("velocity", u_full)
    diss = dissipation_pairing(u_full, ops, params)
    d = u_full - u_prev.coeffs
    M = ops.M_full
    defect = (
        u_full @ (M @ u_full)
        - u_prev.coeffs @ (M @ u_prev.coeffs)
        + d @ (M @ d)
        + 2.0 * tau * diss
        - 2.0 * float(noise_free @ u_full[ops.free])
    )
    stats.dissipation = diss
    stats.energy_defect = float(defect)
    return u_n, lam, noise_free, stats


def run_trajectory(
    u0: Field,
    increments: AveragedIncrements,
    config: SchemeConfig,
    ops: AssembledOperators,
    work: StepperWorkspace | None = None,
) -> Trajectory:
    """Sequential steps n = 1..N from u0; aborts cleanly on failure.

    The increments object is wrapped so that every read is logged; the
    log is checked after each step to enforce that step n touched no
    increment beyond index n (adaptedness of the discrete flow).
    """
    if work is None:
        work = StepperWorkspace(config, ops)
    audited = _AuditedIncrements(increments)
    N = config.grid.N
    fields = [u0]
    multipliers: list[np.ndarray] = []
    noise_loads: list[np.ndarray] = []
    stats_list: list[StepStats] = []
    access_log: list[tuple[int, int]] = []
    failed_at = None
    for n in range(1, N + 1):
        u_lag = fields[max(n - 2, 0)]
        mark = len(audited.accessed)
        u_n, lam, noise_free, stats = velocity_step(
            n, fields[-1], u_lag, audited, config, ops, work
        )
        new_reads = audited.accessed[mark:]
        for idx in new_reads:
            access_log.append((n, idx))
            if idx > n:
                raise AssertionError(
                    f"step {n} read increment {idx}: causality violated"
                )
        fields.append(u_n)
        multipliers.append(lam)
        noise_loads.append(noise_free)
        stats_list.append(stats)
        if not stats.converged:
            failed_at = n
            break
    return Trajectory(
        fields=fields,
        multipliers=multipliers,
        noise_loads=noise_loads,
        stats=stats_list,
        increment_access_log=access_log,
        failed_at=failed_at,
    )
