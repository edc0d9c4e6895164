"""Statistics of trajectory ensembles: stability, errors, domination.

Three groups of tools, all plain Monte Carlo over completed trajectories
(expectations are sample means; reported standard errors quantify the MC
noise):

* Stability statistics (`stability_stats`, `besov_halves`): energy
  maxima, dissipation sums, and discrete Nikolskii seminorms

      max_k (1/k) sum_{n=k}^N ||u_n - u_{n-k}||^2,

  the lag-maximum taken exactly over all k (O(N^2) pairwise norms via
  one Gram matrix per trajectory).  The seminorm comes in two scales --
  max-of-mean (expectation inside the lag maximum) and mean-of-max
  (maximum inside the expectation); the second dominates the first.
  Pressure ensembles add the dual-norm counterparts: the summed p'-power
  of deterministic pressure increments (upper bracket sqrt(2)||.||_p'),
  the maximal stochastic pressure, and its r-weighted Nikolskii scale.

* Error functionals (`error_stats`, `temporal_oscillation`): coupled
  comparison of a coarse trajectory against a reference computed on a
  nested finer grid pair from the same Wiener path.  The reference is
  read as piecewise constant on its midpoint intervals; the coarse-step
  average <u>_n is the exact average of that piecewise-constant field
  over the coarse interval J_n, and the time integrals weighted by the
  hat a_n are evaluated with exact per-cell integrals of a_n.  Spatial
  comparison evaluates both fields at the fine mesh's quadrature points
  (coarse fields through the structured point locator), so all error
  functionals vanish identically on self-comparison.  Component proxies
  C_init, C_Linf, C_best, C_G, C_V isolate initial-datum, projection,
  best-approximation, data-approximation and temporal-oscillation
  contributions; C_best is an upper proxy (divergence-projected nodal
  interpolant of the reference in place of the true infimum).

* Domination / extrapolation verifier (`extrapolation_check`): builds
  the nonnegative adapted processes

      X_M = sum_{n<=M} int_{J_n} ||Ebar(t)/sqrt(tau)||_{L^2}^r dt,
      Y_M = max_{n <= (M+2) ^ N} ||G_n(u_{(n-2) v 0})||_HS^r,

  with Ebar the noise compensator, evaluates E[X_n]/E[Y_n] over a
  documented finite family of stopping rules (deterministic times,
  Y-threshold hitting times and their shifted variants -- an honest
  partial check of a statement quantified over all stopping times), and
  tests the fractional-moment extrapolation inequality

      E[(X_N)^k] < (1 + C - k)/(1 - k) * E[(Y_N)^k],  k in (0,1),

  reporting both margins as (RHS - LHS)/RHS with delta-method standard
  errors.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field as dc_field

import numpy as np

from pstokes.grids import TimeGrid, weight_a, weight_antiderivative
from pstokes.noise import (
    NoiseModel,
    WienerPath,
    data_G_n,
    modulation_average,
    sample_increments,
    sample_wiener_path,
)
from pstokes.pressure import DIV_GRAD_CONSTANT, PressureTrajectory
from pstokes.spaces import (
    AssembledOperators,
    Field,
    StructuredLocator,
    pressure_lp_norm,
    sym_grad_at_qp,
    velocity_at_qp,
    velocity_load_vector,
)
from pstokes.stepper import SchemeConfig, StepperWorkspace, Trajectory, hs_norm, run_trajectory
from pstokes.tensors import PowerLawParams, nonlinear_V

__all__ = [
    "StabilityStats",
    "ErrorStats",
    "ExtrapolationReport",
    "besov_halves",
    "stability_stats",
    "error_stats",
    "temporal_oscillation",
    "extrapolation_check",
]


# ---------------------------------------------------------------------------
# Nikolskii seminorm machinery


def _mass_gram(U: np.ndarray, M) -> np.ndarray:
    """Gram matrix U M U^T of stacked coefficient rows."""
    return U @ (M @ U.T)


def _squared_increment_table(G: np.ndarray) -> np.ndarray:
    """d2[n, m] = ||u_n - u_m||^2 from the Gram matrix of the snapshots."""
    d = np.diag(G)
    return np.maximum(d[:, None] + d[None, :] - 2.0 * G, 0.0)


def _lag_sums(d2: np.ndarray) -> np.ndarray:
    """s[k-1] = (1/k) sum_{n=k}^N d2[n, n-k] for k = 1..N."""
    N = d2.shape[0] - 1
    return np.array([np.trace(d2, offset=-k) / k for k in range(1, N + 1)])


def _coeff_rows(seq: Sequence[Field]) -> tuple[np.ndarray, str]:
    kinds = {f.kind for f in seq}
    if len(kinds) != 1:
        raise ValueError(f"mixed field kinds in sequence: {sorted(kinds)}")
    return np.stack([f.coeffs for f in seq]), kinds.pop()


def besov_halves(ensemble, mode: str, ops: AssembledOperators) -> float:
    """Discrete Nikolskii half-order seminorm of a field-sequence ensemble.

    mode "max-of-mean" averages the squared lag increments over samples
    first and then maximizes over the lag; "mean-of-max" maximizes per
    sample and averages the maxima.  The second always dominates the
    first.  A bare sequence of Fields is treated as a one-sample
    ensemble, for which both modes coincide.
    """
    if mode not in ("max-of-mean", "mean-of-max"):
        raise ValueError(f"unknown mode {mode!r}")
    if len(ensemble) == 0:
        raise ValueError("empty ensemble")
    if isinstance(ensemble[0], Field):
        ensemble = [ensemble]
    lengths = {len(seq) for seq in ensemble}
    if len(lengths) != 1:
        raise ValueError("sequences of different lengths in ensemble")
    if lengths.pop() < 1:
        raise ValueError("empty field sequence")

    gram_sum = None
    maxima = []
    for seq in ensemble:
        U, kind = _coeff_rows(seq)
        M = ops.M_full if kind == "velocity" else ops.Mq
        G = _mass_gram(U, M)
        if mode == "max-of-mean":
            gram_sum = G if gram_sum is None else gram_sum + G
        else:
            s = _lag_sums(_squared_increment_table(G))
            maxima.append(float(s.max()) if s.size else 0.0)
    if mode == "mean-of-max":
        return float(np.mean(maxima))
    s = _lag_sums(_squared_increment_table(gram_sum / len(ensemble)))
    return float(s.max()) if s.size else 0.0


# ---------------------------------------------------------------------------
# Stability statistics


@dataclass(frozen=True)
class StabilityStats:
    """Ensemble statistics behind the uniform stability bounds.

    e_max          mean of max_n ||u_n||_L2^2 over steps 1..N
    dissipation    mean of sum_n tau ||eps u_n||_p^p
    besov_u        max-of-mean velocity Nikolskii seminorm
    besov_u_strong mean-of-max velocity Nikolskii seminorm (>= besov_u)
    det_increment  mean of sum_n tau ||d_n pi_det / tau||^p' (upper
                   bracket sqrt(2)||.||_{L^p'} of the dual norm)
    sto_max        mean of max_n ||pi_sto_n||^2 in the stochastic dual norm
    sto_besov_{r}  r-weighted Nikolskii scale of pi_sto for r in {2,4,8}:
                   (max_k sum_{n=k}^N tau (E[||pi_n - pi_{n-k}||^2]/(tau k))^{r/2})^{2/r}
    stderr         MC standard errors of the per-sample-reducible stats
    """

    n_samples: int
    e_max: float
    dissipation: float
    besov_u: float
    besov_u_strong: float
    det_increment: float | None
    sto_max: float | None
    sto_besov_2: float | None
    sto_besov_4: float | None
    sto_besov_8: float | None
    stderr: dict[str, float] = dc_field(default_factory=dict)


def _check_ensemble(trajs: Sequence[Trajectory], ops: AssembledOperators) -> int:
    if len(trajs) == 0:
        raise ValueError("need at least one trajectory")
    steps = {t.n_steps for t in trajs}
    if len(steps) != 1:
        raise ValueError(f"mixed grids in ensemble: step counts {sorted(steps)}")
    for i, t in enumerate(trajs):
        if not t.ok:
            raise ValueError(f"trajectory {i} failed at step {t.failed_at}")
        if t.fields[0].coeffs.size != ops.space_v.n_dofs:
            raise ValueError("trajectory dof count does not match the operators")
    return steps.pop()


def _mean_and_se(vals: list[float]) -> tuple[float, float]:
    a = np.asarray(vals)
    se = float(a.std(ddof=1) / np.sqrt(len(a))) if len(a) > 1 else 0.0
    return float(a.mean()), se


def _sto_besov(Ed2: np.ndarray, tau: float, r: float) -> float:
    """(max_k sum_{n=k}^N tau (Ed2[n,n-k]/(tau k))^{r/2})^{2/r}."""
    N = Ed2.shape[0] - 1
    best = 0.0
    for k in range(1, N + 1):
        lag = np.diagonal(Ed2, offset=-k)
        best = max(best, float(np.sum(tau * (lag / (tau * k)) ** (r / 2.0))))
    return best ** (2.0 / r)


def stability_stats(
    trajs: Sequence[Trajectory],
    pressures: Sequence[PressureTrajectory] | None,
    config: SchemeConfig,
    ops: AssembledOperators,
) -> StabilityStats:
    """All stability statistics of an ensemble on one grid.

    `pressures` carries the reconstructed pressure trajectories matching
    `trajs` sample by sample; pass None to compute velocity statistics
    only (the pressure entries are then None).
    """
    N = _check_ensemble(trajs, ops)
    if N != config.grid.N:
        raise ValueError(f"trajectories have {N} steps but the grid expects {config.grid.N}")
    if pressures is not None and len(pressures) != len(trajs):
        raise ValueError("pressure ensemble size differs from trajectory ensemble")
    tau = config.grid.tau
    p = config.params.p
    p_conj = p / (p - 1.0)

    e_max_s: list[float] = []
    diss_s: list[float] = []
    strong_s: list[float] = []
    det_s: list[float] = []
    sto_max_s: list[float] = []
    gram_sum = np.zeros((N + 1, N + 1))
    gram_z_sum = np.zeros((N + 1, N + 1))

    for i, traj in enumerate(trajs):
        U, _ = _coeff_rows(traj.fields)
        G = _mass_gram(U, ops.M_full)
        gram_sum += G
        d2 = _squared_increment_table(G)
        s = _lag_sums(d2)
        strong_s.append(float(s.max()) if s.size else 0.0)
        e_max_s.append(float(np.diag(G)[1:].max()))
        diss_s.append(
            sum(
                tau * _sym_grad_p_power(f.coeffs, ops, p)
                for f in traj.fields[1:]
            )
        )
        if pressures is not None:
            ptraj = pressures[i]
            if ptraj.n_steps != N:
                raise ValueError(f"pressure trajectory {i} has {ptraj.n_steps} steps, expected {N}")
            Z = np.vstack([np.zeros(ops.space_v.n_dofs), ptraj.z_sto])
            Gz = _mass_gram(Z, ops.M_full)
            gram_z_sum += Gz
            sto_max_s.append(float(np.diag(Gz)[1:].max()))
            acc = 0.0
            prev = np.zeros(ops.n_pressure)
            for q in ptraj.pi_det:
                inc = Field("pressure", (q.coeffs - prev) / tau)
                prev = q.coeffs
                acc += tau * (DIV_GRAD_CONSTANT * pressure_lp_norm(inc, ops, p_conj)) ** p_conj
            det_s.append(acc)

    ns = len(trajs)
    Ed2 = _squared_increment_table(gram_sum / ns)
    sums = _lag_sums(Ed2)
    besov_u = float(sums.max()) if sums.size else 0.0

    e_max, e_se = _mean_and_se(e_max_s)
    diss, diss_se = _mean_and_se(diss_s)
    strong, strong_se = _mean_and_se(strong_s)
    stderr = {
        "e_max": e_se,
        "dissipation": diss_se,
        "besov_u_strong": strong_se,
    }

    det = sto_max = sb2 = sb4 = sb8 = None
    if pressures is not None:
        det, det_se = _mean_and_se(det_s)
        sto_max, sto_se = _mean_and_se(sto_max_s)
        stderr["det_increment"] = det_se
        stderr["sto_max"] = sto_se
        Edz = _squared_increment_table(gram_z_sum / ns)
        sb2 = _sto_besov(Edz, tau, 2.0)
        sb4 = _sto_besov(Edz, tau, 4.0)
        sb8 = _sto_besov(Edz, tau, 8.0)

    return StabilityStats(
        n_samples=ns,
        e_max=e_max,
        dissipation=diss,
        besov_u=besov_u,
        besov_u_strong=strong,
        det_increment=det,
        sto_max=sto_max,
        sto_besov_2=sb2,
        sto_besov_4=sb4,
        sto_besov_8=sb8,
        stderr=stderr,
    )


def _sym_grad_p_power(u_coeffs: np.ndarray, ops: AssembledOperators, p: float) -> float:
    """int |eps u|^p by quadrature (the p-th power, not the norm)."""
    eps = sym_grad_at_qp(u_coeffs, ops)
    mag = np.sqrt(np.einsum("tqcd,tqcd->tq", eps, eps))
    return float(np.einsum("tq,tq->", ops.qw, mag**p))


# ---------------------------------------------------------------------------
# Nested-grid plumbing: fine midpoint cells and hat-weight integrals


def _mesh_order(ops: AssembledOperators) -> int:
    nt = ops.space_v.mesh.n_triangles
    m = int(round(np.sqrt(nt / 6.0)))
    if 6 * m * m != nt:
        raise ValueError("operators are not built on a split structured square mesh")
    return m


def _locator(ops: AssembledOperators) -> StructuredLocator:
    if "locator" not in ops._cache:
        ops._cache["locator"] = StructuredLocator(ops, _mesh_order(ops))
    return ops._cache["locator"]


def _check_nested(
    grid_c: TimeGrid, grid_f: TimeGrid, ops_c: AssembledOperators, ops_f: AssembledOperators
) -> int:
    if abs(grid_c.T - grid_f.T) > 1e-12 * grid_f.T:
        raise ValueError("coarse and reference grids have different horizons")
    ratio = (grid_f.N + 1) / (grid_c.N + 1)
    if abs(ratio - round(ratio)) > 1e-9:
        raise ValueError(
            f"reference step count {grid_f.N}+1 is not a multiple of coarse {grid_c.N}+1"
        )
    mc, mf = _mesh_order(ops_c), _mesh_order(ops_f)
    if mf % mc != 0:
        raise ValueError(f"reference mesh order {mf} does not refine coarse order {mc}")
    return int(round(ratio))


def _fine_cells(lo: float, hi: float, grid_f: TimeGrid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fine midpoint cells J_j meeting [lo, hi]: indices and clipped bounds."""
    tf = grid_f.tau
    j0 = max(int(np.floor(lo / tf - 0.5)), 0)
    j1 = min(int(np.ceil(hi / tf + 0.5)), grid_f.N)
    js = np.arange(j0, j1 + 1)
    cell_lo = np.maximum((js - 0.5) * tf, 0.0)
    cell_hi = (js + 0.5) * tf
    a = np.maximum(cell_lo, lo)
    b = np.minimum(cell_hi, hi)
    keep = b - a > 1e-12 * tf
    return js[keep], a[keep], b[keep]


def _tiling_average_weights(n: int, grid_c: TimeGrid, grid_f: TimeGrid):
    """Fine cells tiling the coarse interval J_n with overlap fractions.

    The weights are |J_j^fine ∩ J_n|/|J_n|; they sum to one, and reduce
    to a plain average when the fine cells tile J_n exactly (odd step
    ratio)."""
    lo, hi = grid_c.interval(n)
    js, a, b = _fine_cells(lo, hi, grid_f)
    return js, (b - a) / (hi - lo)


def _hat_cell_integrals(n: int, grid_c: TimeGrid, grid_f: TimeGrid, restrict: bool):
    """Exact integrals of the hat a_n over fine cells.

    With restrict=True the integration window is the coarse interval J_n
    (the region where the piecewise-constant reference and the coarse
    step share the same time slot); otherwise the full support of a_n.
    """
    if restrict:
        lo, hi = grid_c.interval(n)
    else:
        lo = max(grid_c.node(n - 1) - 0.5 * grid_c.tau, 0.0)
        hi = grid_c.node(n) + 0.5 * grid_c.tau
    js, a, b = _fine_cells(lo, hi, grid_f)
    w = weight_antiderivative(n, b, grid_c) - weight_antiderivative(n, a, grid_c)
    keep = w > 0.0
    return js[keep], w[keep]


# ---------------------------------------------------------------------------
# Cross-mesh evaluation at the fine quadrature points


def _qp_weight_vector(ops: AssembledOperators, comps: int) -> np.ndarray:
    return np.repeat(ops.qw.ravel(), comps)


def _velocity_qp_flat(
    coeffs: np.ndarray, owner: AssembledOperators, target: AssembledOperators
) -> np.ndarray:
    """Velocity values at the target's quadrature points, flattened."""
    if owner is target:
        return velocity_at_qp(coeffs, target).ravel()
    pts = target.qp_x.reshape(-1, 2)
    return _locator(owner).evaluate(coeffs, pts).ravel()


def _nonlinear_grad_qp_flat(
    coeffs: np.ndarray,
    owner: AssembledOperators,
    target: AssembledOperators,
    params: PowerLawParams,
) -> np.ndarray:
    """V(eps u) at the target's quadrature points, flattened."""
    if owner is target:
        eps = sym_grad_at_qp(coeffs, owner)
    else:
        pts = target.qp_x.reshape(-1, 2)
        eps = _locator(owner).evaluate_sym_grad(coeffs, pts)
    return nonlinear_V(eps, params).ravel()


def _project_div_batch(D: np.ndarray, ops: AssembledOperators) -> np.ndarray:
    """Columnwise L2 projections onto the divergence-free subspace.

    D holds load functionals (f, .) restricted to free dofs, one column
    per field; returns full coefficient vectors as rows."""
    sad = ops.projection_saddle()
    k = D.shape[1]
    rhs = np.zeros((sad.n_free + sad.n_pressure + 1, k))
    rhs[: sad.n_free] = D
    sol = sad.lu.solve(rhs)
    out = np.zeros((k, ops.space_v.n_dofs))
    out[:, ops.free] = sol[: sad.n_free].T
    return out


def _cross_load(
    coeffs: np.ndarray, owner: AssembledOperators, target: AssembledOperators
) -> np.ndarray:
    """Load functional (f, xi) of the owner's field on the target's free dofs."""
    if owner is target:
        return (target.M_full @ coeffs)[target.free]
    pts = target.qp_x.reshape(-1, 2)
    vals = _locator(owner).evaluate(coeffs, pts).reshape(target.qp_x.shape)
    return velocity_load_vector(vals, target)[target.free]


# ---------------------------------------------------------------------------
# Error functionals


@dataclass(frozen=True)
class ErrorStats:
    """Coupled coarse-vs-reference error functionals and component proxies.

    natural_err  mean of max_n ||<u_ref>_n - u_n||^2
    vgrad_err    mean of sum_n int_{J_n} a_n ||V(eps u_ref(t)) - V(eps u_n)||^2 dt
    besov_err    max_k (1/k) sum_{n=k}^N E||e_n - e_{n-k}||^2, e_n = <u_ref>_n - u_n
    C_init       squared distance of the divergence-projected initial data
    C_Linf       mean of max_n ||<u>_n - P_div <u>_n||^2 (coarse projection)
    C_best       upper proxy: divergence-projected nodal interpolant cost
    C_G          data term: mean of sum_n int a_n^2 ||G(t,u_ref) - G_n||_HS^2 dt
    C_V          temporal oscillation of V(eps u_ref) under the hat weights
    """

    n_samples: int
    natural_err: float
    vgrad_err: float
    besov_err: float
    C_init: float
    C_Linf: float
    C_best: float
    C_G: float
    C_V: float | None
    stderr: dict[str, float] = dc_field(default_factory=dict)


class _RollingCache:
    """Keyed cache whose keys only move forward; evict below a floor."""

    def __init__(self, compute):
        self._compute = compute
        self._store: dict[int, np.ndarray] = {}

    def get(self, j: int) -> np.ndarray:
        if j not in self._store:
            self._store[j] = self._compute(j)
        return self._store[j]

    def evict_below(self, floor: int) -> None:
        for j in [j for j in self._store if j < floor]:
            del self._store[j]


def error_stats(
    coarse_trajs: Sequence[Trajectory],
    ref_trajs: Sequence[Trajectory],
    config_coarse: SchemeConfig,
    config_ref: SchemeConfig,
    ops_coarse: AssembledOperators,
    ops_ref: AssembledOperators,
    with_CV: bool = True,
    c_v: float | None = None,
) -> ErrorStats:
    """Error statistics of coarse trajectories against coupled references.

    Preconditions: the reference grid refines the coarse grid (step
    counts N+1 divide, meshes nest) and sample i of both ensembles was
    driven by the same Wiener path.  `c_v` injects a precomputed
    temporal-oscillation value (see `temporal_oscillation`, which shares
    the expensive band pass across many coarse grids); with_CV=False
    skips it entirely.
    """
    if len(coarse_trajs) != len(ref_trajs):
        raise ValueError("coarse and reference ensembles differ in size")
    Nc = _check_ensemble(coarse_trajs, ops_coarse)
    Nf = _check_ensemble(ref_trajs, ops_ref)
    grid_c, grid_f = config_coarse.grid, config_ref.grid
    if Nc != grid_c.N or Nf != grid_f.N:
        raise ValueError("trajectory lengths disagree with the configured grids")
    _check_nested(grid_c, grid_f, ops_coarse, ops_ref)
    if config_coarse.params.p != config_ref.params.p:
        raise ValueError("coarse and reference runs use different exponents p")
    params = config_ref.params
    model = config_ref.model
    tau = grid_c.tau
    ns = len(coarse_trajs)

    w2 = np.sqrt(_qp_weight_vector(ops_ref, 2))
    w4 = np.sqrt(_qp_weight_vector(ops_ref, 4))

    # Time-weight tables shared by every sample.
    tiles = [_tiling_average_weights(n, grid_c, grid_f) for n in range(Nc + 1)]
    hat_tile = [_hat_cell_integrals(n, grid_c, grid_f, restrict=True) for n in range(1, Nc + 1)]
    hat_full = [_hat_cell_integrals(n, grid_c, grid_f, restrict=False) for n in range(1, Nc + 1)]

    natural_s: list[float] = []
    vgrad_s: list[float] = []
    init_s: list[float] = []
    linf_s: list[float] = []
    best_s: list[float] = []
    gram_e_sum = np.zeros((Nc + 1, Nc + 1))
    cg_s: list[float] = []

    for coarse, ref in zip(coarse_trajs, ref_trajs):
        Uf = np.stack([f.coeffs for f in ref.fields])
        avg = np.stack([w @ Uf[js] for js, w in tiles])  # <u_ref>_n coefficients

        # e_n at the fine quadrature points, quadrature-weighted rows.
        E = np.empty((Nc + 1, w2.size))
        for n in range(Nc + 1):
            fine_vals = velocity_at_qp(avg[n], ops_ref).ravel()
            coarse_vals = _velocity_qp_flat(coarse.fields[n].coeffs, ops_coarse, ops_ref)
            E[n] = (fine_vals - coarse_vals) * w2
        norms_sq = np.einsum("nd,nd->n", E, E)
        natural_s.append(float(norms_sq[1:].max()))
        gram_e_sum += E @ E.T

        # Divergence projections on the coarse space: averages and their
        # nodal interpolants, batched through one factorization each.
        D_avg = np.stack(
            [_cross_load(avg[n], ops_ref, ops_coarse) for n in range(Nc + 1)], axis=1
        )
        proj_avg = _project_div_batch(D_avg, ops_coarse)
        interp = _interpolate_rows(avg, ops_ref, ops_coarse)
        D_eta = (ops_coarse.M_full @ interp.T)[ops_coarse.free]
        eta = _project_div_batch(D_eta, ops_coarse)

        init_s.append(_initial_gap(coarse.fields[0].coeffs, ref.fields[0].coeffs, ops_coarse, ops_ref))

        linf = 0.0
        for n in range(1, Nc + 1):
            diff = velocity_at_qp(avg[n], ops_ref).ravel() - _velocity_qp_flat(
                proj_avg[n], ops_coarse, ops_ref
            )
            linf = max(linf, float(np.sum((diff * w2) ** 2)))
        linf_s.append(linf)

        # Streamed nonlinear-gradient terms: reference V-fields are
        # computed once per fine step and shared by the restricted
        # (vgrad) and full-support (best-approximation) windows.
        vcache = _RollingCache(
            lambda j: _nonlinear_grad_qp_flat(Uf[j], ops_ref, ops_ref, params) * w4
        )
        best = 0.0
        vgrad = 0.0
        for n in range(1, Nc + 1):
            js_t, w_t = hat_tile[n - 1]
            js_f, w_f = hat_full[n - 1]
            vcache.evict_below(min(js_t[0], js_f[0]))
            Vc = _nonlinear_grad_qp_flat(coarse.fields[n].coeffs, ops_coarse, ops_ref, params) * w4
            Veta = _nonlinear_grad_qp_flat(eta[n], ops_coarse, ops_ref, params) * w4
            for j, w in zip(js_t, w_t):
                d = vcache.get(j) - Vc
                vgrad += w * float(d @ d)
            for j, w in zip(js_f, w_f):
                d = vcache.get(j) - Veta
                best += w * float(d @ d)
            gap = proj_avg[n] - eta[n]
            best += float(gap @ (ops_coarse.M_full @ gap))
        vgrad_s.append(vgrad)
        best_s.append(best)

        cg_s.append(_data_term(coarse, ref, config_coarse, config_ref, ops_coarse, ops_ref, model))

    Ed2 = _squared_increment_table(gram_e_sum / ns)
    sums = _lag_sums(Ed2)
    besov_err = float(sums.max()) if sums.size else 0.0

    natural, natural_se = _mean_and_se(natural_s)
    vgrad, vgrad_se = _mean_and_se(vgrad_s)
    if c_v is None and with_CV:
        c_v = temporal_oscillation(ref_trajs, config_ref, ops_ref, [grid_c])[0]

    return ErrorStats(
        n_samples=ns,
        natural_err=natural,
        vgrad_err=vgrad,
        besov_err=besov_err,
        C_init=float(np.mean(init_s)),
        C_Linf=float(np.mean(linf_s)),
        C_best=float(np.mean(best_s)),
        C_G=float(np.mean(cg_s)),
        C_V=c_v,
        stderr={"natural_err": natural_se, "vgrad_err": vgrad_se},
    )


def _interpolate_rows(
    rows: np.ndarray, owner: AssembledOperators, target: AssembledOperators
) -> np.ndarray:
    """Nodal interpolation of owner fields onto the target velocity space."""
    nodes = target.space_v.node_coords
    out = np.empty((rows.shape[0], target.space_v.n_dofs))
    if owner is target:
        return rows.copy()
    loc = _locator(owner)
    for i, coeffs in enumerate(rows):
        vals = loc.evaluate(coeffs, nodes)
        vals[target.space_v.boundary_node] = 0.0
        out[i] = vals.ravel()
    return out


def _initial_gap(
    u0_coarse: np.ndarray,
    u0_ref: np.ndarray,
    ops_coarse: AssembledOperators,
    ops_ref: AssembledOperators,
) -> float:
    """||P_div u0_ref - P_div u0_coarse||^2 on the coarse space."""
    D = np.stack(
        [
            _cross_load(u0_ref, ops_ref, ops_coarse),
            (ops_coarse.M_full @ u0_coarse)[ops_coarse.free],
        ],
        axis=1,
    )
    pr = _project_div_batch(D, ops_coarse)
    gap = pr[0] - pr[1]
    return float(gap @ (ops_coarse.M_full @ gap))


_GAUSS3_NODES = np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
_GAUSS3_WEIGHTS = np.array([5.0, 8.0, 5.0]) / 9.0


def _data_term(
    coarse: Trajectory,
    ref: Trajectory,
    config_c: SchemeConfig,
    config_f: SchemeConfig,
    ops_c: AssembledOperators,
    ops_f: AssembledOperators,
    model: NoiseModel | None,
) -> float:
    """sum_n int a_n^2(t) ||G(t, u_ref(t)) - G_n(u_lag)||_HS^2 dt.

    The reference velocity is piecewise constant on its midpoint cells;
    per cell the three time profiles int a_n^2 m^l dt (l = 0, 1, 2) are
    integrated by 3-point Gauss and paired with the spatial Gram scalars
    of the two noise fields.
    """
    if model is None:
        return 0.0
    grid_c, grid_f = config_c.grid, config_f.grid
    n_tri, nq = ops_f.qw.shape
    g_vals = model.mode_values(ops_f.qp_x.reshape(-1, 2)).reshape(-1, n_tri, nq, 2)
    w2 = _qp_weight_vector(ops_f, 2)
    additive = model.rule == "additive"

    def rule_flat(u_coeffs: np.ndarray | None, owner) -> np.ndarray:
        if additive:
            u_vals = None
        else:
            u_vals = _velocity_qp_flat(u_coeffs, owner, ops_f).reshape(ops_f.qp_x.shape)
        return model.apply(g_vals, u_vals).reshape(g_vals.shape[0], -1)

    def pair(F: np.ndarray, H: np.ndarray) -> float:
        return float(np.einsum("kd,d,kd->", F, w2, H))

    fcache = _RollingCache(lambda j: rule_flat(ref.fields[j].coeffs, ops_f))
    g_flat = rule_flat(None, ops_f) if additive else None
    hsq_add = pair(g_flat, g_flat) if additive else 0.0
    total = 0.0
    for n in range(1, grid_c.N + 1):
        c_n = 0.0 if n <= 2 else modulation_average(model, *grid_c.interval(n - 2))
        lo = max(grid_c.node(n - 1) - 0.5 * grid_c.tau, 0.0)
        hi = grid_c.node(n) + 0.5 * grid_c.tau
        js, a, b = _fine_cells(lo, hi, grid_f)
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        tpts = mid[:, None] + half[:, None] * _GAUSS3_NODES[None, :]
        a_sq = weight_a(n, tpts.ravel(), grid_c).reshape(tpts.shape) ** 2
        m_t = model.modulation(tpts.ravel()).reshape(tpts.shape)
        I0 = (a_sq @ _GAUSS3_WEIGHTS) * half
        I1 = ((a_sq * m_t) @ _GAUSS3_WEIGHTS) * half
        I2 = ((a_sq * m_t**2) @ _GAUSS3_WEIGHTS) * half

        if additive:
            # F(t) = H = g for every cell: the mode Grams collapse and
            # only the time profile (m(t) - c_n)^2 remains.
            total += hsq_add * float(np.sum(I2 - 2.0 * c_n * I1 + c_n**2 * I0))
            continue
        fcache.evict_below(js[0])
        if n <= 2:
            H, sH = None, 0.0
        else:
            H = rule_flat(coarse.fields[max(n - 2, 0)].coeffs, ops_c)
            sH = pair(H, H)
        for idx, j in enumerate(js):
            F = fcache.get(j)
            sF = pair(F, F)
            sFH = pair(F, H) if H is not None else 0.0
            total += I2[idx] * sF - 2.0 * c_n * I1[idx] * sFH + c_n**2 * I0[idx] * sH
    return max(total, 0.0)


def temporal_oscillation(
    ref_trajs: Sequence[Trajectory],
    config_ref: SchemeConfig,
    ops_ref: AssembledOperators,
    coarse_grids: Sequence[TimeGrid],
) -> list[float]:
    """Hat-weighted temporal oscillation of V(eps u_ref), one value per grid:

        (1/tau) sum_n int int a_n(s) a_n(t) ||V(eps u(s)) - V(eps u(t))||^2 ds dt

    with u piecewise constant on the reference midpoint cells.  The
    pairwise inner products (banded in the step distance) are computed
    once per sample and reweighted for every coarse grid, which is why
    this lives outside `error_stats`: a ladder of grids shares one pass.
    """
    Nf = _check_ensemble(ref_trajs, ops_ref)
    grid_f = config_ref.grid
    params = config_ref.params
    weights = []
    bandwidth = 0
    for grid_c in coarse_grids:
        _check_nested(grid_c, grid_f, ops_ref, ops_ref)
        per_n = [_hat_cell_integrals(n, grid_c, grid_f, restrict=False) for n in range(1, grid_c.N + 1)]
        weights.append((grid_c.tau, per_n))
        bandwidth = max(bandwidth, max(int(js[-1] - js[0]) for js, _ in per_n))

    w4 = np.sqrt(_qp_weight_vector(ops_ref, 4))
    totals = np.zeros(len(coarse_grids))
    ring_len = bandwidth + 1
    for ref in ref_trajs:
        # Banded Gram pass: g[d, i] = (V_i, V_{i+d}) for d = 0..bandwidth,
        # streamed through a ring buffer of the last band of V-fields
        # (two contiguous matrix-vector products per step, no copies).
        ring = np.zeros((ring_len, w4.size))
        g = np.zeros((ring_len, Nf + 1))
        for j in range(Nf + 1):
            v = _nonlinear_grad_qp_flat(ref.fields[j].coeffs, ops_ref, ops_ref, params) * w4
            lo = max(j - bandwidth, 0)
            count = j - lo  # strictly earlier rows i = lo..j-1
            if count:
                p0 = lo % ring_len
                if p0 + count <= ring_len:
                    dots = ring[p0 : p0 + count] @ v
                else:
                    head = ring_len - p0
                    dots = np.concatenate([ring[p0:] @ v, ring[: count - head] @ v])
                g[j - np.arange(lo, j), np.arange(lo, j)] = dots
            ring[j % ring_len] = v
            g[0, j] = float(v @ v)
        for gi, (tau_c, per_n) in enumerate(weights):
            acc = 0.0
            for js, w in per_n:
                i0 = int(js[0])
                L = len(js)
                assert int(js[-1]) - i0 == L - 1, "hat support cells must be contiguous"
                G_loc = np.empty((L, L))
                for d in range(L):
                    band = g[d, i0 : i0 + L - d]
                    idx = np.arange(L - d)
                    G_loc[idx, idx + d] = band
                    G_loc[idx + d, idx] = band
                diag = np.diag(G_loc)
                acc += 2.0 * (w.sum() * (w @ diag) - w @ G_loc @ w)
            totals[gi] += max(acc, 0.0) / tau_c
    return list(totals / len(ref_trajs))


# ---------------------------------------------------------------------------
# Domination / extrapolation verifier


@dataclass(frozen=True)
class ExtrapolationReport:
    """Stopping-rule domination ratios and the extrapolation-inequality margin.

    rule_table maps each tested stopping rule to (E[X], E[Y], ratio);
    C_measured is the worst ratio (a lower bound for the domination
    constant), C_used the constant the margins are evaluated with
    (max(C, 1), or a calibration value passed in).  Margins are
    (RHS - LHS)/RHS with delta-method standard errors; for a noise-free
    configuration both processes vanish and the margins are 1 by
    convention.
    """

    n_samples: int
    r: float
    k: float
    C_measured: float
    C_used: float
    rule_table: dict[str, tuple[float, float, float]]
    domination_margin: float
    domination_sigma: float
    corollary_margin: float
    corollary_sigma: float
    mean_X_final: float
    mean_Y_final: float


def _mode_gram(F: np.ndarray, H: np.ndarray, ops: AssembledOperators) -> np.ndarray:
    """Modewise L2 Gram matrix of two stacks of fields at quadrature points."""
    return np.einsum("tq,ktqc,ltqc->kl", ops.qw, F, H)


def _compensator_sq_path(
    n: int,
    fields_n: np.ndarray,
    fields_np1: np.ndarray | None,
    path: WienerPath,
    grid: TimeGrid,
    ops: AssembledOperators,
) -> np.ndarray:
    """||Ebar(t)||_L2^2 at every fine-cell boundary of the interval J_n.

    The compensator is a mode contraction of two stochastic integrals
    whose per-boundary coefficients are prefix/suffix sums of the
    hat-averaged path increments; the squared norm then reduces to the
    3 small mode Gram matrices of the neighbouring data fields.
    """
    lo, hi = grid.interval(n)
    delta = path.delta
    j0, j1 = int(round(lo / delta)), int(round(hi / delta))
    edges = np.arange(j0, j1 + 1) * delta
    inc = path.increments[j0:j1]

    abar_n = np.diff(weight_antiderivative(n, edges, grid)) / delta
    seg_n = abar_n[:, None] * inc
    c1 = np.vstack([np.cumsum(seg_n[::-1], axis=0)[::-1], np.zeros((1, path.n_modes))])

    A = _mode_gram(fields_n, fields_n, ops)
    out = np.einsum("bk,kl,bl->b", c1, A, c1)
    if n + 1 <= grid.N:
        abar_2 = np.diff(weight_antiderivative(n + 1, edges, grid)) / delta
        seg_2 = abar_2[:, None] * inc
        c2 = np.vstack([np.zeros((1, path.n_modes)), np.cumsum(seg_2, axis=0)])
        B = _mode_gram(fields_np1, fields_np1, ops)
        C12 = _mode_gram(fields_n, fields_np1, ops)
        out += np.einsum("bk,kl,bl->b", c2, B, c2)
        out -= 2.0 * np.einsum("bk,kl,bl->b", c1, C12, c2)
    return np.maximum(out, 0.0)


def _xy_paths(
    traj: Trajectory,
    path: WienerPath,
    config: SchemeConfig,
    ops: AssembledOperators,
    r: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample processes X_M and Y_M for M = 0..N.

    X sums the trapezoid-rule time integrals of (||Ebar||^2/tau)^{r/2}
    over the intervals J_n; Y is the running maximum of the data-field
    norms ||G_n(u_lag)||_HS^r seen up to step (M+2) ^ N.
    """
    grid = config.grid
    model = config.model
    N = grid.N
    delta = path.delta
    n_tri, nq = ops.qw.shape
    g_vals = model.mode_values(ops.qp_x.reshape(-1, 2)).reshape(-1, n_tri, nq, 2)
    fields = []
    hs_pow = np.zeros(N + 1)
    for n in range(1, N + 1):
        u_lag = traj.fields[max(n - 2, 0)]
        u_vals = None if model.rule == "additive" else velocity_at_qp(u_lag.coeffs, ops)
        F = data_G_n(n, u_vals, model, grid, g_vals)
        fields.append(F)
        hs_pow[n] = hs_norm(F, ops) ** r

    x_inc = np.zeros(N + 1)
    for n in range(1, N + 1):
        nxt = fields[n] if n < N else None
        sq = _compensator_sq_path(n, fields[n - 1], nxt, path, grid, ops)
        vals = (sq / grid.tau) ** (r / 2.0)
        x_inc[n] = delta * float(np.sum(0.5 * (vals[:-1] + vals[1:])))
    X = np.cumsum(x_inc)

    running = np.maximum.accumulate(hs_pow[1:])
    upto = np.minimum(np.arange(N + 1) + 2, N)
    Y = running[upto - 1]
    return X, Y


def _ratio_margin(num: np.ndarray, den: np.ndarray) -> tuple[float, float]:
    """margin = 1 - mean(num)/mean(den) with a delta-method standard error."""
    ns = len(num)
    nbar, dbar = float(num.mean()), float(den.mean())
    if dbar <= 0.0:
        return (1.0, 0.0) if nbar <= 0.0 else (float("-inf"), 0.0)
    rho = nbar / dbar
    cov = np.cov(num, den, ddof=1) if ns > 1 else np.zeros((2, 2))
    var = (cov[0, 0] - 2.0 * rho * cov[0, 1] + rho**2 * cov[1, 1]) / (ns * dbar**2)
    return 1.0 - rho, float(np.sqrt(max(var, 0.0)))


def extrapolation_check(
    u0: Field,
    config: SchemeConfig,
    ops: AssembledOperators,
    delta: float,
    n_samples: int,
    seed: int = 0,
    r: float = 4.0,
    k: float = 0.5,
    C_calibration: float | None = None,
    thresholds: Sequence[float] = (0.25, 0.5, 0.75, 0.9),
) -> ExtrapolationReport:
    """Monte Carlo check of the domination relation and its extrapolation.

    Runs `n_samples` coupled trajectories on the given (small) scheme,
    builds the processes X and Y per sample, and evaluates E[X]/E[Y]
    over the finite stopping-rule family: deterministic times 0..N,
    Y-threshold hitting times at the given quantiles of the terminal Y,
    and their one-step-back shifts.  The reported ratios bound the
    domination constant from below; the margins test

        E[X_N] <= C * E[Y_N]           (domination at the terminal time)
        E[X_N^k] <= (1+C-k)/(1-k) E[Y_N^k]   (extrapolation inequality)

    with C either measured here or passed in from a calibration run.
    Refuses fewer than 1000 samples: the 3-sigma buffers the margins are
    judged by would be meaningless.
    """
    if n_samples < 1000:
        raise ValueError(
            f"refusing to estimate domination margins from {n_samples} samples; "
            "need at least 1000 for a meaningful 3-sigma buffer"
        )
    grid = config.grid
    if grid.N > 16:
        raise ValueError(f"extrapolation check expects a small grid (N <= 16), got N={grid.N}")
    if config.model is not None and config.model.n_modes > 4:
        raise ValueError("extrapolation check expects at most 4 noise modes")
    if not 0.0 < k < 1.0:
        raise ValueError(f"moment order k must lie in (0, 1), got {k}")
    half_cells = grid.tau / (2.0 * delta)
    if abs(half_cells - round(half_cells)) > 1e-9:
        raise ValueError("delta must divide tau/2 so interval boundaries align with fine cells")

    N = grid.N
    if config.model is None:
        return ExtrapolationReport(
            n_samples=n_samples,
            r=r,
            k=k,
            C_measured=0.0,
            C_used=max(C_calibration or 1.0, 1.0),
            rule_table={},
            domination_margin=1.0,
            domination_sigma=0.0,
            corollary_margin=1.0,
            corollary_sigma=0.0,
            mean_X_final=0.0,
            mean_Y_final=0.0,
        )

    work = StepperWorkspace(config, ops)
    X_all = np.empty((n_samples, N + 1))
    Y_all = np.empty((n_samples, N + 1))
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n_samples)):
        rng = np.random.default_rng(child)
        path = sample_wiener_path(grid.T, delta, config.model.n_modes, rng)
        incs = sample_increments(path, grid)
        traj = run_trajectory(u0, incs, config, ops, work)
        if not traj.ok:
            raise RuntimeError(f"sample {i} failed at step {traj.failed_at}")
        X_all[i], Y_all[i] = _xy_paths(traj, path, config, ops, r)

    if not X_all.any() and not Y_all.any():
        return ExtrapolationReport(
            n_samples=n_samples,
            r=r,
            k=k,
            C_measured=0.0,
            C_used=max(C_calibration or 1.0, 1.0),
            rule_table={},
            domination_margin=1.0,
            domination_sigma=0.0,
            corollary_margin=1.0,
            corollary_sigma=0.0,
            mean_X_final=float(X_all[:, N].mean()),
            mean_Y_final=float(Y_all[:, N].mean()),
        )

    samples = np.arange(n_samples)
    rules: dict[str, np.ndarray] = {f"time_{m}": np.full(n_samples, m) for m in range(N + 1)}
    y_final = Y_all[:, N]
    for q in thresholds:
        y = float(np.quantile(y_final, q))
        above = Y_all > y
        hit = np.where(above.any(axis=1), above.argmax(axis=1), N)
        rules[f"hit_q{q:g}"] = hit
        rules[f"hitshift_q{q:g}"] = np.maximum(hit - 1, 0)

    rule_table: dict[str, tuple[float, float, float]] = {}
    C_measured = 0.0
    for name, idx in rules.items():
        ex = float(X_all[samples, idx].mean())
        ey = float(Y_all[samples, idx].mean())
        ratio = ex / ey if ey > 0.0 else (0.0 if ex <= 0.0 else float("inf"))
        rule_table[name] = (ex, ey, ratio)
        C_measured = max(C_measured, ratio)

    C_used = max(C_calibration if C_calibration is not None else C_measured, 1.0)
    dom_margin, dom_sigma = _ratio_margin(X_all[:, N], C_used * y_final)
    factor = (1.0 + C_used - k) / (1.0 - k)
    cor_margin, cor_sigma = _ratio_margin(X_all[:, N] ** k, factor * y_final**k)

    return ExtrapolationReport(
        n_samples=n_samples,
        r=r,
        k=k,
        C_measured=C_measured,
        C_used=C_used,
        rule_table=rule_table,
        domination_margin=dom_margin,
        domination_sigma=dom_sigma,
        corollary_margin=cor_margin,
        corollary_sigma=cor_sigma,
        mean_X_final=float(X_all[:, N].mean()),
        mean_Y_final=float(y_final.mean()),
    )
