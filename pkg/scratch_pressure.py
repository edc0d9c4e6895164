import numpy as np

from pstokes.grids import TimeGrid
from pstokes.meshing import alfeld_split, unit_square_mesh
from pstokes.noise import NoiseModel, sample_increments
from pstokes.spaces import (
    Field,
    assemble,
    interpolate_velocity,
    norms,
    project_perp,
)
from pstokes.stepper import (
    NewtonConfig,
    SchemeConfig,
    initial_velocity,
    run_trajectory,
)
from pstokes.tensors import PowerLawParams
from pstokes.pressure import (
    _solve_vperp,
    initial_pressure,
    multiplier_consistency,
    norm_Qdet,
    norm_Qsto,
    reconstruct,
    stress_dual_norm,
    verify_reconstruction,
)


def u0_smooth(x):
    xx, yy = x[..., 0], x[..., 1]
    psi_x = 2 * xx * (1 - xx) * (1 - 2 * xx) * (yy * (1 - yy)) ** 2
    psi_y = 2 * yy * (1 - yy) * (1 - 2 * yy) * (xx * (1 - xx)) ** 2
    return np.stack([psi_y, -psi_x], axis=-1)


def curl_modes(n_modes, amplitude=0.1):
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


mesh = alfeld_split(unit_square_mesh(4))
ops = assemble(mesh)
rng = np.random.default_rng(7)

# ---- initial pressure on a NON-div-free datum (raw interpolant)
u0_raw = interpolate_velocity(u0_smooth, ops)
pi0 = initial_pressure(u0_raw, ops)
perp_u0 = project_perp(u0_raw, ops)
print("u0 raw perp part:", norms(perp_u0, "L2", ops))
print("||pi_init||_Qsto:", norm_Qsto(pi0, ops))
print("identity gap:", abs(norm_Qsto(pi0, ops) - norms(perp_u0, "L2", ops)))
print("mean of pi_init:", abs(ops.cvec @ pi0.coeffs))

# residual of (pi0, div xi) = (u0, xi) over random perp xi
worst = 0.0
d_full = ops.B_full.T @ pi0.coeffs
for _ in range(20):
    v = np.zeros(ops.space_v.n_dofs)
    v[ops.free] = rng.standard_normal(ops.n_free)
    xi = project_perp(Field("velocity", v), ops)
    xi_c = xi.coeffs / norms(xi, "L2", ops)
    r = d_full @ xi_c - (ops.M_full @ u0_raw.coeffs) @ xi_c
    worst = max(worst, abs(r))
print("init residual over 20 perp dirs:", worst)

# div-free datum -> zero
u0_df = initial_velocity(u0_smooth, ops)
pi0_df = initial_pressure(u0_df, ops)
print("pi_init of div-free datum:", np.abs(pi0_df.coeffs).max())

# ---- trajectories
for p, kappa in [(2.0, 0.0), (3.0, 0.0), (1.5, 0.01)]:
    print(f"--- p={p} kappa={kappa}")
    params = PowerLawParams(p=p, kappa=kappa)
    grid = TimeGrid(T=0.25, N=12)
    model = NoiseModel(mode_fields=curl_modes(4))
    config = SchemeConfig(params=params, grid=grid, model=model)
    inc = sample_increments(np.random.default_rng(42), grid, n_modes=4)
    traj = run_trajectory(u0_df, inc, config, ops)
    assert traj.ok
    pt = reconstruct(traj, None, config, ops)
    res = verify_reconstruction(traj, pt, config, ops)
    print("  reconstruction residual:", res)
    mc = multiplier_consistency(traj, pt, ops)
    print("  multiplier consistency:", mc)
    # independent loads path
    pt2 = reconstruct(traj, inc, config, ops)
    dmax = max(
        np.abs(pt2.pi_sto[n].coeffs - pt.pi_sto[n].coeffs).max()
        for n in range(traj.n_steps)
    )
    print("  stored vs recomputed loads, pi_sto coeff gap:", dmax)
    # decomposition: single total solve vs component sum at final n
    n = traj.n_steps
    tau = grid.tau
    from pstokes.spaces import stress_residual_vector

    d_tot = (ops.M_full @ traj.fields[0].coeffs)[ops.free]
    for l in range(1, n + 1):
        d_tot = d_tot + tau * stress_residual_vector(traj.fields[l].coeffs, ops, params)
        d_tot = d_tot - traj.noise_loads[l - 1]
    q_tot, _ = _solve_vperp(d_tot, ops)
    gap = norm_Qsto(Field("pressure", q_tot - pt.combined(n).coeffs), ops)
    print("  decomposition gap (Qsto):", gap)
    # mean-zero components
    mz = max(
        abs(ops.cvec @ pt.pi_det[n - 1].coeffs),
        abs(ops.cvec @ pt.pi_sto[n - 1].coeffs),
        abs(ops.cvec @ pt.pi_init.coeffs),
    )
    print("  mean-zero:", mz)
    # z_sto vs norm_Qsto
    zgap = 0.0
    for j in range(traj.n_steps):
        a = np.sqrt(pt.z_sto[j] @ (ops.M_full @ pt.z_sto[j]))
        b = norm_Qsto(pt.pi_sto[j], ops)
        zgap = max(zgap, abs(a - b))
    print("  z_sto norm gap:", zgap)
    # per-step det increment bound (lower bracket vs stress dual norm)
    worst_margin = np.inf
    for j in [1, n // 2, n]:
        dq = Field(
            "pressure",
            (pt.pi_det[j - 1].coeffs - (pt.pi_det[j - 2].coeffs if j >= 2 else 0.0))
            / tau,
        )
        br = norm_Qdet(dq, p, ops)
        sn = stress_dual_norm(traj.fields[j], ops, params)
        worst_margin = min(worst_margin, sn - br["lower"])
        if j == n:
            print(
                f"  step {j}: Qdet bracket [{br['lower']:.6e}, {br['upper']:.6e}], "
                f"||S||_p' = {sn:.6e}"
            )
    print("  min margin (||S|| - lower):", worst_margin)

# ---- G == 0 -> pi_sto == 0
params = PowerLawParams(p=2.0, kappa=0.0)
grid = TimeGrid(T=0.25, N=8)
config0 = SchemeConfig(params=params, grid=grid, model=None)
inc0 = sample_increments(np.random.default_rng(3), grid, n_modes=1)
traj0 = run_trajectory(u0_df, inc0, config0, ops)
pt0 = reconstruct(traj0, None, config0, ops)
print("G=0 pi_sto max:", max(np.abs(f.coeffs).max() for f in pt0.pi_sto))
print("G=0 z_sto max:", np.abs(pt0.z_sto).max())

# zero data -> all zero
z0 = Field("velocity", np.zeros(ops.space_v.n_dofs))
trajz = run_trajectory(z0, inc0, config0, ops)
ptz = reconstruct(trajz, None, config0, ops)
allmax = max(
    np.abs(ptz.pi_init.coeffs).max(),
    max(np.abs(f.coeffs).max() for f in ptz.pi_det),
    max(np.abs(f.coeffs).max() for f in ptz.pi_sto),
)
print("zero data, all comp max:", allmax)

# ---- norm_Qsto duality maximizer + homogeneity
q = Field("pressure", rng.standard_normal(ops.n_pressure))
q.coeffs -= (ops.cvec @ q.coeffs) * np.ones_like(q.coeffs)  # mean zero-ish
# proper mean-zero: subtract weighted mean; cvec @ 1 = 1?
print("cvec@1:", ops.cvec @ np.ones(ops.n_pressure))
q = Field("pressure", q.coeffs - (ops.cvec @ q.coeffs))
print("q mean:", ops.cvec @ q.coeffs)
nq = norm_Qsto(q, ops)
from pstokes.spaces import discrete_gradient

vstar = project_perp(discrete_gradient(q, ops), ops)
vstar_c = -vstar.coeffs
num = (ops.B_full.T @ q.coeffs) @ vstar_c
den = np.sqrt(vstar_c @ (ops.M_full @ vstar_c))
print("sup-form at v*:", num / den, " identity:", nq, " gap:", abs(num / den - nq))
print("homogeneity gap:", abs(norm_Qsto(Field("pressure", -3.5 * q.coeffs), ops) - 3.5 * nq))

# ---- norm_Qdet ascent monotonicity at p=2 and bracket
br2 = norm_Qdet(q, 2.0, ops)
print("p=2 ascent ratios:", br2["ascent_ratios"])
diffs = np.diff(br2["ascent_ratios"])
print("monotone (tol -1e-12):", (diffs >= -1e-12).all(), "min diff:", diffs.min() if len(diffs) else 0)
print("p=2 bracket:", br2["lower"], br2["upper"], "ratio:", br2["lower"] / br2["upper"])
for pp in (1.5, 3.0):
    br = norm_Qdet(q, pp, ops)
    print(f"p={pp} bracket:", br["lower"], br["upper"], "ok:", br["lower"] <= br["upper"])
brz = norm_Qdet(Field("pressure", np.zeros(ops.n_pressure)), 2.0, ops)
print("zero q bracket:", brz)
