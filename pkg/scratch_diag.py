"""Scratch oracle computations for diagnostics.py (deleted before commit).

Each section computes a quantity through an independent direct path
(plain loops over norms(), compensator_Ebar, etc.) and compares it with
the vectorized module, or measures a concrete value to freeze in tests.
"""

import time

import numpy as np

import pstokes.diagnostics as dg
from pstokes.grids import TimeGrid, weight_a, weight_antiderivative
from pstokes.meshing import alfeld_split, unit_square_mesh
from pstokes.noise import (
    NoiseModel,
    compensator_Ebar,
    data_G_n,
    sample_increments,
    sample_wiener_path,
)
from pstokes.pressure import reconstruct
from pstokes.spaces import (
    Field,
    assemble,
    interpolate_velocity,
    norms,
    velocity_at_qp,
)
from pstokes.stepper import (
    NewtonConfig,
    SchemeConfig,
    StepperWorkspace,
    hs_norm,
    initial_velocity,
    run_trajectory,
)
from pstokes.tensors import PowerLawParams

RULE = lambda name: print(f"\n=== {name} ===")


def curl_bump(pts, kx=1.0, ky=1.0, amp=1.0):
    x, y = pts[..., 0], pts[..., 1]
    # curl of psi = amp*(x y (1-x)(1-y))^2 * sin-ish modulation: use
    # the simple squared bump for u0 and modulated versions for modes.
    psi_x = amp * 2 * (x * y * (1 - x) * (1 - y)) * (y * (1 - y)) * (1 - 2 * x)
    psi_y = amp * 2 * (x * y * (1 - x) * (1 - y)) * (x * (1 - x)) * (1 - 2 * y)
    if kx != 1.0 or ky != 1.0:
        import numpy as _np

        s = _np.sin(_np.pi * kx * x) * _np.sin(_np.pi * ky * y)
        psi_x = psi_x * s
        psi_y = psi_y * s
    return np.stack([psi_y, -psi_x], axis=-1)


def u0_fn(pts):
    return curl_bump(pts)


def make_model(n_modes=2, amplitude=0.1, rule="additive", modulation=None):
    fields = [
        (lambda k: (lambda pts: curl_bump(pts, kx=1.0 + k, ky=1.0, amp=1.0)))(k)
        for k in range(n_modes)
    ]
    return NoiseModel(fields, rule=rule, amplitude=amplitude, time_modulation=modulation)


def build(m, N, p=2.0, kappa=0.0, model=None, solver="kkt", T=1.0):
    mesh = alfeld_split(unit_square_mesh(m))
    ops = assemble(mesh)
    grid = TimeGrid(T=T, N=N)
    params = PowerLawParams(p=p, kappa=kappa)
    config = SchemeConfig(params=params, grid=grid, model=model, solver=solver)
    return ops, grid, config


def run_ensemble(u0, config, ops, n_samples, seed, delta=None):
    work = StepperWorkspace(config, ops)
    trajs, paths = [], []
    for child in np.random.SeedSequence(seed).spawn(n_samples):
        rng = np.random.default_rng(child)
        if delta is None:
            incs = sample_increments(rng, config.grid, n_modes=config.model.n_modes if config.model else 0)
            paths.append(None)
        else:
            path = sample_wiener_path(config.grid.T, delta, config.model.n_modes, rng)
            incs = sample_increments(path, config.grid)
            paths.append(path)
        traj = run_trajectory(u0, incs, config, ops, work)
        assert traj.ok, f"trajectory failed at {traj.failed_at}"
        trajs.append(traj)
    return trajs, paths


# ---------------------------------------------------------------------------
RULE("A. besov_halves gram trick vs direct norms() loop")
ops, grid, config = build(m=2, N=6, model=make_model())
u0 = initial_velocity(u0_fn, ops)
trajs, _ = run_ensemble(u0, config, ops, n_samples=3, seed=11)

# direct: per-sample max_k (1/k) sum ||u_n - u_{n-k}||^2 via norms()
direct_max = []
N = grid.N
for t in trajs:
    best = 0.0
    for k in range(1, N + 1):
        s = 0.0
        for n in range(k, N + 1):
            d = Field("velocity", t.fields[n].coeffs - t.fields[n - k].coeffs)
            s += norms(d, "L2", ops) ** 2
        best = max(best, s / k)
    direct_max.append(best)
direct_mom = float(np.mean(direct_max))
mod_mom = dg.besov_halves([t.fields for t in trajs], "mean-of-max", ops)
print("mean-of-max direct", direct_mom, "module", mod_mom, "rel", abs(direct_mom - mod_mom) / direct_mom)

# max-of-mean direct
best = 0.0
for k in range(1, N + 1):
    s = 0.0
    for n in range(k, N + 1):
        acc = 0.0
        for t in trajs:
            d = Field("velocity", t.fields[n].coeffs - t.fields[n - k].coeffs)
            acc += norms(d, "L2", ops) ** 2
        s += acc / len(trajs)
    best = max(best, s / k)
mod_maxmean = dg.besov_halves([t.fields for t in trajs], "max-of-mean", ops)
print("max-of-mean direct", best, "module", mod_maxmean, "rel", abs(best - mod_maxmean) / best)
print("ordering mean-of-max >= max-of-mean:", mod_mom >= mod_maxmean - 1e-12)

single = dg.besov_halves(trajs[0].fields, "mean-of-max", ops)
single2 = dg.besov_halves(trajs[0].fields, "max-of-mean", ops)
print("single-sample modes equal:", abs(single - single2) <= 1e-12 * max(single, 1e-30))

# constant sequence -> 0; e_max = ||c||^2
const = [trajs[0].fields[0]] * 5
print("constant seq besov:", dg.besov_halves(const, "mean-of-max", ops))

# ---------------------------------------------------------------------------
RULE("B. stability_stats cross-check vs direct loops")
press = [reconstruct(t, None, config, ops) for t in trajs]
# reconstruct signature check happens here
stats = dg.stability_stats(trajs, press, config, ops)
# direct e_max / dissipation for sample 0
t0 = trajs[0]
emax0 = max(norms(f, "L2", ops) ** 2 for f in t0.fields[1:])
diss0 = sum(grid.tau * norms(f, "Lp_of_sym_grad", ops, p=config.params.p) ** config.params.p for f in t0.fields[1:])
emax_direct = float(np.mean([max(norms(f, "L2", ops) ** 2 for f in t.fields[1:]) for t in trajs]))
print("e_max module", stats.e_max, "direct", emax_direct, "rel", abs(stats.e_max - emax_direct) / emax_direct)
diss_direct = float(
    np.mean(
        [
            sum(grid.tau * norms(f, "Lp_of_sym_grad", ops, p=config.params.p) ** config.params.p for f in t.fields[1:])
            for t in trajs
        ]
    )
)
print("dissipation module", stats.dissipation, "direct", diss_direct, "rel", abs(stats.dissipation - diss_direct) / diss_direct)
print("besov_u:", stats.besov_u, "besov_u_strong:", stats.besov_u_strong, "ordering ok:", stats.besov_u_strong >= stats.besov_u - 1e-12)
print("sto_max:", stats.sto_max, "sto_besov_2:", stats.sto_besov_2, "sb4:", stats.sto_besov_4, "sb8:", stats.sto_besov_8)
print("det_increment:", stats.det_increment)

# direct sto_besov_2 check: r=2 -> max_k sum tau * Ed2/(tau k) = max_k (1/k) sum Ed2 = besov of z rows
zrows = []
for ptr in press:
    Z = np.vstack([np.zeros(ops.space_v.n_dofs), ptr.z_sto])
    zrows.append([Field("velocity", z) for z in Z])
sb2_direct = dg.besov_halves(zrows, "max-of-mean", ops)
print("sto_besov_2 vs besov of z rows:", stats.sto_besov_2, sb2_direct, "rel",
      abs(stats.sto_besov_2 - sb2_direct) / max(sb2_direct, 1e-30))

# ---------------------------------------------------------------------------
RULE("C. deterministic p=2 energy numbers (freeze candidates)")
ops0, grid0, config0 = build(m=2, N=8, model=None)
u00 = initial_velocity(u0_fn, ops0)
inc0 = sample_increments(np.random.default_rng(0), grid0, n_modes=0)
traj0 = run_trajectory(u00, inc0, config0, ops0)
stats0 = dg.stability_stats([traj0], None, config0, ops0)
u0_sq = norms(u00, "L2", ops0) ** 2
print("||u0||^2 =", u0_sq)
print("e_max =", stats0.e_max, " dissipation =", stats0.dissipation)
print("e_max + diss <= ||u0||^2 ?", stats0.e_max + stats0.dissipation <= u0_sq + 1e-12)
print("besov_u =", stats0.besov_u)

# ---------------------------------------------------------------------------
RULE("D. fine-cell tiling and hat-integral weights")
gc, gf = TimeGrid(T=1.0, N=4), TimeGrid(T=1.0, N=24)  # ratio 5, odd
for n in range(gc.N + 1):
    js, w = dg._tiling_average_weights(n, gc, gf)
    assert abs(w.sum() - 1.0) < 1e-12, (n, w.sum())
    lo, hi = gc.interval(n)
    # odd ratio: fine cells tile J_n exactly -> all weights equal
    if n > 0:
        assert np.allclose(w, w[0]), (n, w)
print("tiling weights: sums=1, flat on odd ratio ok")
for n in range(1, gc.N + 1):
    js, w = dg._hat_cell_integrals(n, gc, gf, restrict=True)
    lo, hi = gc.interval(n)
    exact = weight_antiderivative(n, np.array([hi]), gc)[0] - weight_antiderivative(n, np.array([lo]), gc)[0]
    assert abs(w.sum() - exact) < 1e-14, (n, w.sum(), exact)
    js2, w2 = dg._hat_cell_integrals(n, gc, gf, restrict=False)
    assert abs(w2.sum() - gc.tau) < 1e-14, (n, w2.sum())  # int a_n = tau
print("hat integrals: restricted sums = int_{J_n} a_n, full sums = tau ok")
# even ratio weights still sum correctly
gf2 = TimeGrid(T=1.0, N=9)  # ratio 2, even
for n in range(gc.N + 1):
    js, w = dg._tiling_average_weights(n, gc, gf2)
    assert abs(w.sum() - 1.0) < 1e-12
print("even-ratio tiling sums ok")

# ---------------------------------------------------------------------------
RULE("E. self-comparison: all error functionals vanish")
ops_e, grid_e, config_e = build(m=2, N=6, model=make_model())
u0e = initial_velocity(u0_fn, ops_e)
trajs_e, _ = run_ensemble(u0e, config_e, ops_e, n_samples=2, seed=5, delta=grid_e.tau / 8)
es = dg.error_stats(trajs_e, trajs_e, config_e, config_e, ops_e, ops_e)
print("natural", es.natural_err, "vgrad", es.vgrad_err, "besov", es.besov_err)
print("C_init", es.C_init, "C_Linf", es.C_Linf, "C_best", es.C_best, "C_G", es.C_G, "C_V", es.C_V)

# ---------------------------------------------------------------------------
RULE("F. cross-mesh quadrature deviation (m=2 field on m=4 mesh)")
mesh4 = alfeld_split(unit_square_mesh(4))
ops4 = assemble(mesh4)
v2 = interpolate_velocity(u0_fn, ops_e)  # on m=2
flat = dg._velocity_qp_flat(v2.coeffs, ops_e, ops4)
w2v = dg._qp_weight_vector(ops4, 2)
cross_sq = float(np.sum(flat * flat * w2v))
native_sq = norms(v2, "L2", ops_e) ** 2
print("||v||^2 native m=2:", native_sq, " via m=4 qp:", cross_sq, " rel dev:", abs(cross_sq - native_sq) / native_sq)

# ---------------------------------------------------------------------------
RULE("G. coupled two-level error run (smoke + magnitude)")
t_start = time.time()
ops_c, grid_c, config_c = build(m=2, N=4, model=make_model())
ops_f, grid_f, config_f = build(m=4, N=24, model=make_model())
config_f = SchemeConfig(params=config_f.params, grid=grid_f, model=config_c.model, solver="kkt")
u0c = initial_velocity(u0_fn, ops_c)
u0f = initial_velocity(u0_fn, ops_f)
delta = grid_f.tau / 4
work_c = StepperWorkspace(config_c, ops_c)
work_f = StepperWorkspace(config_f, ops_f)
tc_list, tf_list = [], []
for child in np.random.SeedSequence(77).spawn(2):
    rng = np.random.default_rng(child)
    path = sample_wiener_path(grid_f.T, delta, 2, rng)
    inc_c = sample_increments(path, grid_c)
    inc_f = sample_increments(path, grid_f)
    tc = run_trajectory(u0c, inc_c, config_c, ops_c, work_c)
    tf = run_trajectory(u0f, inc_f, config_f, ops_f, work_f)
    assert tc.ok and tf.ok
    tc_list.append(tc)
    tf_list.append(tf)
es2 = dg.error_stats(tc_list, tf_list, config_c, config_f, ops_c, ops_f)
print("natural", es2.natural_err, "vgrad", es2.vgrad_err, "besov", es2.besov_err)
print("C_init", es2.C_init, "C_Linf", es2.C_Linf, "C_best", es2.C_best, "C_G", es2.C_G, "C_V", es2.C_V)
print("besov_err <= ~natural scale:", es2.besov_err, es2.natural_err)
print("time:", time.time() - t_start)

# ---------------------------------------------------------------------------
RULE("H. X-path vectorization vs direct compensator_Ebar trapezoid")
ops_x, grid_x, config_x = build(m=2, N=6, model=make_model(n_modes=2, amplitude=0.3, rule="bounded_lipschitz"))
u0x = initial_velocity(u0_fn, ops_x)
delta_x = grid_x.tau / 8
work_x = StepperWorkspace(config_x, ops_x)
rng = np.random.default_rng(123)
path_x = sample_wiener_path(grid_x.T, delta_x, 2, rng)
incs_x = sample_increments(path_x, grid_x)
traj_x = run_trajectory(u0x, incs_x, config_x, ops_x, work_x)
assert traj_x.ok
r = 4.0
X, Y = dg._xy_paths(traj_x, path_x, config_x, ops_x, r)

# direct: compensator_Ebar at every fine boundary, trapezoid
n_tri, nq = ops_x.qw.shape
g_vals_x = config_x.model.mode_values(ops_x.qp_x.reshape(-1, 2)).reshape(-1, n_tri, nq, 2)
Fs = {}
for n in range(1, grid_x.N + 1):
    u_lag = traj_x.fields[max(n - 2, 0)]
    u_vals = velocity_at_qp(u_lag.coeffs, ops_x)
    Fs[n] = data_G_n(n, u_vals, config_x.model, grid_x, g_vals_x)
X_direct = np.zeros(grid_x.N + 1)
for n in range(1, grid_x.N + 1):
    lo, hi = grid_x.interval(n)
    j0, j1 = int(round(lo / delta_x)), int(round(hi / delta_x))
    ts = np.arange(j0, j1 + 1) * delta_x
    vals = []
    for t in ts:
        Eb = compensator_Ebar(t, n, Fs[n], Fs.get(n + 1), path_x, grid_x)
        nrm2 = float(np.einsum("tq,tqc->", ops_x.qw, Eb**2))
        vals.append((nrm2 / grid_x.tau) ** (r / 2.0))
    vals = np.array(vals)
    X_direct[n] = X_direct[n - 1] + delta_x * float(np.sum(0.5 * (vals[:-1] + vals[1:])))
print("X module:", X)
print("X direct:", X_direct)
print("max rel dev:", np.max(np.abs(X - X_direct) / np.maximum(np.abs(X_direct), 1e-30)))

# Y vs recorded hs_G in StepStats
hs_direct = np.array([0.0] + [hs_norm(Fs[n], ops_x) for n in range(1, grid_x.N + 1)])
hs_recorded = np.array([0.0] + [s.hs_G for s in traj_x.stats])
print("hs(F_n) vs recorded stepper hs_G max dev:", np.max(np.abs(hs_direct - hs_recorded)))
Y_direct = np.array([max(hs_direct[1 : min(M + 2, grid_x.N) + 1] ** r) for M in range(grid_x.N + 1)])
print("Y module vs direct max dev:", np.max(np.abs(Y - Y_direct)))

# ---------------------------------------------------------------------------
RULE("I. small extrapolation run (measure C, margins)")
t_start = time.time()
ops_p, grid_p, config_p = build(m=2, N=8, model=make_model(n_modes=2, amplitude=0.3, rule="bounded_lipschitz"))
u0p = initial_velocity(u0_fn, ops_p)
rep = dg.extrapolation_check(u0p, config_p, ops_p, delta=grid_p.tau / 8, n_samples=1000, seed=21)
print("C_measured:", rep.C_measured, "C_used:", rep.C_used)
print("domination margin:", rep.domination_margin, "+-", rep.domination_sigma)
print("corollary margin:", rep.corollary_margin, "+-", rep.corollary_sigma)
print("EX_N:", rep.mean_X_final, "EY_N:", rep.mean_Y_final)
worst = sorted(rep.rule_table.items(), key=lambda kv: -kv[1][2])[:4]
for name, (ex, ey, ratio) in worst:
    print(f"  rule {name}: EX={ex:.4g} EY={ey:.4g} ratio={ratio:.4g}")
print("time:", time.time() - t_start)

RULE("J. noise-free extrapolation short-circuit")
ops_n, grid_n, config_n = build(m=2, N=4, model=None)
rep0 = dg.extrapolation_check(initial_velocity(u0_fn, ops_n), config_n, ops_n, delta=grid_n.tau / 2, n_samples=1000)
print("margins:", rep0.domination_margin, rep0.corollary_margin, "C:", rep0.C_measured)
