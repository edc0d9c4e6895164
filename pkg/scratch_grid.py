"""Grid search over (T, decay) for the convergence preset (scratch)."""
import sys, time
import numpy as np
import pstokes.diagnostics as dg
from pstokes.grids import TimeGrid
from pstokes.meshing import alfeld_split, unit_square_mesh
from pstokes.noise import NoiseModel, sample_increments, sample_wiener_path
from pstokes.spaces import Field, assemble
from pstokes.stepper import SchemeConfig, StepperWorkspace, initial_velocity, run_trajectory
from pstokes.tensors import PowerLawParams

def bump_stream_mode(k):
    def mode(pts):
        x, y = pts[..., 0], pts[..., 1]
        b = x * y * (1 - x) * (1 - y)
        bx = y * (1 - y) * (1 - 2 * x)
        by = x * (1 - x) * (1 - 2 * y)
        if k == 0:
            c, cx, cy = 1.0, 0.0, 0.0
        else:
            w = np.pi * k
            c = np.cos(w * x) * np.cos(w * y)
            cx = -w * np.sin(w * x) * np.cos(w * y)
            cy = -w * np.cos(w * x) * np.sin(w * y)
        ux = 2 * b * by * c + b * b * cy
        uy = -(2 * b * bx * c + b * b * cx)
        return np.stack([ux, uy], axis=-1)
    return mode

def make_model(M, decay):
    fields = [(lambda k: (lambda pts: (1.0 + k) ** (-decay) * bump_stream_mode(1 + k)(pts)))(k)
              for k in range(M)]
    return NoiseModel(fields, rule="additive", amplitude=1.0)

def slope(xs, ys):
    xs, ys = np.log(np.asarray(xs)), np.log(np.asarray(ys))
    A = np.vstack([xs, np.ones_like(xs)]).T
    coef, *_ = np.linalg.lstsq(A, ys, rcond=None)
    return float(coef[0]), float(np.sqrt(np.mean((A @ coef - ys) ** 2)))

_ops_cache = {}
def ops_for(m):
    if m not in _ops_cache:
        _ops_cache[m] = assemble(alfeld_split(unit_square_mesh(m)))
    return _ops_cache[m]

def run_ladder(T, coarse_specs, ref_spec, model, n_samples, seed, delta_frac=8):
    m_ref, N_ref = ref_spec
    ops_r = ops_for(m_ref)
    cfg_r = SchemeConfig(params=PowerLawParams(p=2.0, kappa=0.0),
                         grid=TimeGrid(T=T, N=N_ref), model=model, solver="stream")
    u0_r = Field("velocity", np.zeros(ops_r.space_v.n_dofs))
    work_r = StepperWorkspace(cfg_r, ops_r)
    delta = cfg_r.grid.tau / delta_frac
    levels = []
    for (m, N) in coarse_specs:
        ops_c = ops_for(m)
        cfg_c = SchemeConfig(params=cfg_r.params, grid=TimeGrid(T=T, N=N), model=model,
                             solver="stream")
        u0_c = Field("velocity", np.zeros(ops_c.space_v.n_dofs))
        levels.append((ops_c, cfg_c, u0_c, StepperWorkspace(cfg_c, ops_c), []))
    refs = []
    for child in np.random.SeedSequence(seed).spawn(n_samples):
        rng = np.random.default_rng(child)
        path = sample_wiener_path(T, delta, model.n_modes, rng)
        tr = run_trajectory(u0_r, sample_increments(path, cfg_r.grid), cfg_r, ops_r, work_r)
        assert tr.ok
        refs.append(tr)
        for ops_c, cfg_c, u0_c, work_c, lst in levels:
            tc = run_trajectory(u0_c, sample_increments(path, cfg_c.grid), cfg_c, ops_c, work_c)
            assert tc.ok
            lst.append(tc)
    stats = [dg.error_stats(lst, refs, cfg_c, cfg_r, ops_c, ops_r, with_CV=False)
             for ops_c, cfg_c, u0_c, work_c, lst in levels]
    return stats, refs, cfg_r, ops_r

M = int(sys.argv[1]) if len(sys.argv) > 1 else 12
for T in (0.01, 0.02):
    for decay in (1.0, 1.5, 2.0):
        model = make_model(M, decay)
        t0 = time.time()
        h_stats, _, _, _ = run_ladder(T, [(2, 29), (4, 29), (8, 29)], (16, 29), model, 4, seed=9)
        hs = [0.5, 0.25, 0.125]
        nat_h = slope(hs, [s.natural_err for s in h_stats])
        vgr_h = slope(hs, [s.vgrad_err for s in h_stats])
        t_stats, refs, cfg_r, ops_r = run_ladder(T, [(8, 4), (8, 24), (8, 40), (8, 204)],
                                                 (8, 1024), model, 4, seed=5, delta_frac=8)
        taus = [T / (N + 1) for N in (4, 24, 40, 204)]
        nat_t = slope(taus, [s.natural_err for s in t_stats])
        vgr_t = slope(taus, [s.vgrad_err for s in t_stats])
        cvs = dg.temporal_oscillation(refs, cfg_r, ops_r, [TimeGrid(T, N) for N in (4, 24, 40, 204)])
        cv_sl = slope(taus, cvs)
        ok = lambda v, lo, hi: "Y" if lo <= v[0] <= hi else "n"
        print(f"T={T} th={decay}: h nat {nat_h[0]:.2f}({nat_h[1]:.2f}){ok(nat_h,1.6,2.4)} "
              f"vgr {vgr_h[0]:.2f}({vgr_h[1]:.2f}){ok(vgr_h,1.6,2.4)} | "
              f"tau nat {nat_t[0]:.2f}({nat_t[1]:.2f}){ok(nat_t,0.7,1.3)} "
              f"vgr {vgr_t[0]:.2f}({vgr_t[1]:.2f}){ok(vgr_t,0.7,1.3)} "
              f"CV {cv_sl[0]:.2f} [{time.time()-t0:.0f}s]", flush=True)
