"""Rough-initial-data recipe for the convergence ladders (scratch)."""
import sys, time
import numpy as np
import pstokes.diagnostics as dg
from pstokes.grids import TimeGrid
from pstokes.meshing import alfeld_split, unit_square_mesh
from pstokes.noise import NoiseModel, sample_increments, sample_wiener_path
from pstokes.spaces import Field, assemble
from pstokes.stepper import SchemeConfig, StepperWorkspace, initial_velocity, run_trajectory
from pstokes.tensors import PowerLawParams
from scratch_grid import bump_stream_mode, make_model, slope, ops_for, run_ladder

K_INIT = 16

def u0_rough(pts):
    out = np.zeros(pts.shape)
    for k in range(1, K_INIT + 1):
        out += k ** (-1.5) * bump_stream_mode(k)(pts)
    return out

def run_ladder_u0(T, coarse_specs, ref_spec, model, n_samples, seed, delta_frac=8, u0_scale=1.0):
    m_ref, N_ref = ref_spec
    ops_r = ops_for(m_ref)
    cfg_r = SchemeConfig(params=PowerLawParams(p=2.0, kappa=0.0),
                         grid=TimeGrid(T=T, N=N_ref), model=model, solver="stream")
    u0_r = initial_velocity(lambda p: u0_scale * u0_rough(p), ops_r)
    work_r = StepperWorkspace(cfg_r, ops_r)
    delta = cfg_r.grid.tau / delta_frac
    levels = []
    for (m, N) in coarse_specs:
        ops_c = ops_for(m)
        cfg_c = SchemeConfig(params=cfg_r.params, grid=TimeGrid(T=T, N=N), model=model,
                             solver="stream")
        if m == m_ref:
            u0_c = u0_r
        else:
            u0_c = initial_velocity(lambda p: u0_scale * u0_rough(p), ops_c)
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

T = 0.01
for amp in (0.3, 1.0):
    for decay in (2.0, 2.5):
        model = NoiseModel([(lambda k: (lambda pts: (1.0 + k) ** (-decay) * bump_stream_mode(1 + k)(pts)))(k)
                            for k in range(8)], rule="additive", amplitude=amp)
        t0 = time.time()
        h_stats, _, _, _ = run_ladder_u0(T, [(2, 29), (4, 29), (8, 29)], (16, 29), model, 4, seed=9)
        hs = [0.5, 0.25, 0.125]
        nat_h = slope(hs, [s.natural_err for s in h_stats])
        vgr_h = slope(hs, [s.vgrad_err for s in h_stats])
        t_stats, refs, cfg_r, ops_r = run_ladder_u0(T, [(8, 4), (8, 24), (8, 40), (8, 204)],
                                                    (8, 1024), model, 4, seed=5)
        taus = [T / (N + 1) for N in (4, 24, 40, 204)]
        nat_t = slope(taus, [s.natural_err for s in t_stats])
        vgr_t = slope(taus, [s.vgrad_err for s in t_stats])
        cvs = dg.temporal_oscillation(refs, cfg_r, ops_r, [TimeGrid(T, N) for N in (4, 24, 40, 204)])
        cv_sl = slope(taus, cvs)
        ok = lambda v, lo, hi: "Y" if lo <= v[0] <= hi else "n"
        print(f"amp={amp} th={decay}: h nat {nat_h[0]:.2f}({nat_h[1]:.2f}){ok(nat_h,1.6,2.4)} "
              f"vgr {vgr_h[0]:.2f}({vgr_h[1]:.2f}){ok(vgr_h,1.6,2.4)} | "
              f"tau nat {nat_t[0]:.2f}({nat_t[1]:.2f}){ok(nat_t,0.7,1.3)} "
              f"vgr {vgr_t[0]:.2f}({vgr_t[1]:.2f}){ok(vgr_t,0.7,1.3)} "
              f"CV {cv_sl[0]:.2f} [{time.time()-t0:.0f}s]", flush=True)
        print("   h nat levels", [f"{s.natural_err:.3e}" for s in h_stats],
              "vgr", [f"{s.vgrad_err:.3e}" for s in h_stats], flush=True)
        print("   t nat levels", [f"{s.natural_err:.3e}" for s in t_stats],
              "vgr", [f"{s.vgrad_err:.3e}" for s in t_stats], flush=True)
