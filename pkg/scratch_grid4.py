"""Dress rehearsal of the convergence ladders at reference scale (scratch)."""
import sys
import time
import numpy as np
import pstokes.diagnostics as dg
from pstokes.grids import TimeGrid
from pstokes.noise import NoiseModel, sample_increments, sample_wiener_path
from pstokes.stepper import SchemeConfig, StepperWorkspace, initial_velocity, run_trajectory
from pstokes.tensors import PowerLawParams
from scratch_grid import bump_stream_mode, slope, ops_for
from scratch_grid2 import u0_rough

AMP = float(sys.argv[1]) if len(sys.argv) > 1 else 8.0
RUN_H = len(sys.argv) < 3 or sys.argv[2] != "tau-only"
T = 0.01
SEED = 5
NS = 4

model = NoiseModel(
    [(lambda k: (lambda pts: (1.0 + k) ** (-2.0) * bump_stream_mode(1 + k)(pts)))(k)
     for k in range(8)],
    rule="additive", amplitude=AMP,
)

t00 = time.time()
ops_r = ops_for(16)
cfg_r = SchemeConfig(params=PowerLawParams(p=2.0, kappa=0.0),
                     grid=TimeGrid(T=T, N=1024), model=model, solver="stream")
u0_r = initial_velocity(u0_rough, ops_r)
work_r = StepperWorkspace(cfg_r, ops_r)
delta = cfg_r.grid.tau / 8
t_setup = time.time() - t00

tau_specs = [(16, 4), (16, 24), (16, 40), (16, 204)]
h_specs = [(2, 1024), (4, 1024), (8, 1024)] if RUN_H else []
levels = []
for m, N in tau_specs + h_specs:
    ops_c = ops_for(m)
    cfg_c = SchemeConfig(params=cfg_r.params, grid=TimeGrid(T=T, N=N), model=model,
                         solver="stream")
    u0_c = u0_r if m == 16 else initial_velocity(u0_rough, ops_c)
    levels.append({"spec": (m, N), "ops": ops_c, "cfg": cfg_c, "u0": u0_c,
                   "work": StepperWorkspace(cfg_c, ops_c), "trajs": []})

refs = []
t_ref = t_coarse = 0.0
for i, child in enumerate(np.random.SeedSequence(SEED).spawn(NS)):
    rng = np.random.default_rng(child)
    path = sample_wiener_path(T, delta, model.n_modes, rng)
    t0 = time.time()
    tr = run_trajectory(u0_r, sample_increments(path, cfg_r.grid), cfg_r, ops_r, work_r)
    assert tr.ok
    t_ref += time.time() - t0
    refs.append(tr)
    t0 = time.time()
    for lv in levels:
        tc = run_trajectory(lv["u0"], sample_increments(path, lv["cfg"].grid),
                            lv["cfg"], lv["ops"], lv["work"])
        assert tc.ok
        lv["trajs"].append(tc)
    t_coarse += time.time() - t0
    print(f"  sample {i}: ref {t_ref:.0f}s coarse {t_coarse:.0f}s cum", flush=True)

t_err = 0.0
stats = []
for lv in levels:
    t0 = time.time()
    stats.append(dg.error_stats(lv["trajs"], refs, lv["cfg"], cfg_r, lv["ops"], ops_r,
                                with_CV=False))
    dt = time.time() - t0
    t_err += dt
    print(f"  errors {lv['spec']}: {dt:.0f}s", flush=True)

t0 = time.time()
tau_grids = [TimeGrid(T, N) for _, N in tau_specs]
cvs = dg.temporal_oscillation(refs, cfg_r, ops_r, tau_grids)
t_cv = time.time() - t0

taus = [T / (N + 1) for _, N in tau_specs]
nat_t = slope(taus, [s.natural_err for s in stats[:4]])
vgr_t = slope(taus, [s.vgrad_err for s in stats[:4]])
cv_sl = slope(taus, cvs)
ok = lambda v, lo, hi: "Y" if lo <= v[0] <= hi else "n"
print(f"amp={AMP} tau: nat {nat_t[0]:.2f}({nat_t[1]:.2f}){ok(nat_t, 0.7, 1.3)} "
      f"vgr {vgr_t[0]:.2f}({vgr_t[1]:.2f}){ok(vgr_t, 0.7, 1.3)} CV {cv_sl[0]:.2f}", flush=True)
print("   t nat", [f"{s.natural_err:.3e}" for s in stats[:4]],
      "vgr", [f"{s.vgrad_err:.3e}" for s in stats[:4]], flush=True)
print("   CV levels", [f"{c:.3e}" for c in cvs], flush=True)
if RUN_H:
    hs = [0.5, 0.25, 0.125]
    nat_h = slope(hs, [s.natural_err for s in stats[4:]])
    vgr_h = slope(hs, [s.vgrad_err for s in stats[4:]])
    print(f"amp={AMP} h:   nat {nat_h[0]:.2f}({nat_h[1]:.2f}){ok(nat_h, 1.6, 2.4)} "
          f"vgr {vgr_h[0]:.2f}({vgr_h[1]:.2f}){ok(vgr_h, 1.6, 2.4)}", flush=True)
    print("   h nat", [f"{s.natural_err:.3e}" for s in stats[4:]],
          "vgr", [f"{s.vgrad_err:.3e}" for s in stats[4:]], flush=True)

total = time.time() - t00
print(f"timing: setup {t_setup:.0f}s ref-solves {t_ref:.0f}s coarse-solves {t_coarse:.0f}s "
      f"errors {t_err:.0f}s cv {t_cv:.0f}s total {total:.0f}s", flush=True)
print(f"projected 32-sample wall: {(total - t_setup) * 8 + t_setup:.0f}s", flush=True)
