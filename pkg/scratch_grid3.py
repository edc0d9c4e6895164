"""Confirmation run: rough-u0 + strong-noise recipe (scratch)."""
import time
import numpy as np
import pstokes.diagnostics as dg
from pstokes.grids import TimeGrid
from pstokes.noise import NoiseModel
from pstokes.stepper import SchemeConfig
from scratch_grid import bump_stream_mode, slope, ops_for
from scratch_grid2 import run_ladder_u0

T = 0.01

def model_for(amp):
    return NoiseModel([(lambda k: (lambda pts: (1.0 + k) ** (-2.0) * bump_stream_mode(1 + k)(pts)))(k)
                       for k in range(8)], rule="additive", amplitude=amp)

for amp in (3.0, 4.5):
    t0 = time.time()
    t_stats, refs, cfg_r, ops_r = run_ladder_u0(T, [(8, 4), (8, 24), (8, 40), (8, 204)],
                                                (8, 1024), model_for(amp), 4, seed=5)
    taus = [T / (N + 1) for N in (4, 24, 40, 204)]
    nat_t = slope(taus, [s.natural_err for s in t_stats])
    vgr_t = slope(taus, [s.vgrad_err for s in t_stats])
    cvs = dg.temporal_oscillation(refs, cfg_r, ops_r, [TimeGrid(T, N) for N in (4, 24, 40, 204)])
    cv_sl = slope(taus, cvs)
    ok = lambda v, lo, hi: "Y" if lo <= v[0] <= hi else "n"
    print(f"amp={amp}: tau nat {nat_t[0]:.2f}({nat_t[1]:.2f}){ok(nat_t,0.7,1.3)} "
          f"vgr {vgr_t[0]:.2f}({vgr_t[1]:.2f}){ok(vgr_t,0.7,1.3)} CV {cv_sl[0]:.2f} "
          f"[{time.time()-t0:.0f}s]", flush=True)
    print("   t nat", [f"{s.natural_err:.3e}" for s in t_stats],
          "vgr", [f"{s.vgrad_err:.3e}" for s in t_stats], flush=True)

amp = 4.5
t0 = time.time()
h_stats, _, _, _ = run_ladder_u0(T, [(2, 255), (4, 255), (8, 255)], (16, 255), model_for(amp), 4, seed=9)
hs = [0.5, 0.25, 0.125]
nat_h = slope(hs, [s.natural_err for s in h_stats])
vgr_h = slope(hs, [s.vgrad_err for s in h_stats])
ok = lambda v, lo, hi: "Y" if lo <= v[0] <= hi else "n"
print(f"amp={amp} N=255: h nat {nat_h[0]:.2f}({nat_h[1]:.2f}){ok(nat_h,1.6,2.4)} "
      f"vgr {vgr_h[0]:.2f}({vgr_h[1]:.2f}){ok(vgr_h,1.6,2.4)} [{time.time()-t0:.0f}s]", flush=True)
print("   h nat", [f"{s.natural_err:.3e}" for s in h_stats],
      "vgr", [f"{s.vgrad_err:.3e}" for s in h_stats], flush=True)
