"""Calibration on true ladder shapes (scratch, deleted before commit)."""
import sys, time
import numpy as np
import pstokes.diagnostics as dg
from pstokes.grids import TimeGrid
from pstokes.meshing import alfeld_split, unit_square_mesh
from pstokes.noise import NoiseModel, sample_increments, sample_wiener_path
from pstokes.spaces import Field, assemble
from pstokes.stepper import SchemeConfig, StepperWorkspace, initial_velocity, run_trajectory
from pstokes.tensors import PowerLawParams

T = float(__import__("os").environ.get("SCRATCH_T", "0.002"))

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

U0 = bump_stream_mode(0)

def make_model(M, decay, amplitude, rule="additive"):
    fields = [(lambda k: (lambda pts: (1.0 + k) ** (-decay) * bump_stream_mode(1 + k)(pts)))(k)
              for k in range(M)]
    return NoiseModel(fields, rule=rule, amplitude=amplitude)

def slope(xs, ys):
    xs, ys = np.log(np.asarray(xs)), np.log(np.asarray(ys))
    A = np.vstack([xs, np.ones_like(xs)]).T
    coef, *_ = np.linalg.lstsq(A, ys, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - ys) ** 2)))
    return float(coef[0]), resid

def build_level(m, N, model, u0_scale, ops=None):
    if ops is None:
        ops = assemble(alfeld_split(unit_square_mesh(m)))
    cfg = SchemeConfig(params=PowerLawParams(p=2.0, kappa=0.0), grid=TimeGrid(T=T, N=N),
                       model=model, solver="stream")
    u0 = initial_velocity(U0, ops)
    u0 = Field("velocity", u0.coeffs * u0_scale)
    return ops, cfg, u0, StepperWorkspace(cfg, ops)

def ladder(coarse_specs, ref_spec, model, n_samples, seed, delta_frac=8, u0_scale=float(__import__("os").environ.get("SCRATCH_U0", "0.0")),
           with_cv=False):
    m_ref, N_ref = ref_spec
    ops_r, cfg_r, u0_r, work_r = build_level(m_ref, N_ref, model, u0_scale)
    delta = cfg_r.grid.tau / delta_frac
    levels = [build_level(m, N, model, u0_scale, ops=ops_r if m == m_ref else None)
              for (m, N) in coarse_specs]
    refs, coarses = [], [[] for _ in levels]
    for child in np.random.SeedSequence(seed).spawn(n_samples):
        rng = np.random.default_rng(child)
        path = sample_wiener_path(T, delta, model.n_modes, rng)
        tr = run_trajectory(u0_r, sample_increments(path, cfg_r.grid), cfg_r, ops_r, work_r)
        assert tr.ok
        refs.append(tr)
        for lv, (ops_c, cfg_c, u0_c, work_c) in enumerate(levels):
            tc = run_trajectory(u0_c, sample_increments(path, cfg_c.grid), cfg_c, ops_c, work_c)
            assert tc.ok
            coarses[lv].append(tc)
    out = []
    for lv, (ops_c, cfg_c, u0_c, work_c) in enumerate(levels):
        es = dg.error_stats(coarses[lv], refs, cfg_c, cfg_r, ops_c, ops_r, with_CV=with_cv)
        out.append(es)
    return out, refs, cfg_r, ops_r

which = sys.argv[1] if len(sys.argv) > 1 else "all"

if which in ("tau", "all"):
    print(f"=== tau-ladder T={T}, m=4 fixed, ref N=224 ===")
    t0 = time.time()
    for label, model in [("smooth M=2", make_model(2, 0.0, 1.0)),
                         ("rough M=8 k^-1.5", make_model(8, 1.5, 1.0))]:
        stats, refs, cfg_r, ops_r = ladder([(4, 4), (4, 8), (4, 14), (4, 24)], (4, 224),
                                           model, 4, seed=3)
        taus = [T / (N + 1) for N in (4, 8, 14, 24)]
        nat = [s.natural_err for s in stats]
        vgr = [s.vgrad_err for s in stats]
        print(f"{label}: natural {nat}")
        print(f"  tau-slopes natural {slope(taus, nat)} vgrad {slope(taus, vgr)}")
        cvs = dg.temporal_oscillation(refs, cfg_r, ops_r, [TimeGrid(T, N) for N in (4, 8, 14, 24)])
        print(f"  C_V {[float(c) for c in cvs]} slope {slope(taus, cvs)}")
    print("time:", time.time() - t0)

if which in ("h", "all"):
    print(f"=== h-ladder T={T}, N=29 fixed, m in 2,4,8 vs ref m=16 ===")
    for decay in [1.5, 2.0]:
        t0 = time.time()
        model = make_model(8, decay, 1.0)
        stats, refs, cfg_r, ops_r = ladder([(2, 29), (4, 29), (8, 29)], (16, 29),
                                           model, 4, seed=9)
        hs = [0.5, 0.25, 0.125]
        nat = [s.natural_err for s in stats]
        vgr = [s.vgrad_err for s in stats]
        print(f"k^-{decay}: natural {nat}")
        print(f"  h-slopes natural {slope(hs, nat)} vgrad {slope(hs, vgr)}  ({time.time()-t0:.0f}s)")
        print(f"  vgrad {vgr}")
        print(f"  C_Linf {[f'{s.C_Linf:.2e}' for s in stats]} C_best {[f'{s.C_best:.2e}' for s in stats]} C_G {[f'{s.C_G:.2e}' for s in stats]}")
