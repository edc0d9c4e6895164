"""Mini convergence ladders to calibrate the data recipe (scratch, deleted).

Measures tau- and h-slopes of natural_err for several noise spectra and
amplitudes, the C_V ladder slope, and an even-step-ratio smoke test.
"""

import sys
import time

import numpy as np

import pstokes.diagnostics as dg
from pstokes.grids import TimeGrid
from pstokes.meshing import alfeld_split, unit_square_mesh
from pstokes.noise import NoiseModel, sample_increments, sample_wiener_path
from pstokes.spaces import assemble, norms
from pstokes.stepper import SchemeConfig, StepperWorkspace, initial_velocity, run_trajectory
from pstokes.tensors import PowerLawParams


def bump_stream_mode(k: int):
    """Divergence-free curl of (xy(1-x)(1-y))^2 cos(pi k x) cos(pi k y)."""

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
    fields = [
        (lambda k: (lambda pts: (1.0 + k) ** (-decay) * bump_stream_mode(1 + k)(pts)))(k)
        for k in range(M)
    ]
    return NoiseModel(fields, rule=rule, amplitude=amplitude)


def ops_for(m):
    return assemble(alfeld_split(unit_square_mesh(m)))


def config_for(ops, N, model, p=2.0, u0_scale=1.0, T=1.0):
    grid = TimeGrid(T=T, N=N)
    cfg = SchemeConfig(params=PowerLawParams(p=p, kappa=0.0), grid=grid, model=model)
    u0 = initial_velocity(U0, ops)
    from pstokes.spaces import Field

    u0 = Field("velocity", u0.coeffs * u0_scale)
    return cfg, u0


def coupled_ladder(ops_levels, N_levels, ops_ref, N_ref, model, n_samples, seed,
                   delta_frac=4, u0_scale=1.0):
    """Run coupled coarse/reference ensembles; return per-level ErrorStats."""
    grid_ref = TimeGrid(T=1.0, N=N_ref)
    cfg_ref, u0_ref = config_for(ops_ref, N_ref, model, u0_scale=u0_scale)
    work_ref = StepperWorkspace(cfg_ref, ops_ref)
    delta = grid_ref.tau / delta_frac

    levels = []
    for ops_c, N_c in zip(ops_levels, N_levels):
        cfg_c, u0_c = config_for(ops_c, N_c, model, u0_scale=u0_scale)
        levels.append((ops_c, cfg_c, u0_c, StepperWorkspace(cfg_c, ops_c), []))

    ref_trajs = []
    for child in np.random.SeedSequence(seed).spawn(n_samples):
        rng = np.random.default_rng(child)
        path = sample_wiener_path(1.0, delta, model.n_modes, rng)
        inc_ref = sample_increments(path, grid_ref)
        tr = run_trajectory(u0_ref, inc_ref, cfg_ref, ops_ref, work_ref)
        assert tr.ok
        ref_trajs.append(tr)
        for ops_c, cfg_c, u0_c, work_c, lst in levels:
            inc_c = sample_increments(path, cfg_c.grid)
            tc = run_trajectory(u0_c, inc_c, cfg_c, ops_c, work_c)
            assert tc.ok
            lst.append(tc)

    out = []
    for ops_c, cfg_c, u0_c, work_c, lst in levels:
        es = dg.error_stats(lst, ref_trajs, cfg_c, cfg_ref, ops_c, ops_ref, with_CV=False)
        out.append(es)
    return out, ref_trajs, cfg_ref


def slope(xs, ys):
    xs, ys = np.log(np.asarray(xs)), np.log(np.asarray(ys))
    A = np.vstack([xs, np.ones_like(xs)]).T
    coef, res, *_ = np.linalg.lstsq(A, ys, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - ys) ** 2)))
    return coef[0], resid


which = sys.argv[1] if len(sys.argv) > 1 else "all"

if which in ("tau", "all"):
    print("=== K. tau-ladder (m=4 fixed), smooth M=2 ===")
    t0 = time.time()
    ops4 = ops_for(4)
    N_levels = [4, 8, 14, 24]  # N+1 in {5,9,15,25}, ratios 45,25,15,9 odd
    for amp, scale in [(0.1, 1.0), (1.0, 0.1)]:
        model = make_model(2, 0.0, amp)
        stats, ref_trajs, cfg_ref = coupled_ladder(
            [ops4] * len(N_levels), N_levels, ops4, 224, model, 4, seed=3, u0_scale=scale
        )
        taus = [1.0 / (N + 1) for N in N_levels]
        nat = [s.natural_err for s in stats]
        vgr = [s.vgrad_err for s in stats]
        print(f"amp={amp} u0x{scale}: natural {nat}")
        print(f"    tau-slope natural: {slope(taus, nat)} vgrad: {slope(taus, vgr)}")
        print(f"    C_init {[f'{s.C_init:.2e}' for s in stats]} C_G {[f'{s.C_G:.2e}' for s in stats]}")
        if amp == 1.0:
            cvs = dg.temporal_oscillation(ref_trajs, cfg_ref, ops4, [TimeGrid(1.0, N) for N in N_levels])
            print(f"    C_V ladder: {cvs} slope {slope(taus, cvs)}")
    print("time:", time.time() - t0)

if which in ("h", "all"):
    print("=== L. h-ladder (N=63 fixed, ref m=8), recipes ===")
    t0 = time.time()
    ops2, ops4b, ops8 = ops_for(2), ops_for(4), ops_for(8)
    hs = [1 / 2, 1 / 4]
    for label, M, decay, amp in [
        ("smooth M=2", 2, 0.0, 1.0),
        ("rough M=8 k^-1", 8, 1.0, 1.0),
        ("rough M=8 k^-1.5", 8, 1.5, 1.0),
        ("rough M=8 k^-2", 8, 2.0, 1.0),
    ]:
        model = make_model(M, decay, amp)
        stats, _, _ = coupled_ladder([ops2, ops4b], [63, 63], ops8, 63, model, 4, seed=9,
                                     u0_scale=0.1)
        nat = [s.natural_err for s in stats]
        vgr = [s.vgrad_err for s in stats]
        s_n, _ = slope(hs, nat)
        s_v, _ = slope(hs, vgr)
        print(f"{label}: natural {nat} h-slope {s_n:.2f}; vgrad slope {s_v:.2f}")
        print(f"    C_init {[f'{s.C_init:.2e}' for s in stats]} C_Linf {[f'{s.C_Linf:.2e}' for s in stats]} C_best {[f'{s.C_best:.2e}' for s in stats]}")
    print("time:", time.time() - t0)

if which in ("even", "all"):
    print("=== N. even step-ratio smoke (N_ref+1=40) ===")
    ops4 = ops_for(4)
    model = make_model(2, 0.0, 1.0)
    stats, _, _ = coupled_ladder([ops4] * 3, [4, 9, 19], ops4, 39, model, 2, seed=13,
                                 delta_frac=4, u0_scale=0.1)
    nat = [s.natural_err for s in stats]
    print("natural:", nat, "monotone decreasing:", nat[0] > nat[1] > nat[2])
