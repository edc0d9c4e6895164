"""Capture full-precision frozen values for test_diagnostics.py (scratch)."""
import numpy as np
import pstokes.diagnostics as dg
from scratch_diag import build, u0_fn, make_model
from pstokes.noise import sample_increments
from pstokes.spaces import interpolate_velocity, norms
from pstokes.stepper import initial_velocity, run_trajectory

# C. deterministic p=2 energy numbers
ops0, grid0, config0 = build(m=2, N=8, model=None)
u00 = initial_velocity(u0_fn, ops0)
inc0 = sample_increments(np.random.default_rng(0), grid0, n_modes=0)
traj0 = run_trajectory(u00, inc0, config0, ops0)
stats0 = dg.stability_stats([traj0], None, config0, ops0)
print("U0_SQ =", repr(norms(u00, "L2", ops0) ** 2))
print("E_MAX =", repr(stats0.e_max))
print("DISSIPATION =", repr(stats0.dissipation))
print("BESOV_U =", repr(stats0.besov_u))
print("BESOV_U_STRONG =", repr(stats0.besov_u_strong))

# F. cross-mesh quadrature deviation
from pstokes.meshing import alfeld_split, unit_square_mesh
from pstokes.spaces import assemble
ops_e, _, _ = build(m=2, N=6, model=None)
ops4 = assemble(alfeld_split(unit_square_mesh(4)))
v2 = interpolate_velocity(u0_fn, ops_e)
flat = dg._velocity_qp_flat(v2.coeffs, ops_e, ops4)
w2v = dg._qp_weight_vector(ops4, 2)
cross_sq = float(np.sum(flat * flat * w2v))
native_sq = norms(v2, "L2", ops_e) ** 2
print("CROSS_REL_DEV =", repr(abs(cross_sq - native_sq) / native_sq))

# I. extrapolation frozen margins
ops_p, grid_p, config_p = build(m=2, N=8, model=make_model(n_modes=2, amplitude=0.3, rule="bounded_lipschitz"))
u0p = initial_velocity(u0_fn, ops_p)
rep = dg.extrapolation_check(u0p, config_p, ops_p, delta=grid_p.tau / 8, n_samples=1000, seed=21)
print("XC_C_MEASURED =", repr(rep.C_measured))
print("XC_DOM_MARGIN =", repr(rep.domination_margin))
print("XC_DOM_SIGMA =", repr(rep.domination_sigma))
print("XC_COR_MARGIN =", repr(rep.corollary_margin))
print("XC_COR_SIGMA =", repr(rep.corollary_sigma))
print("XC_MEAN_X =", repr(rep.mean_X_final))
print("XC_MEAN_Y =", repr(rep.mean_Y_final))
