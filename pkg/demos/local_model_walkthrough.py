"""Harmonic metric of the symmetric local model and its large-t behaviour.

Run:  python3 demos/local_model_walkthrough.py   (a few seconds)
"""

from fractions import Fraction

from hitchinlab import hitchinsolve as hs
from hitchinlab.localmodel import LocalModelSpec

spec = LocalModelSpec(1, 1, Fraction(-1, 2))
profile, report = hs.solve_harmonic(spec, hs.SolveConfig(n_radii=1200, r_max=6.0))
print(f"solve: converged={report.converged} in {report.iterations} steps, residual {report.residual_sup:.1e}")

bc = hs.extract_bc(profile, spec)
print(f"b_c = {bc.b_c:.5f} (symmetry predicts 1), estimator spread {bc.spread:.1e}")

fit = hs.offdiagonal_decay_fit(profile, spec)
print(f"|h(v1, v2)| ~ K exp(-delta r^2): delta = {fit.eps:.3f}, R^2 = {fit.r2:.5f}")

scan = hs.decoupling_scan(profile, spec, [1, 2, 4, 8])
print("sup over 1<=|z|<=2 of |[t theta, (t theta)^*]|:", ", ".join(f"{v:.2e}" for v in scan.values))

lim = hs.limit_convergence_check(profile, spec, bc.b_c, [1, 2, 4, 8])
print("distance to the limiting metric on |z|>=1:   ", ", ".join(f"{v:.2e}" for v in lim.values))

for kappa in (0.2, 0.1, 0.05):
    print(f"h_kappa residual on the unit disc, kappa={kappa}: {hs.hkappa_residual(kappa, 4, spec).sup:.2e}")
