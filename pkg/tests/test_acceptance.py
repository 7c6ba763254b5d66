"""Acceptance criteria, one test each.

Every test records a line through ``acceptance_record`` before asserting, so
the terminal summary lists all ten verdicts with the measured numbers even
when one of them fails.
"""

import time
from fractions import Fraction

import numpy as np

from hitchinlab import gaugecalc as gc
from hitchinlab import hitchinsolve as hs
from hitchinlab import parweights as pw
from hitchinlab import wkbtransport as wk
from hitchinlab.localmodel import LocalModelSpec

# a fixed constant for the uniform bound of the gauge sweep
GAUGE_BOUND = 10.0
# uniform bound for the sup-norm ratio of I0 across t
I0_BOUND = 2.0


def _clock():
    start = time.perf_counter()
    return lambda: time.perf_counter() - start


def test_criterion_01_weight_calculus(acceptance_record):
    elapsed = _clock()
    equal = [pw.spec_from_pairs([(3, 2), (2, 1), (4, 3)], 2, 4, 4), pw.spec_from_pairs([(1, 1), (2, 2)], 1, 2, 2),
             pw.spec_from_pairs([(5, 4), (1, 1), (1, 1)], -2, 2, 2)]
    ok_a = True
    for spec in equal:
        wa = pw.weights(spec)
        ok_a &= wa.a_star == 0 and all(wa.weight1[z.label] == wa.weight2[z.label] == Fraction(z.ell, 2)
                                       for z in spec.zeros)
    ok_b = True
    for n in (2, 4, 6, 10):
        wa = pw.weights(pw.spec_from_pairs([(1, 1)] * n, 0, n // 2, n // 2))
        ok_b &= set(wa.weight1.values()) == set(wa.weight2.values()) == {Fraction(1, 2)}
    two = pw.spec_from_pairs([(3, 3), (1, 1)], 0, 1, 3)
    a = pw.solve_a(two)
    oracle = pw.bisection_a(two)
    ok_c = a == Fraction(1, 6) and oracle <= a < oracle + two.a_max / 10**6
    rng = np.random.default_rng(2024)
    ok_d = 0
    for _ in range(1000):
        spec = pw.random_stable_spec(rng)
        wa = pw.weights(spec)
        ok_d += wa.degree1 == wa.degree2 == spec.half_degree
    secs = elapsed()
    passed = ok_a and ok_b and ok_c and ok_d == 1000 and secs < 5
    acceptance_record(1, passed, f"a*={a} (oracle cell [{float(oracle):.7f}, +1e-6 a_max)), equal-degree {ok_a}, "
                                 f"simple zeros {ok_b}, degree rule {ok_d}/1000, {secs:.2f}s")
    assert passed


def test_criterion_02_singular_perturbation(acceptance_record):
    elapsed = _clock()
    worst_res, ratios, worst_B = 0.0, [], 0.0
    for r in (2, 3):
        size = 0.05 * np.sqrt(2) / np.sqrt(r * (r - 1))
        for k in range(3):
            base = wk.random_ordered_path(np.random.default_rng(100 * r + k), r, 2000, B_size=size)
            worst_B = max(worst_B, base.sup_B())
            for t in (1, 10, 100, 1000):
                g = wk.solve_gauge(base.with_t(t))
                worst_res = max(worst_res, g.residual)
                ratios.append(g.bound_ratio())
    secs = elapsed()
    passed = worst_B <= 0.05 and worst_res <= 1e-9 and max(ratios) <= GAUGE_BOUND and secs < 30
    acceptance_record(2, passed, f"max residual {worst_res:.2e} (<=1e-9), bound ratio in "
                                 f"[{min(ratios):.3f}, {max(ratios):.3f}] (<= {GAUGE_BOUND:g}), "
                                 f"max |B|_0 {worst_B:.4f}, 24 solves, {secs:.1f}s")
    assert passed


def _offdiag_basis(s):
    """Eight off-diagonal basis functions: 1, cos, sin, cos 2 in each corner."""
    modes = [np.ones_like(s), np.cos(np.pi * s), np.sin(np.pi * s), np.cos(2 * np.pi * s)]
    E = np.zeros((len(s), 2, 2, 8), complex)
    for j, (a, b) in enumerate([(0, 1), (1, 0)]):
        for m, f in enumerate(modes):
            E[:, a, b, 4 * j + m] = f
    return E


def _sup_of_combinations(M, coeff, probe=2000):
    """Exact ``max_n |M[n] @ coeff[:, j]|`` for every column ``j``.

    Rows whose triangle bound ``sum_k |M[n, k]| * max_k |coeff[k, j]|`` stays
    below a value already attained cannot hold the maximum, so only the
    remaining rows are multiplied out.
    """
    row = np.sum(np.abs(M), axis=1)
    cmax = np.max(np.abs(coeff), axis=0)
    top = np.argpartition(row, -min(probe, len(row)))[-probe:]
    floor = np.max(np.abs(M[top] @ coeff), axis=0)
    rows = M[row >= np.min(floor / cmax)]
    out = floor
    for i in range(0, len(rows), 50000):
        out = np.maximum(out, np.max(np.abs(rows[i:i + 50000] @ coeff), axis=0))
    return out


def test_criterion_03_operator_duality(acceptance_record):
    # D0 and I0 are linear, so 100 random functions are random combinations
    # of a fixed basis and their errors follow from the basis images.  The
    # sup norms of Y and I0 Y are taken on the 2001 base nodes; for Y this
    # can only enlarge the measured relative error.
    elapsed = _clock()
    rng = np.random.default_rng(7)
    base = wk.random_ordered_path(rng, 2, 2000)
    coeff = rng.normal(size=(8, 100)) + 1j * rng.normal(size=(8, 100))
    worst, ratios = 0.0, []
    for t in (0.0, 1.0, 1e2, 1e4):
        conn, _ = wk.resolve(base.with_t(t))
        E = _offdiag_basis(conn.nodes)
        IE = wk.apply_I0(E, conn)
        R = (wk.apply_D0(IE, conn) - E).reshape(-1, 8)
        stride = (len(conn.nodes) - 1) // 2000
        ysup = np.max(np.abs(E[::stride].reshape(-1, 8) @ coeff), axis=0)
        isup = np.max(np.abs(IE[::stride].reshape(-1, 8) @ coeff), axis=0)
        err = _sup_of_combinations(R, coeff)
        worst = max(worst, float(np.max(err / ysup)))  # functions scaled to sup norm 1
        ratios.append(float(np.max(isup / ysup)))
    secs = elapsed()
    passed = worst <= 1e-8 and max(ratios) <= I0_BOUND and secs < 10
    acceptance_record(3, passed, f"max |D0 I0 Y - Y|_0 {worst:.2e} (<=1e-8, |Y|_0=1), I0 ratio per t "
                                 f"{', '.join(f'{x:.2e}' for x in ratios)} (<= {I0_BOUND:g}), {secs:.1f}s")
    assert passed


def test_criterion_04_wkb(acceptance_record):
    elapsed = _clock()
    conn = wk.PathConnectionData.constant([-1.0, 1.0], [0, 0], [[0, 0.01], [0.01, 0]], 2000)
    rep = wk.wkb_compare(conn, [4, 8, 16, 32])
    e = rep.errors
    factors = [a / b for a, b in zip(e, e[1:])]
    c10 = conn.with_t(10.0)
    gauged = wk.parallel_transport(c10)
    direct = wk.parallel_transport(c10, mode="direct")
    rel = float(np.linalg.norm(gauged - direct) / np.linalg.norm(direct))
    secs = elapsed()
    passed = min(factors) >= 2 and rel <= 1e-7 and secs < 30
    acceptance_record(4, passed, f"errors {', '.join(f'{x:.2e}' for x in e)}, factors "
                                 f"{', '.join(f'{x:.2f}' for x in factors)} (>=2), gauged vs direct {rel:.1e} "
                                 f"(<=1e-7), {secs:.1f}s")
    assert passed


def test_criterion_05_solver_sanity(acceptance_record):
    elapsed = _clock()
    spec = LocalModelSpec(1, 0, 0)
    cfg = hs.SolveConfig(n_radii=300, r_max=4.0)
    r = cfg.grid.radii
    prof, rep = hs.solve_harmonic(spec, cfg, initial=(0.3 * np.exp(-r**2), 0.2 * np.exp(-r**2)))
    vf = prof.v_frame()
    spread = max(np.ptp(np.exp(0.5 * vf["log_p1"])), np.ptp(np.exp(0.5 * vf["log_p2"])))
    res = []
    for n in (100, 200, 400):
        c = hs.SolveConfig(n_radii=n, r_max=4.0, frame_mode="cutoff")
        exact = hs.hlim_profile(spec, c.grid.radii, frame_mode="cutoff")
        res.append(float(np.max(hs.profile_residual(exact, spec, c)[:-1])))
    halving = [a / b for a, b in zip(res, res[1:])]
    secs = elapsed()
    passed = rep.converged and rep.residual_sup <= 1e-8 and spread <= 1e-6 and min(halving) >= 3 and secs < 60
    acceptance_record(5, passed, f"residual {rep.residual_sup:.1e} (<=1e-8), norm spread {spread:.1e} (<=1e-6), "
                                 f"halving ratios {', '.join(f'{x:.2f}' for x in halving)} (>=3), {secs:.1f}s")
    assert passed


def test_criterion_06_symmetric_model(acceptance_record, symmetric_spec):
    elapsed = _clock()
    prof, rep = hs.solve_harmonic(symmetric_spec, hs.SolveConfig(n_radii=2400, r_max=6.0))
    bc = hs.extract_bc(prof, symmetric_spec)
    fit = hs.offdiagonal_decay_fit(prof, symmetric_spec)
    secs = elapsed()
    passed = abs(bc.b_c - 1) <= 1e-3 and fit.eps > 0 and fit.r2 >= 0.99 and secs < 120
    acceptance_record(6, passed, f"b_c {bc.b_c:.6f} (1 +- 1e-3), delta {fit.eps:.3f} > 0, R^2 {fit.r2:.5f} "
                                 f"(>=0.99), residual {rep.residual_sup:.1e}, {secs:.1f}s")
    assert passed


def test_criterion_07_decoupling(acceptance_record, symmetric_spec, symmetric_solution):
    elapsed = _clock()
    prof, _ = symmetric_solution
    scan = hs.decoupling_scan(prof, symmetric_spec, [1, 2, 4, 8], (1.0, 2.0))
    secs = elapsed()
    passed = scan.strictly_decreasing and scan.fit.eps > 0 and scan.fit.r2 >= 0.95 and secs < 60
    acceptance_record(7, passed, f"sup bracket {', '.join(f'{x:.2e}' for x in scan.values)}, eps {scan.fit.eps:.3f}, "
                                 f"R^2 {scan.fit.r2:.4f} (>=0.95), {secs:.1f}s after the shared solve")
    assert passed


def test_criterion_08_limit_convergence(acceptance_record, symmetric_spec, symmetric_solution):
    elapsed = _clock()
    prof, _ = symmetric_solution
    bc = hs.extract_bc(prof, symmetric_spec)
    scan = hs.limit_convergence_check(prof, symmetric_spec, bc.b_c, [1, 2, 4, 8], 1.0)
    secs = elapsed()
    passed = scan.strictly_decreasing and scan.fit.eps > 0 and secs < 60
    acceptance_record(8, passed, f"sup distance {', '.join(f'{x:.2e}' for x in scan.values)}, eps {scan.fit.eps:.3f}"
                                 f" > 0, {secs:.1f}s after the shared solve")
    assert passed


def test_criterion_09_hkappa_scaling(acceptance_record, symmetric_spec):
    elapsed = _clock()
    L = 4
    sups = {k: hs.hkappa_residual(k, L, symmetric_spec).sup for k in (0.2, 0.1, 0.05)}
    ratios = [sups[k / 2] / sups[k] for k in (0.2, 0.1)]
    secs = elapsed()
    passed = max(ratios) <= 2.0 ** -(L - 1) and secs < 30
    acceptance_record(9, passed, f"ratios {', '.join(f'{x:.4f}' for x in ratios)} (<= {2.0 ** -(L - 1)}), "
                                 f"{secs:.2f}s")
    assert passed


def test_criterion_10_gaugecalc_properties(acceptance_record):
    elapsed = _clock()
    rng = np.random.default_rng(10)
    worst = {"antisymmetry": 0.0, "sum rule": 0.0, "singular exponents": 0.0, "projectors": 0.0}
    for _ in range(1000):
        r = int(rng.integers(1, 6))
        h1, h2 = gc.random_metric(rng, r, 2.0), gc.random_metric(rng, r, 2.0)
        k12, k21 = gc.dvector(h1, h2), gc.dvector(h2, h1)
        worst["antisymmetry"] = max(worst["antisymmetry"], np.max(np.abs(k12 + k21[::-1])))
        worst["sum rule"] = max(worst["sum rule"], abs(k12.sum() - 0.5 * np.log(h2.det() / h1.det())))
        f = rng.normal(size=(r, r)) + 1j * rng.normal(size=(r, r))
        got = gc.singular_exponents(f, h1, h2)
        worst["singular exponents"] = max(worst["singular exponents"],
                                          np.max(np.abs(got - gc.dvector(h1, gc.pullback(f, h2)))))
        q = int(rng.integers(2, 6))
        V = np.eye(q) + 0.3 * (rng.normal(size=(q, q)) + 1j * rng.normal(size=(q, q)))
        eig = np.arange(q) * 3.0 + rng.uniform(-0.5, 0.5, size=q)
        fam = gc.spectral_projectors(V @ np.diag(eig) @ np.linalg.inv(V))
        worst["projectors"] = max(worst["projectors"], fam.check(tol=np.inf))
    secs = elapsed()
    passed = max(worst.values()) <= 1e-10 and secs < 10
    acceptance_record(10, passed, ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
                      + f" (<=1e-10, 1000 each), {secs:.1f}s")
    assert passed
