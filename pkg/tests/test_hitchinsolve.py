import json
from fractions import Fraction as Fr

import numpy as np
import pytest

from hitchinlab import hitchinsolve as hs
from hitchinlab import localmodel as lm
from hitchinlab.gaugecalc import MetricError
from hitchinlab.localmodel import LocalModelSpec, ModelError

DIAG = LocalModelSpec(1, 0, 0)


# --- grids and the residual operator


def test_polar_grid_validation():
    g = hs.PolarGrid.uniform(10, 2.0, 4)
    assert g.spacing == pytest.approx(0.2) and g.r_max == pytest.approx(2.0)
    assert g.points().shape == (10, 4)
    with pytest.raises(MetricError):
        hs.PolarGrid.uniform(10, 0.5)
    with pytest.raises(MetricError):
        hs.PolarGrid(np.array([0.1, 0.3, 0.6, 1.2]))
    with pytest.raises(MetricError):
        hs.PolarGrid.uniform(10, 2.0, 3)


def test_rank_one_flat_metric_has_zero_residual():
    g = hs.PolarGrid.uniform(50, 2.0, 1)
    H = np.ones((50, 1, 1, 1), complex)
    T = (3 * g.points() ** 2)[..., None, None]
    assert hs.hitchin_residual(H, T, g, charges=(0,)).sup == 0.0


def test_single_angle_grid_needs_charges():
    g = hs.PolarGrid.uniform(20, 2.0, 1)
    H = np.ones((20, 1, 2, 2)) * np.eye(2)
    with pytest.raises(MetricError):
        hs.hitchin_residual(H, np.zeros_like(H), g)


def test_hlim_residual_is_discretization_error_of_second_order():
    spec = LocalModelSpec(1, 1, Fr(-1, 2))
    sups = []
    for n in (40, 80, 160):
        g = hs.PolarGrid.annulus(n, 0.5, 3.0, 32)
        H = lm.hlim_field(spec, g.points(), lm.E_FRAME)
        sups.append(hs.hitchin_residual(H, lm.higgs_matrix(spec, lm.E_FRAME, g.points()), g).sup)
    assert sups[0] < 0.05
    assert sups[0] / sups[1] >= 3 and sups[1] / sups[2] >= 3


def test_residual_is_covariant_under_constant_frame_change():
    spec = LocalModelSpec(1, 1, Fr(-1, 2))
    g = hs.PolarGrid.annulus(40, 0.5, 3.0, 16)
    pts = g.points()
    H = lm.hkappa_field(0.3, 2, spec, pts)
    T = lm.higgs_matrix(spec, lm.E_FRAME, pts)
    C = np.array([[2.0, 0.3], [0.0, 0.5j]])
    Ci = np.linalg.inv(C)
    R0 = hs.hitchin_residual(H, T, g, rescale=False)
    R1 = hs.hitchin_residual(C.conj().T @ H @ C, Ci @ T @ C, g)
    assert np.allclose(R1.norm, R0.norm, rtol=1e-8, atol=1e-7 * R0.sup)


# --- h_kappa


def test_hkappa_residual_scales_like_kappa_to_the_L():
    spec = LocalModelSpec(1, 1, Fr(-1, 2))
    sups = [hs.hkappa_residual(k, 4, spec).sup for k in (0.2, 0.1, 0.05)]
    assert sups[1] / sups[0] <= 2.0**-3
    assert sups[2] / sups[1] <= 2.0**-3


# --- profiles


def test_hlim_profile_views():
    spec = LocalModelSpec(2, 1, Fr(-1, 4))
    r = np.linspace(0.3, 3.0, 28)
    prof = hs.hlim_profile(spec, r, b=1.7)
    vf = prof.v_frame()
    assert np.allclose(vf["log_p1"], 2 * np.log(1.7) + 2 * float(spec.c) * np.log(r))
    assert np.allclose(vf["log_p2"], -2 * np.log(1.7) - (2 * float(spec.c) + 2) * np.log(r))
    assert np.max(np.abs(vf["w"])) < 1e-12
    He = prof.e_frame_field(r * np.exp(0.3j))
    Q = lm.e_to_v(spec, r * np.exp(0.3j))
    Hv = np.conj(np.swapaxes(Q, -1, -2)) @ He @ Q
    assert np.allclose(Hv[:, 0, 0], 1.7**2 * r ** (2 * float(spec.c)))
    assert np.allclose(Hv[:, 1, 1], 1.7**-2 * r ** (-2 * float(spec.c) - 2))
    with pytest.raises(hs.RangeError):
        prof.e_frame_field(np.array([0.31]))


def test_profile_json_round_trip_both_encodings():
    spec = LocalModelSpec(1, 1, Fr(-1, 2))
    prof = hs.hlim_profile(spec, np.linspace(0.25, 3, 12))
    obj = json.loads(json.dumps(prof.to_json(spec)))
    back = hs.RadialMetricProfile.from_json(obj)
    assert np.allclose(back.log_a, prof.log_a) and np.allclose(back.q, prof.q)
    for k in ("log_a", "re_q", "im_q"):
        obj.pop(k)
    back = hs.RadialMetricProfile.from_json(obj)
    assert np.allclose(back.log_a, prof.log_a, atol=1e-12) and np.allclose(back.q, prof.q, atol=1e-12)


def test_restrict_and_interpolate_ranges():
    prof = hs.hlim_profile(DIAG, np.linspace(0.1, 2.0, 20))
    assert len(prof.restrict(1.0, 2.0)) == 11
    with pytest.raises(hs.RangeError):
        prof.restrict(1.0, 3.0)
    with pytest.raises(hs.RangeError):
        prof.interpolate([2.5])
    assert np.allclose(prof.interpolate([0.55, 1.234]).log_a, 0)


# --- solver


def test_solve_config_validation():
    for bad in ({"tol": 0}, {"boundary": "robin"}, {"n_radii": 3}, {"r_max": 0.5}, {"dt0": -1}):
        with pytest.raises(ValueError):
            hs.SolveConfig(**bad)
    with pytest.raises(ModelError):
        hs.solve_harmonic(LocalModelSpec(1, 1, 0), hs.SolveConfig(n_radii=50))


@pytest.mark.parametrize("boundary", ["neumann", "dirichlet"])
def test_diagonal_model_converges_to_constant_norms(boundary):
    cfg = hs.SolveConfig(n_radii=300, r_max=4.0, boundary=boundary)
    r = cfg.grid.radii
    prof, rep = hs.solve_harmonic(DIAG, cfg, initial=(0.3 * np.exp(-r**2), 0.2 * np.exp(-r**2)))
    vf = prof.v_frame()
    assert rep.converged and rep.residual_sup <= 1e-8
    assert np.ptp(np.exp(0.5 * vf["log_p1"])) <= 1e-6
    assert np.ptp(np.exp(0.5 * vf["log_p2"])) <= 1e-6
    assert np.max(np.abs(vf["log_p1"] + vf["log_p2"])) <= 1e-10
    assert np.max(np.abs(vf["w"])) <= 1e-10


def test_symmetric_solve_invariants(symmetric_coarse):
    prof, rep = symmetric_coarse
    assert rep.converged and rep.det_error <= 1e-12
    acc = [t["l2"] for t in rep.trace if t["accepted"]]
    assert all(b <= a for a, b in zip(acc, acc[1:]))
    f1, f2, g = prof.e_frame()
    assert np.all(f1 > 0) and np.all(f2 > 0) and np.all(f1 * f2 - np.abs(prof.radii * g) ** 2 > 0)
    assert json.loads(rep.dumps())["converged"] is True


def test_solution_residual_on_full_polar_grid(symmetric_coarse, symmetric_spec):
    prof, _ = symmetric_coarse
    grid, H = hs.profile_to_field(prof, 16)
    res = hs.hitchin_residual(H, hs.higgs_field(symmetric_spec, grid), grid)
    assert res.sup < 1.0  # second-order discretization error at 300 radii


def test_gauge_covariance(symmetric_spec):
    cfg = hs.SolveConfig(n_radii=200, r_max=6.0)
    p0, _ = hs.solve_harmonic(symmetric_spec, cfg)
    p1, _ = hs.solve_harmonic(symmetric_spec, cfg, frame_change=np.diag([2.0, 0.5j]))
    assert np.allclose(p0.e_frame()[0], p1.e_frame()[0], rtol=1e-8)
    assert np.allclose(p0.q, p1.q, atol=1e-8)
    with pytest.raises(ValueError):
        hs.solve_harmonic(symmetric_spec, cfg, frame_change=np.array([[1, 1], [0, 1]]))


def test_exact_decoupled_solution_residual_halves_at_second_order():
    res = []
    for n in (100, 200, 400):
        cfg = hs.SolveConfig(n_radii=n, r_max=4.0, frame_mode="cutoff")
        prof = hs.hlim_profile(DIAG, cfg.grid.radii, frame_mode="cutoff")
        res.append(np.max(hs.profile_residual(prof, DIAG, cfg)[:-1]))
    assert res[0] / res[1] >= 3 and res[1] / res[2] >= 3


def test_nonconvergence_raises_with_report(symmetric_spec):
    with pytest.raises(hs.SolveError) as info:
        hs.solve_harmonic(symmetric_spec, hs.SolveConfig(n_radii=100, r_max=6.0, max_iter=2))
    assert info.value.report is not None and not info.value.report.converged


def test_profile_residual_requires_matching_grid(symmetric_coarse, symmetric_spec):
    prof, _ = symmetric_coarse
    with pytest.raises(hs.RangeError):
        hs.profile_residual(prof, symmetric_spec, hs.SolveConfig(n_radii=301, r_max=6.0))


# --- diagnostics


def test_extract_bc_exact_on_hlim():
    spec = LocalModelSpec(1, 1, Fr(-1, 2))
    prof = hs.hlim_profile(spec, np.linspace(2.0, 5.0, 40), b=1.0)
    assert hs.extract_bc(prof, spec).b_c == pytest.approx(1.0, abs=1e-14)
    prof = hs.hlim_profile(spec, np.linspace(2.0, 5.0, 40), b=1.3)
    assert hs.extract_bc(prof, spec).b_c == pytest.approx(1.3, rel=1e-13)
    with pytest.raises(ValueError):
        hs.extract_bc(prof, spec, window=0)


def test_extract_bc_window_stability(symmetric_coarse, symmetric_spec):
    prof, _ = symmetric_coarse
    b20 = hs.extract_bc(prof, symmetric_spec, window=0.2).b_c
    b10 = hs.extract_bc(prof, symmetric_spec, window=0.1).b_c
    assert abs(b20 - b10) <= 1e-3


def test_extract_bc_rejects_unconverged_tail(symmetric_spec):
    prof, _ = hs.solve_harmonic(symmetric_spec, hs.SolveConfig(n_radii=200, r_max=1.5))
    with pytest.raises(hs.SolveError):
        hs.extract_bc(prof, symmetric_spec, window=0.5, max_spread=1e-6)


def test_decoupled_model_diagnostics_vanish():
    prof = hs.hlim_profile(DIAG, np.linspace(0.05, 8.0, 160))
    scan = hs.decoupling_scan(prof, DIAG, [1, 2, 4, 8])
    assert max(scan.values) == 0.0
    lim = hs.limit_convergence_check(prof, DIAG, 1.0, [1, 2, 4, 8])
    assert max(lim.values) < 1e-15


def test_scan_input_validation(symmetric_coarse, symmetric_spec):
    prof, _ = symmetric_coarse
    for bad in ([], [2, 1], [0, 1]):
        with pytest.raises(ValueError):
            hs.decoupling_scan(prof, symmetric_spec, bad)
    with pytest.raises(hs.RangeError):
        hs.decoupling_scan(prof, symmetric_spec, [1.0], annulus=(5.0, 9.0))


def test_dvector_pairs_match_gaugecalc():
    from hitchinlab.gaugecalc import dvector

    lx, ly, z = 0.3, -0.2, 0.1 + 0.05j
    H = np.array([[np.exp(lx), z], [np.conj(z), np.exp(ly)]])
    assert np.allclose(hs.dvector_pairs_2x2(lx, ly, z), dvector(np.eye(2), H), atol=1e-14)


def test_symmetric_scans_on_coarse_grid(symmetric_coarse, symmetric_spec):
    prof, _ = symmetric_coarse
    scan = hs.decoupling_scan(prof, symmetric_spec, [1, 2, 4, 8])
    assert scan.strictly_decreasing and scan.fit.eps > 0
    assert json.loads(json.dumps(scan.to_json()))["strictly_decreasing"] is True
    fit = hs.offdiagonal_decay_fit(prof, symmetric_spec)
    assert fit.eps > 0 and fit.r2 >= 0.99
