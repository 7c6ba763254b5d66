from fractions import Fraction as Fr

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hitchinlab import hitchinsolve as hs
from hitchinlab import localmodel as lm
from hitchinlab.gaugecalc import HermitianForm
from hitchinlab.localmodel import E_FRAME, V_FRAME, LocalModelSpec, ModelError

SPECS = [LocalModelSpec(1, 1, Fr(-1, 2)), LocalModelSpec(2, 1, Fr(-1, 4)), LocalModelSpec(3, 2, Fr(-1, 3)),
         LocalModelSpec(1, 0, 0), LocalModelSpec(2, 2, Fr(-3, 2), 1.5 - 0.5j)]

points = st.complex_numbers(min_magnitude=0.05, max_magnitude=4, allow_nan=False, allow_infinity=False)


def test_spec_defaults_and_validation():
    s = LocalModelSpec(2, 1, -0.25)
    assert s.alpha == 3 and s.c == Fr(-1, 4) and s.c2 == Fr(-3, 4)
    assert s.mode == "stable"
    assert LocalModelSpec(1, 0, 0).mode == "polystable"
    assert LocalModelSpec(1, 1, 0).mode == "semistable"
    assert LocalModelSpec(1, 1, Fr(1, 2)).mode == "unstable"
    assert LocalModelSpec.from_json(s.to_json()) == s
    for bad in [(1, 2, 0), (-1, 0, 0), (1.5, 1, 0)]:
        with pytest.raises(ModelError):
            LocalModelSpec(*bad)
    with pytest.raises(ModelError):
        LocalModelSpec(1, 1, 0, 0)


@pytest.mark.parametrize("spec", SPECS)
@settings(max_examples=40, deadline=None)
@given(z=points)
def test_frames_and_higgs_fields_agree(spec, z):
    P, Q = lm.v_to_e(spec, z), lm.e_to_v(spec, z)
    assert np.allclose(P @ Q, np.eye(2), atol=1e-12)
    Tv, Te = lm.higgs_matrix(spec, V_FRAME, z), lm.higgs_matrix(spec, E_FRAME, z)
    assert np.allclose(Q @ Tv @ P, Te, atol=1e-9 * max(1, np.abs(Te).max()))
    assert abs(np.trace(Te)) < 1e-12 * max(1, np.abs(Te).max())
    assert np.allclose(Tv, np.diag([spec.alpha * z**spec.m, -spec.alpha * z**spec.m]))


def test_e_frame_lower_left_constant_when_ell_equals_m():
    spec = LocalModelSpec(2, 2, Fr(-1))
    for z in (0.3, 1 + 1j, -2.0):
        assert lm.higgs_matrix(spec, E_FRAME, z)[1, 0] == -2 * spec.alpha


def test_v_frame_singular_at_origin():
    with pytest.raises(ModelError):
        lm.e_to_v(LocalModelSpec(1, 1, Fr(-1, 2)), 0)
    with pytest.raises(ModelError):
        lm.higgs_matrix(SPECS[0], "w", 1.0)


@pytest.mark.parametrize("spec", SPECS)
def test_hlim_metric_examples(spec):
    for z in (0.4, 1.3j, -2.5 + 1j):
        h = lm.hlim_metric(spec, z)
        assert h.entries[0, 1] == 0
        assert np.sqrt(h.det()) == pytest.approx(abs(z) ** -spec.ell, rel=1e-12)
        assert np.allclose(lm.hlim_field(spec, z), h.entries)
    assert np.allclose(lm.hlim_metric(LocalModelSpec(1, 0, 0), 0.7).entries, np.eye(2))
    with pytest.raises(ModelError):
        lm.hlim_metric(spec, 0)


def test_cutoff_shape():
    r = np.linspace(0, 1.5, 301)
    rho, d1, d2 = lm.cutoff(r, derivatives=True)
    assert np.all(rho[r <= 0.5] == 1) and np.all(rho[r >= 1] == 0)
    assert np.all(np.diff(rho) <= 0)
    fd = np.gradient(rho, r)
    assert np.max(np.abs(fd[1:-1] - d1[1:-1])) < 0.05


@pytest.mark.parametrize("spec", SPECS[:3])
def test_hkappa_is_decoupled_outside_unit_disc(spec):
    kappa, L = 0.3, 4
    z = np.array([1.0, 1.5j, -2 - 1j, 3 * np.exp(0.4j)])
    He = lm.hkappa_field(kappa, L, spec, z)
    Q = lm.e_to_v(spec, z)
    Hv = np.conj(np.swapaxes(Q, -1, -2)) @ He @ Q
    want = np.zeros_like(Hv)
    want[:, 0, 0] = kappa ** (-2 * L)
    want[:, 1, 1] = kappa ** (2 * L) * np.abs(z) ** (-2 * spec.ell)
    assert np.allclose(Hv, want, rtol=1e-12, atol=1e-12 * kappa ** (-2 * L))


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 0.99), st.integers(1, 6), points)
def test_hkappa_positive_definite(kappa, L, z):
    H = lm.hkappa_metric(kappa, L, SPECS[0], z)
    assert isinstance(H, HermitianForm)
    U = lm.hkappa_frame(kappa, SPECS[0], z)
    G = U.conj().T @ H.entries @ U
    assert np.allclose(G, np.diag([kappa ** (-2 * L), kappa ** (2 * L)]), rtol=1e-9, atol=1e-9 * kappa ** (-2 * L))


def test_hkappa_validation():
    with pytest.raises(ModelError):
        lm.hkappa_field(1.0, 4, SPECS[0], 0.5)
    with pytest.raises(ModelError):
        lm.hkappa_field(0.5, 0, SPECS[0], 0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 10), st.floats(0.1, 10))
def test_psi_gamma_group_law(g1, g2):
    h = lm.hlim_metric(SPECS[1], 1.7)
    assert lm.psi_gamma(h, 1.0) == h
    assert lm.psi_gamma(h, g1).det() == pytest.approx(h.det(), rel=1e-12)
    assert np.allclose(lm.psi_gamma(lm.psi_gamma(h, g1), g2).entries, lm.psi_gamma(h, g1 * g2).entries, rtol=1e-12)
    assert np.allclose(lm.psi_gamma(h.entries, g1), lm.psi_gamma(h, g1).entries)


def test_limiting_rescale_factor_examples():
    assert lm.limiting_rescale_factor(LocalModelSpec(1, 0, 0), 37.0, 1.0) == 1.0
    spec = LocalModelSpec(3, 2, Fr(-1))
    assert lm.limiting_rescale_factor(spec, 55.0, 4.0) == pytest.approx(0.25)
    val = lm.limiting_rescale_factor(LocalModelSpec(1, 1, Fr(-1, 4)), 16.0, 2.0)
    assert val == pytest.approx(0.5 * 16 ** (-1 / 8), rel=1e-15)
    assert np.log(val) == pytest.approx(-np.log(2) - np.log(16) / 8, rel=1e-15)
    with pytest.raises(ModelError):
        lm.limiting_rescale_factor(spec, -1.0, 1.0)


def test_tau_for_t():
    spec = LocalModelSpec(2, 1, Fr(-1, 2))
    assert lm.tau_for_t(spec, 64.0) ** 6 == pytest.approx(64.0)


def test_rescale_identity_and_unit_modulus():
    spec = SPECS[0]
    prof = hs.hlim_profile(spec, np.linspace(0.5, 4, 50))
    same = lm.rescale_phi_tau(prof, spec, np.exp(0.7j))
    assert np.allclose(same.log_a, prof.log_a) and np.allclose(same.radii, prof.radii)
    with pytest.raises(ModelError):
        lm.rescale_phi_tau(prof, spec, 0)


@pytest.mark.parametrize("t", [2.0, 16.0])
def test_rescaled_v1_norm_picks_up_power_of_t(t):
    spec = LocalModelSpec(1, 1, Fr(-1, 4))
    prof = hs.hlim_profile(spec, np.linspace(1.0, 5.0, 81))
    out = lm.rescale_phi_tau(prof, spec, lm.tau_for_t(spec, t))
    expo = (spec.ell + 2 * float(spec.c)) / (2 * (spec.m + 1))
    want = 2 * (expo * np.log(t) + float(spec.c) * np.log(out.radii))
    assert np.allclose(out.v_frame()["log_p1"], want, atol=1e-12)


def test_radial_profile_is_rotation_invariant():
    spec = SPECS[0]
    prof = hs.hlim_profile(spec, np.linspace(0.5, 3, 40))
    assert lm.radial_model_phase_check(spec, prof, 1.1) < 1e-12
