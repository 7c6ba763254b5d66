"""Rank-2 local models on the plane.

The model ``(m, ell, c, alpha)`` lives on ``V = O v1 + O v2`` with Higgs field
``theta = diag(alpha z^m, -alpha z^m) dz`` in the v-frame and the lattice
generated by

    e1 = v1 + v2,      e2 = z^ell v2.

Frame conversions use the convention ``e = v . P`` (columns of ``P`` hold the
v-coordinates of e1, e2), so a Gram matrix transforms as ``H_e = P^H H_v P``
and an endomorphism as ``A_e = P^{-1} A_v P``.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Union

import numpy as np
from scipy.special import expit

from .gaugecalc import HermitianForm, MetricError
from .parweights import STABLE, SEMISTABLE, fraction_from_json, fraction_to_json, stability_check

V_FRAME = "v"
E_FRAME = "e"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class LocalModelSpec:
    m: int
    ell: int
    c: Fraction
    alpha: complex = None  # defaults to m + 1

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 0:
            raise ModelError("m must be a nonnegative integer")
        if int(self.ell) != self.ell or not 0 <= self.ell <= self.m:
            raise ModelError("need 0 <= ell <= m")
        c = self.c
        if isinstance(c, float):
            c = Fraction(c).limit_denominator(10**6)
        object.__setattr__(self, "c", Fraction(c))
        alpha = complex(self.m + 1) if self.alpha is None else complex(self.alpha)
        if alpha == 0:
            raise ModelError("alpha must be nonzero")
        object.__setattr__(self, "alpha", alpha)

    @property
    def c1(self) -> Fraction:
        return self.c

    @property
    def c2(self) -> Fraction:
        return -self.c - self.ell

    @property
    def mode(self) -> str:
        if self.ell == 0 and self.c == 0:
            return "polystable"
        v = stability_check((self.c, self.ell))
        return "stable" if v == STABLE else ("semistable" if v == SEMISTABLE else "unstable")

    def to_json(self) -> dict:
        return {
            "m": self.m,
            "ell": self.ell,
            "c": fraction_to_json(self.c),
            "alpha": {"re": self.alpha.real, "im": self.alpha.imag},
        }

    @classmethod
    def from_json(cls, obj) -> "LocalModelSpec":
        alpha = obj.get("alpha")
        if isinstance(alpha, dict):
            alpha = complex(alpha["re"], alpha.get("im", 0.0))
        return cls(int(obj["m"]), int(obj["ell"]), fraction_from_json(obj["c"]), alpha)


# ----------------------------------------------------------------------------
# frames and Higgs matrices


def v_to_e(spec: LocalModelSpec, zeta) -> np.ndarray:
    """Matrix ``P(zeta)`` with ``(e1, e2) = (v1, v2) . P``."""
    z = np.asarray(zeta, dtype=complex)
    P = np.zeros(z.shape + (2, 2), dtype=complex)
    P[..., 0, 0] = 1.0
    P[..., 1, 0] = 1.0
    P[..., 1, 1] = z**spec.ell
    return P


def e_to_v(spec: LocalModelSpec, zeta) -> np.ndarray:
    """Inverse of :func:`v_to_e`; singular at 0 when ``ell > 0``."""
    z = np.asarray(zeta, dtype=complex)
    if spec.ell > 0 and np.any(z == 0):
        raise ModelError("the v-frame is not defined at zeta = 0 when ell > 0")
    P = np.zeros(z.shape + (2, 2), dtype=complex)
    zi = z ** (-spec.ell) if spec.ell else np.ones_like(z)
    P[..., 0, 0] = 1.0
    P[..., 1, 0] = -zi
    P[..., 1, 1] = zi
    return P


def higgs_matrix(spec: LocalModelSpec, frame: str, zeta) -> np.ndarray:
    """Coefficient of ``dzeta`` of the Higgs field in the requested frame."""
    z = np.asarray(zeta, dtype=complex)
    a = spec.alpha
    T = np.zeros(z.shape + (2, 2), dtype=complex)
    zm = z**spec.m
    T[..., 0, 0] = a * zm
    T[..., 1, 1] = -a * zm
    if frame == E_FRAME:
        T[..., 1, 0] = -2 * a * z ** (spec.m - spec.ell)
    elif frame != V_FRAME:
        raise ModelError(f"unknown frame tag {frame!r}")
    return T


def hlim_metric(spec: LocalModelSpec, zeta: complex) -> HermitianForm:
    """The decoupled reference metric, diagonal in the v-frame."""
    r = abs(complex(zeta))
    if r == 0:
        raise ModelError("hlim is singular at zeta = 0")
    c = float(spec.c)
    return HermitianForm(np.diag([r ** (2 * c), r ** (-2 * c - 2 * spec.ell)]))


def hlim_field(spec: LocalModelSpec, zeta, frame: str = V_FRAME) -> np.ndarray:
    """Vectorized hlim Gram matrices, shape ``zeta.shape + (2, 2)``."""
    z = np.asarray(zeta, dtype=complex)
    r = np.abs(z)
    if np.any(r == 0):
        raise ModelError("hlim is singular at zeta = 0")
    c = float(spec.c)
    H = np.zeros(z.shape + (2, 2), dtype=complex)
    H[..., 0, 0] = r ** (2 * c)
    H[..., 1, 1] = r ** (-2 * c - 2 * spec.ell)
    if frame == E_FRAME:
        P = v_to_e(spec, z)
        H = np.conj(np.swapaxes(P, -1, -2)) @ H @ P
    elif frame != V_FRAME:
        raise ModelError(f"unknown frame tag {frame!r}")
    return H


# ----------------------------------------------------------------------------
# smooth cutoff


def _transition(x):
    """``S(x)`` rising from 0 (x <= 0) to 1 (x >= 1) with derivatives."""
    x = np.asarray(x, dtype=float)
    S = np.where(x >= 1, 1.0, 0.0)
    dS = np.zeros_like(x)
    d2S = np.zeros_like(x)
    inside = (x > 0) & (x < 1)
    if np.any(inside):
        xi = x[inside]
        psi = 1.0 / xi - 1.0 / (1.0 - xi)
        s = expit(-psi)
        sc = expit(psi)  # 1 - s without cancellation
        chi = 1.0 / xi**2 + 1.0 / (1.0 - xi) ** 2
        dchi = -2.0 / xi**3 + 2.0 / (1.0 - xi) ** 3
        d1 = s * sc * chi
        S[inside] = s
        dS[inside] = d1
        d2S[inside] = d1 * (sc - s) * chi + s * sc * dchi
    return S, dS, d2S


def cutoff(r, derivatives: bool = False):
    """Bump ``rho(r) = 1 - S(2r - 1)``: 1 on ``r <= 1/2``, 0 on ``r >= 1``."""
    S, dS, d2S = _transition(2.0 * np.asarray(r, dtype=float) - 1.0)
    rho = 1.0 - S
    if derivatives:
        return rho, -2.0 * dS, -4.0 * d2S
    return rho


# ----------------------------------------------------------------------------
# the explicit interpolating family


def hkappa_field(kappa: float, L: int, spec: LocalModelSpec, zeta) -> np.ndarray:
    """Gram matrices of ``h_kappa`` in the e-frame, shape ``zeta.shape + (2, 2)``.

    ``u1 = e1 - beta e2`` and ``u2 = e2`` with
    ``beta = conj(zeta)^ell / (kappa rho + |zeta|^(2 ell))`` are declared
    orthogonal with ``|u1| = kappa^-L`` and ``|u2| = kappa^L``.
    """
    if not 0 < kappa < 1:
        raise ModelError("kappa must lie in (0, 1)")
    if int(L) != L or L <= 0:
        raise ModelError("L must be a positive integer")
    z = np.asarray(zeta, dtype=complex)
    r = np.abs(z)
    ell = spec.ell
    denom = kappa * cutoff(r) + r ** (2 * ell)
    if np.any(denom == 0):
        raise ModelError("h_kappa undefined")  # pragma: no cover - only if ell = 0 and r = 0 both fail
    beta = np.conj(z) ** ell / denom
    k2 = float(kappa) ** (2 * L)
    H = np.empty(z.shape + (2, 2), dtype=complex)
    H[..., 0, 0] = 1.0 / k2 + np.abs(beta) ** 2 * k2
    H[..., 0, 1] = np.conj(beta) * k2
    H[..., 1, 0] = beta * k2
    H[..., 1, 1] = k2
    return H


def hkappa_metric(kappa: float, L: int, spec: LocalModelSpec, zeta: complex) -> HermitianForm:
    return HermitianForm(hkappa_field(kappa, L, spec, complex(zeta)))


def hkappa_frame(kappa: float, spec: LocalModelSpec, zeta) -> np.ndarray:
    """Matrix ``U`` with ``(u1, u2) = (e1, e2) . U``."""
    z = np.asarray(zeta, dtype=complex)
    r = np.abs(z)
    beta = np.conj(z) ** spec.ell / (kappa * cutoff(r) + r ** (2 * spec.ell))
    U = np.zeros(z.shape + (2, 2), dtype=complex)
    U[..., 0, 0] = 1.0
    U[..., 1, 0] = -beta
    U[..., 1, 1] = 1.0
    return U


# ----------------------------------------------------------------------------
# symmetries


def psi_gamma(metric: Union[HermitianForm, np.ndarray], gamma: float):
    """Pullback of a v-frame metric through ``diag(gamma, 1/gamma)``."""
    if not gamma > 0:
        raise ModelError("gamma must be positive")
    scale = np.array([gamma, 1.0 / gamma])
    if isinstance(metric, HermitianForm):
        return HermitianForm(metric.entries * np.outer(scale, scale))
    H = np.asarray(metric)
    return H * np.outer(scale, scale)


def limiting_rescale_factor(spec: LocalModelSpec, t: float, b_c: float) -> float:
    """``gamma(t) = b_c^-1 t^(-(ell + 2c) / (2 (m + 1)))``."""
    if not t > 0 or not b_c > 0:
        raise ModelError("t and b_c must be positive")
    expo = -(spec.ell + 2 * float(spec.c)) / (2 * (spec.m + 1))
    return float(t) ** expo / float(b_c)


def tau_for_t(spec: LocalModelSpec, t: float) -> float:
    """Positive ``tau`` with ``tau^(2(m+1)) = t``."""
    if not t > 0:
        raise ModelError("t must be positive")
    return float(t) ** (1.0 / (2 * (spec.m + 1)))


def rescale_phi_tau(profile, spec: LocalModelSpec, tau: complex):
    """Harmonic metric for ``tau^(2(m+1)) theta`` from one for ``theta``.

    Under the frame identification ``tau^ell phi_tau^* v_i <-> v_i`` the new
    metric at ``zeta`` is ``|tau|^(2 ell)`` times the old one at
    ``tau^2 zeta``.  The radial profile therefore only depends on ``|tau|``:
    radii shrink by ``|tau|^2`` and the pairings of the twisted frame scale.
    """
    tau = complex(tau)
    if tau == 0:
        raise ModelError("tau must be nonzero")
    return profile.rescaled(abs(tau), spec)


def radial_model_phase_check(spec: LocalModelSpec, profile, angle: float) -> float:
    """Largest change of the e-frame Gram matrix under rotation by ``angle``
    once the rotation is undone (the profile is rotation invariant)."""
    r = profile.radii
    z0 = r.astype(complex)
    z1 = r * np.exp(1j * angle)
    H0 = profile.e_frame_field(z0)
    H1 = profile.e_frame_field(z1)
    U = np.zeros((len(r), 2, 2), dtype=complex)
    U[:, 0, 0] = 1.0
    U[:, 1, 1] = np.exp(1j * spec.ell * angle)
    back = np.conj(np.swapaxes(U, -1, -2)) @ H0 @ U
    return float(np.max(np.abs(back - H1)))

