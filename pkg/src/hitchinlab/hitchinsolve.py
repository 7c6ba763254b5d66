"""Hitchin equation on polar grids: residuals, a radial solver for the local
models, and the decoupling / limiting-configuration diagnostics.

Conventions.  ``H[i, j] = h(u_i, u_j)`` in a frame ``u``.  If the frame is
holomorphic the Chern connection is ``H^-1 dH`` and the Hitchin equation is

    d_zbar (H^-1 d_z H) - [Theta, H^-1 Theta^H H] = 0.

For a smooth but non-holomorphic frame with ``dbar u = u S dzbar`` the
connection is ``P dz + S dzbar`` with ``P = H^-1 d_z H - H^-1 S^H H`` and the
equation reads ``d_zbar P - d_z S - [P, S] - [Theta, Theta^*] = 0``.  Both
forms are evaluated by the same kernel.

Radial solver.  For the model with lattice twist ``ell`` the unknown metric is
written in the smooth frame

    u1 = v1 + s(r) v2,      u2 = zeta^ell v2,      s = rho / (rho + r^(2 ell)),

where ``rho`` is the cutoff bump.  Near 0 this frame is a regular frame of
the lattice; on ``|zeta| >= 1`` it is the holomorphic frame ``(v1, zeta^ell v2)``
in which the limiting metric is diagonal.  Rotation invariance makes
``h(u1, u1) = a(r)``, ``h(u1, u2) = zeta^ell q(r)`` and
``h(u2, u2) = d(r) = (1 + r^(2 ell) |q|^2) / a``.  The solver unknowns are
``mu = log a - lam_ref`` and ``q``, with ``lam_ref`` an analytic even function
equal to ``2 c log r`` for ``r >= 1``.  Far from the origin the exact solution
has ``mu`` constant and ``q`` exponentially small, and the discrete equations
there involve no truncation error on the power-law part, so exponentially small
off-diagonal pairings keep their relative accuracy.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla
from scipy.interpolate import CubicSpline

from .fitting import DecayFit, strictly_decreasing
from .gaugecalc import MetricError
from .localmodel import LocalModelSpec, ModelError, cutoff, higgs_matrix, E_FRAME, V_FRAME

DET_TOL = 1e-12


class SolveError(RuntimeError):
    def __init__(self, message: str, report: Optional["SolveReport"] = None):
        super().__init__(message)
        self.report = report


class RangeError(ValueError):
    """Requested radius outside the solved range."""


# ----------------------------------------------------------------------------
# grids and fields


@dataclass(frozen=True)
class PolarGrid:
    """Uniform radial samples and uniform angles.

    With ``center == "mirror"`` the radii must be the cell centers
    ``(i + 1/2) h`` so that the node at ``-h/2`` is the mirror image of the
    first node through the origin.  With ``center == "none"`` the innermost
    ring is treated as a boundary ring.
    """

    radii: np.ndarray
    n_angles: int = 1
    center: str = "mirror"

    def __post_init__(self):
        r = np.asarray(self.radii, dtype=float)
        if r.ndim != 1 or len(r) < 2:
            raise MetricError("need at least two radii")
        if np.any(r <= 0) or np.any(np.diff(r) <= 0):
            raise MetricError("radii must be positive and strictly increasing")
        h = np.diff(r)
        if np.max(np.abs(h - h[0])) > 1e-9 * h[0]:
            raise MetricError("radii must be uniformly spaced")
        if self.n_angles < 1:
            raise MetricError("angle count must be >= 1")
        if self.center not in ("mirror", "none"):
            raise MetricError(f"unknown center mode {self.center!r}")
        if self.center == "mirror":
            if abs(r[0] - h[0] / 2) > 1e-9 * h[0]:
                raise MetricError("mirror center needs the first radius at spacing/2")
            if self.n_angles > 1 and self.n_angles % 2:
                raise MetricError("mirror center needs an even number of angles")
        if r[-1] + h[0] / 2 < 1.0 - 1e-12:
            raise MetricError("grid must reach the unit circle (R_max >= 1)")
        r.setflags(write=False)
        object.__setattr__(self, "radii", r)

    @classmethod
    def uniform(cls, n_radii: int, r_max: float, n_angles: int = 1) -> "PolarGrid":
        h = r_max / n_radii
        return cls((np.arange(n_radii) + 0.5) * h, n_angles, "mirror")

    @classmethod
    def annulus(cls, n_radii: int, r_min: float, r_max: float, n_angles: int = 1) -> "PolarGrid":
        return cls(np.linspace(r_min, r_max, n_radii), n_angles, "none")

    @property
    def spacing(self) -> float:
        return float(self.radii[1] - self.radii[0])

    @property
    def r_max(self) -> float:
        if self.center == "mirror":
            return float(self.radii[-1] + self.spacing / 2)
        return float(self.radii[-1])

    @property
    def angles(self) -> np.ndarray:
        return 2 * np.pi * np.arange(self.n_angles) / self.n_angles

    def points(self) -> np.ndarray:
        """Complex sample points, shape ``(n_radii, n_angles)``."""
        return self.radii[:, None] * np.exp(1j * self.angles)[None, :]

    def to_json(self) -> dict:
        return {"radii": [float(x) for x in self.radii], "n_angles": self.n_angles, "center": self.center}


@dataclass(frozen=True)
class ResidualResult:
    residual: np.ndarray  # (n_interior, n_angles, r, r)
    norm: np.ndarray  # (n_interior, n_angles)
    sup: float
    l2: float
    interior: np.ndarray  # radial indices of the interior rings


def _inv2(A):
    det = A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]
    out = np.empty_like(A)
    out[..., 0, 0] = A[..., 1, 1] / det
    out[..., 1, 1] = A[..., 0, 0] / det
    out[..., 0, 1] = -A[..., 0, 1] / det
    out[..., 1, 0] = -A[..., 1, 0] / det
    return out


def _inv(A):
    if A.shape[-1] == 2:
        return _inv2(A)
    return np.linalg.inv(A)


def _dag(A):
    return np.conj(np.swapaxes(A, -1, -2))


def hitchin_kernel(H, dH, dbH, ddbH, Theta, S=None, dS=None):
    """Pointwise residual from a metric, its derivatives and the Higgs matrix.

    ``dH = d_z H``, ``dbH = d_zbar H`` and ``ddbH = d_z d_zbar H``.  ``S`` is
    the ``dzbar`` coefficient of the frame's (0,1) connection and ``dS`` its
    ``d_z`` derivative; both are ``None`` for holomorphic frames.
    """
    Hi = _inv(H)
    A = Hi @ dH
    B = Hi @ dbH
    R = Hi @ ddbH - B @ A
    if S is not None:
        SdH = _dag(S) @ H
        P2 = Hi @ SdH  # H^-1 S^H H
        # d_zbar(H^-1 S^H H) = -B P2 + H^-1 (d_z S)^H H + H^-1 S^H dbH
        R = R + B @ P2 - Hi @ (_dag(dS) @ H) - Hi @ (_dag(S) @ dbH)
        P = A - P2
        R = R - dS - (P @ S - S @ P)
    Tstar = Hi @ _dag(Theta) @ H
    R = R - (Theta @ Tstar - Tstar @ Theta)
    return R


def metric_norm(R, H):
    """``|R|_h``: Frobenius norm of ``L^H R L^-H`` with ``H = L L^H``."""
    L = np.linalg.cholesky(H)
    N = _dag(L) @ R @ _inv(_dag(L))
    return np.sqrt(np.sum(np.abs(N) ** 2, axis=(-1, -2)))


def _angular(H, grid: PolarGrid, charges):
    if grid.n_angles > 1:
        k = np.fft.fftfreq(grid.n_angles, 1.0 / grid.n_angles)
        Hh = np.fft.fft(H, axis=1)
        k1 = (1j * k).copy()
        if grid.n_angles % 2 == 0:
            k1[grid.n_angles // 2] = 0.0
        shape = (1, -1) + (1,) * (H.ndim - 2)
        Hp = np.fft.ifft(Hh * k1.reshape(shape), axis=1)
        Hpp = np.fft.ifft(Hh * (-(k**2)).reshape(shape), axis=1)
        return Hp, Hpp
    if charges is None:
        raise MetricError("a single-angle grid needs the angular charges of the field")
    n = np.asarray(charges, dtype=float)
    w = n[None, :] - n[:, None]  # (j, k) -> n_k - n_j
    return H * (1j * w), H * (-(w**2))


def _mirror(H0, grid: PolarGrid, charges):
    """Values at radius ``-h/2``: the first ring seen through the origin."""
    if grid.n_angles > 1:
        return np.roll(H0, grid.n_angles // 2, axis=0)
    n = np.asarray(charges, dtype=float)
    w = n[None, :] - n[:, None]
    return H0 * np.cos(np.pi * w)


def hitchin_residual(H, Theta, grid: PolarGrid, charges: Optional[Sequence[int]] = None,
                     rescale: bool = True) -> ResidualResult:
    """Discrete Hitchin residual of a metric field in a holomorphic frame.

    ``H`` and ``Theta`` have shape ``(n_radii, n_angles, r, r)``.  Radial
    derivatives are second-order central differences, angular ones spectral
    (or exact from ``charges`` when ``n_angles == 1``: the field is then
    ``H(r, phi)_jk = H(r, 0)_jk exp(i (n_k - n_j) phi)``).  Interior rings are
    all rings but the outer one (and the inner one when the grid has no
    mirror center).  A constant diagonal rescaling of the frame is applied
    internally for conditioning; the residual is covariant under it and the
    returned field is in the caller's frame.
    """
    H = np.asarray(H, dtype=complex)
    Theta = np.asarray(Theta, dtype=complex)
    nr, na = len(grid.radii), grid.n_angles
    if H.shape[:2] != (nr, na) or Theta.shape != H.shape:
        raise MetricError(f"field shapes {H.shape}, {Theta.shape} do not match the grid ({nr}, {na})")
    if na == 1 and charges is None:
        raise MetricError("a single-angle grid needs the angular charges of the field")
    lo = 0 if grid.center == "mirror" else 1
    interior = np.arange(lo, nr - 1)
    if len(interior) < 4:
        raise MetricError("grid too coarse: fewer than 4 interior radii")
    Hs = 0.5 * (H + _dag(H))
    if rescale:
        diag = np.real(np.diagonal(Hs, axis1=-2, axis2=-1))
        if np.any(diag <= 0):
            raise MetricError("metric sample is not positive definite")
        c = np.exp(-0.5 * np.mean(np.log(diag), axis=(0, 1)))
    else:
        c = np.ones(H.shape[-1])
    Hs = Hs * np.outer(c, c)
    Th = Theta * (c[None, :] / c[:, None])
    try:
        np.linalg.cholesky(Hs)
    except np.linalg.LinAlgError:
        raise MetricError("metric sample is not positive definite") from None
    h = grid.spacing
    if grid.center == "mirror":
        ghost = _mirror(Hs[0], grid, charges)[None]
        ext = np.concatenate([ghost, Hs], axis=0)
        off = 1
    else:
        ext = Hs
        off = 0
    i = interior + off
    Hr = (ext[i + 1] - ext[i - 1]) / (2 * h)
    Hrr = (ext[i + 1] - 2 * ext[i] + ext[i - 1]) / h**2
    Hp, Hpp = _angular(Hs[interior], grid, charges)
    r = grid.radii[interior][:, None, None, None]
    phi = grid.angles[None, :, None, None]
    dH = 0.5 * np.exp(-1j * phi) * (Hr - 1j * Hp / r)
    dbH = 0.5 * np.exp(1j * phi) * (Hr + 1j * Hp / r)
    ddbH = 0.25 * (Hrr + Hr / r + Hpp / r**2)
    Hin = Hs[interior]
    R = hitchin_kernel(Hin, dH, dbH, ddbH, Th[interior])
    nrm = metric_norm(R, Hin)
    dA = grid.radii[interior][:, None] * h * (2 * np.pi / na)
    l2 = float(np.sqrt(np.sum(nrm**2 * dA)))
    R_back = R * (c[:, None] / c[None, :])
    return ResidualResult(R_back, nrm, float(np.max(nrm)), l2, interior)


# ----------------------------------------------------------------------------
# the twisted frame used by the radial solver


def twist_frame(ell: int, r, sigma: float = 1.0, mode: str = "auto") -> Dict[str, np.ndarray]:
    """Frame data for ``u1 = v1 + s v2``, ``u2 = zeta^ell v2`` at ``phi = 0``.

    Returns ``s`` and ``B`` (with ``e1 = u1 + beta u2``,
    ``beta = exp(-i ell phi) B(r)``) plus ``dB``, ``d2B`` and the mask of radii
    where the frame is holomorphic.  The cutoff acts on ``sigma * r``.  With
    ``mode == "auto"`` and ``ell == 0`` the frame is the v-frame itself;
    ``mode == "cutoff"`` forces the cutoff construction also for ``ell == 0``.
    """
    r = np.asarray(r, dtype=float)
    R = sigma * r
    if ell == 0 and mode == "auto":
        one = np.ones_like(r)
        zero = np.zeros_like(r)
        return {"s": zero, "B": one, "dB": zero, "d2B": zero, "flat": np.ones_like(r, dtype=bool)}
    rho, drho, d2rho = cutoff(R, derivatives=True)
    R2l = R ** (2 * ell)
    D = rho + R2l
    s = rho / D
    N = R**ell
    dN = ell * R ** (ell - 1) if ell >= 1 else np.zeros_like(R)
    d2N = ell * (ell - 1) * R ** (ell - 2) if ell >= 2 else np.zeros_like(R)
    dD = drho + (2 * ell * R ** (2 * ell - 1) if ell >= 1 else 0.0)
    d2D = d2rho + (2 * ell * (2 * ell - 1) * R ** (2 * ell - 2) if ell >= 1 else 0.0)
    b = N / D
    db = (dN * D - N * dD) / D**2
    d2b = d2N / D - 2 * dN * dD / D**2 - N * d2D / D**2 + 2 * N * dD**2 / D**3
    flat = rho == 0
    B = sigma**ell * b
    dB = sigma ** (ell + 1) * db
    d2B = sigma ** (ell + 2) * d2b
    s = np.where(flat, 0.0, s)
    return {"s": s, "B": B, "dB": dB, "d2B": d2B, "flat": flat}


def _log_reference(r):
    """Even smooth function equal to ``log r`` for ``r >= 1``, with derivatives."""
    rho, d1, d2 = cutoff(r, derivatives=True)
    lg = np.log(r)
    p = 0.5 * (r**2 - 1.0)
    val = rho * p + (1 - rho) * lg
    dval = d1 * (p - lg) + rho * r + (1 - rho) / r
    d2val = d2 * (p - lg) + 2 * d1 * (r - 1.0 / r) + rho - (1 - rho) / r**2
    return val, dval, d2val


# ----------------------------------------------------------------------------
# radial metric profiles


@dataclass(frozen=True)
class RadialMetricProfile:
    """Rotation-invariant metric of a local model, stored in the twisted frame.

    ``log_a[i] = log h(u1, u1)`` and ``q[i] = zeta^-ell h(u1, u2)`` at
    ``radii[i]``; ``h(u2, u2)`` follows from the determinant.  ``sigma`` is
    the scale at which the frame's cutoff acts (1 for a solver output,
    ``|tau|^2`` after rescaling).
    """

    radii: np.ndarray
    log_a: np.ndarray
    q: np.ndarray
    ell: int
    det: float = 1.0
    sigma: float = 1.0
    frame_mode: str = "auto"

    def __post_init__(self):
        for name in ("radii", "log_a", "q"):
            arr = np.array(getattr(self, name), dtype=complex if name == "q" else float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (self.radii.shape == self.log_a.shape == self.q.shape):
            raise MetricError("profile arrays must have equal length")

    # --- twisted frame data
    @property
    def a(self) -> np.ndarray:
        return np.exp(self.log_a)

    @property
    def d(self) -> np.ndarray:
        return (self.det + self.radii ** (2 * self.ell) * np.abs(self.q) ** 2) * np.exp(-self.log_a)

    def _frame(self):
        return twist_frame(self.ell, self.radii, self.sigma, self.frame_mode)

    @property
    def r_max(self) -> float:
        return float(self.radii[-1])

    # --- e-frame view (f1, f2, g)
    def e_frame(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        fr = self._frame()
        B, r, ell = fr["B"], self.radii, self.ell
        a, d, q = self.a, self.d, self.q
        f1 = a + 2 * B * r**ell * q.real + B**2 * d
        g = q + B * d / r**ell
        return f1, d.copy(), g

    def e_frame_field(self, zeta) -> np.ndarray:
        """Gram matrices in the e-frame at points whose moduli are sample radii."""
        z = np.asarray(zeta, dtype=complex)
        rz = np.abs(z)
        idx = np.clip(np.searchsorted(self.radii, rz), 1, len(self.radii) - 1)
        idx = np.where(np.abs(self.radii[idx - 1] - rz) < np.abs(self.radii[idx] - rz), idx - 1, idx)
        if np.max(np.abs(self.radii[idx] - np.abs(z))) > 1e-12 * max(1.0, self.r_max):
            raise RangeError("points must lie on sample radii")
        f1, f2, g = self.e_frame()
        H = np.empty(z.shape + (2, 2), dtype=complex)
        H[..., 0, 0] = f1[idx]
        H[..., 1, 1] = f2[idx]
        H[..., 0, 1] = z**self.ell * g[idx]
        H[..., 1, 0] = np.conj(H[..., 0, 1])
        return H

    # --- v-frame view
    def v_frame(self) -> Dict[str, np.ndarray]:
        """``log |v1|^2``, ``log |v2|^2`` and ``w = h(v1, v2)`` at ``phi = 0``."""
        fr = self._frame()
        s, r, ell = fr["s"], self.radii, self.ell
        q, d = self.q, self.d
        inv = r ** (-2 * ell)
        log_p2 = np.log(d) - 2 * ell * np.log(r)
        corr = (-2 * s * q.real + s**2 * inv * d) * np.exp(-self.log_a)
        log_p1 = self.log_a + np.log1p(corr)
        w = q - s * inv * d
        return {"log_p1": log_p1, "log_p2": log_p2, "w": w}

    def v_frame_field(self) -> np.ndarray:
        vf = self.v_frame()
        H = np.empty(self.radii.shape + (2, 2), dtype=complex)
        H[:, 0, 0] = np.exp(vf["log_p1"])
        H[:, 1, 1] = np.exp(vf["log_p2"])
        H[:, 0, 1] = vf["w"]
        H[:, 1, 0] = np.conj(vf["w"])
        return H

    # --- symmetries
    def rescaled(self, abs_tau: float, spec: LocalModelSpec) -> "RadialMetricProfile":
        """Profile of ``phi_tau^* h`` for ``|tau| = abs_tau`` (see localmodel)."""
        if spec.ell != self.ell:
            raise ModelError("profile and spec disagree on ell")
        sig = float(abs_tau) ** 2
        fac = float(abs_tau) ** (2 * self.ell)
        return RadialMetricProfile(self.radii / sig, self.log_a + math.log(fac), self.q * fac,
                                   self.ell, self.det, self.sigma * sig, self.frame_mode)

    def restrict(self, r_lo: float, r_hi: float) -> np.ndarray:
        """Indices of samples with ``r_lo <= r <= r_hi``; raises when uncovered."""
        tol = 1e-12 * max(1.0, r_hi)
        if r_hi > self.r_max + tol:
            raise RangeError(f"requested radius {r_hi:.6g} beyond the solved range {self.r_max:.6g}")
        idx = np.nonzero((self.radii >= r_lo - tol) & (self.radii <= r_hi + tol))[0]
        if len(idx) == 0:
            raise RangeError(f"no samples in [{r_lo:.6g}, {r_hi:.6g}]")
        return idx

    def interpolate(self, r) -> "RadialMetricProfile":
        """Resample at new radii (cubic splines, even extension through 0)."""
        r = np.asarray(r, dtype=float)
        if np.any(r > self.r_max * (1 + 1e-12)) or np.any(r <= 0):
            raise RangeError("interpolation radius outside the available range")
        x = np.concatenate([-self.radii[::-1], self.radii])

        def ev(y):
            return CubicSpline(x, np.concatenate([y[::-1], y]))(r)

        q = ev(self.q.real) + 1j * ev(self.q.imag)
        return RadialMetricProfile(r, ev(self.log_a), q, self.ell, self.det, self.sigma, self.frame_mode)

    # --- serialization
    def to_json(self, spec: Optional[LocalModelSpec] = None) -> dict:
        f1, f2, g = self.e_frame()
        out = {
            "ell": self.ell,
            "det": self.det,
            "sigma": self.sigma,
            "frame_mode": self.frame_mode,
            "grid": {"radii": [float(x) for x in self.radii]},
            "f1": [float(x) for x in f1],
            "f2": [float(x) for x in f2],
            "re_g": [float(x) for x in g.real],
            "im_g": [float(x) for x in g.imag],
            "log_a": [float(x) for x in self.log_a],
            "re_q": [float(x) for x in self.q.real],
            "im_q": [float(x) for x in self.q.imag],
        }
        if spec is not None:
            out["spec"] = spec.to_json()
        return out

    @classmethod
    def from_json(cls, obj) -> "RadialMetricProfile":
        r = np.asarray(obj["grid"]["radii"], dtype=float)
        if "log_a" in obj:
            q = np.asarray(obj["re_q"]) + 1j * np.asarray(obj["im_q"])
            return cls(r, np.asarray(obj["log_a"]), q, int(obj["ell"]), float(obj.get("det", 1.0)),
                       float(obj.get("sigma", 1.0)), obj.get("frame_mode", "auto"))
        # e-frame only: invert the frame change
        ell = int(obj["ell"])
        sigma = float(obj.get("sigma", 1.0))
        mode = obj.get("frame_mode", "auto")
        fr = twist_frame(ell, r, sigma, mode)
        f1 = np.asarray(obj["f1"])
        f2 = np.asarray(obj["f2"])
        g = np.asarray(obj["re_g"]) + 1j * np.asarray(obj["im_g"])
        B = fr["B"]
        q = g - B * f2 / r**ell
        a = f1 - 2 * B * r**ell * q.real - B**2 * f2
        return cls(r, np.log(a), q, ell, float(obj.get("det", 1.0)), sigma, mode)


def hlim_profile(spec: LocalModelSpec, radii, b: float = 1.0, frame_mode: str = "auto") -> RadialMetricProfile:
    """The limiting metric ``diag(b^2 r^2c, b^-2 r^(-2c-2 ell))`` as a profile.

    Singular at the origin when ``ell > 0`` or ``c != 0``; only meaningful away from 0.
    """
    r = np.asarray(radii, dtype=float)
    c, ell = float(spec.c), spec.ell
    fr = twist_frame(ell, r, 1.0, frame_mode)
    s = fr["s"]
    p1 = b**2 * r ** (2 * c)
    p2 = b**-2 * r ** (-2 * c - 2 * ell)
    a = p1 + s**2 * p2
    q = (s * p2).astype(complex)
    return RadialMetricProfile(r, np.log(a), q, ell, 1.0, 1.0, frame_mode)


# ----------------------------------------------------------------------------
# solver


@dataclass(frozen=True)
class SolveConfig:
    n_radii: int = 400
    r_max: float = 4.0
    tol: float = 1e-10
    max_iter: int = 200
    dt0: float = 1e-2
    dt_growth: float = 4.0
    dt_max: float = 1e14
    polish_steps: int = 4
    max_increase: float = 2.0
    boundary: str = "neumann"  # or "dirichlet"
    frame_mode: str = "auto"

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if not (self.dt0 > 0 and self.dt_growth >= 1 and self.dt_max >= self.dt0):
            raise ValueError("time step policy must be positive")
        if self.boundary not in ("neumann", "dirichlet"):
            raise ValueError("boundary mode must be 'neumann' or 'dirichlet'")
        if self.n_radii < 6:
            raise ValueError("need at least 6 radii")
        if self.r_max < 1.0:
            raise ValueError("r_max must be >= 1")

    @property
    def grid(self) -> PolarGrid:
        return PolarGrid.uniform(self.n_radii, self.r_max)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    residual_sup: float
    residual_l2: float
    det_error: float
    accepted_steps: int
    rejected_steps: int
    seconds: float
    trace: List[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, default=float)


class _RadialProblem:
    """Discrete radial equations for one local model."""

    def __init__(self, spec: LocalModelSpec, config: SolveConfig, frame_change=None):
        self.spec = spec
        self.config = config
        grid = config.grid
        self.r = r = grid.radii
        self.h = grid.spacing
        self.N = len(r)
        ell = self.ell = spec.ell
        fr = twist_frame(ell, r, 1.0, config.frame_mode)
        self.frame = fr
        C = np.eye(2, dtype=complex) if frame_change is None else np.asarray(frame_change, dtype=complex)
        if C.shape != (2, 2) or C[0, 1] != 0 or C[1, 0] != 0 or C[0, 0] == 0 or C[1, 1] == 0:
            raise ValueError("frame change must be an invertible diagonal 2x2 matrix")
        self.C = C
        g1, g2 = C[0, 0], C[1, 1]
        self.det = float(abs(g1 * g2) ** 2)
        c = float(spec.c)
        lv, ld, ldd = _log_reference(r)
        shift = math.log(abs(g1) ** 2)
        self.lam_ref = (2 * c * lv + shift, 2 * c * ld, 2 * c * ldd)
        # Higgs field in the twisted frame at phi = 0 (zeta = r)
        al, m = spec.alpha, spec.m
        Th = np.zeros((self.N, 2, 2), dtype=complex)
        Th[:, 0, 0] = al * r**m
        Th[:, 1, 1] = -al * r**m
        Th[:, 1, 0] = -2 * al * r ** (m - ell) * fr["s"]
        # (0,1) connection of the frame: S = [[0,0],[-dbar beta, 0]]
        B, dB, d2B = fr["B"], fr["dB"], fr["d2B"]
        dbar_beta = np.where(fr["flat"], 0.0, 0.5 * (dB + ell * B / r))
        lap_beta = np.where(fr["flat"], 0.0, 0.25 * (d2B + dB / r - ell**2 * B / r**2))
        S = np.zeros((self.N, 2, 2), dtype=complex)
        dS = np.zeros((self.N, 2, 2), dtype=complex)
        S[:, 1, 0] = -dbar_beta
        dS[:, 1, 0] = -lap_beta
        Ci = np.linalg.inv(C)
        self.Theta = Ci @ Th @ C
        self.S = Ci @ S @ C
        self.dS = Ci @ dS @ C
        self.has_S = bool(np.any(self.S != 0) or np.any(self.dS != 0))
        self.charges = (0, ell)

    # --- unknowns
    def split(self, x):
        x = x.reshape(self.N, 3)
        return x[:, 0], x[:, 1] + 1j * x[:, 2]

    @staticmethod
    def join(mu, q):
        return np.stack([mu, q.real, q.imag], axis=1).ravel()

    def _derivs(self, u, right):
        h = self.h
        ext = np.empty(len(u) + 2, dtype=u.dtype)
        ext[1:-1] = u
        ext[0] = u[0]
        ext[-1] = right
        ur = (ext[2:] - ext[:-2]) / (2 * h)
        urr = (ext[2:] - 2 * ext[1:-1] + ext[:-2]) / h**2
        return ur, urr

    def fields(self, x):
        mu, q = self.split(x)
        if self.config.boundary == "neumann":
            mu_g, q_g = mu[-1], q[-1]
        else:
            mu_g, q_g = -mu[-1], -q[-1]
        mu_r, mu_rr = self._derivs(mu, mu_g)
        q_r, q_rr = self._derivs(q, q_g)
        r, ell = self.r, self.ell
        lam = self.lam_ref[0] + mu
        lam_r = self.lam_ref[1] + mu_r
        lam_rr = self.lam_ref[2] + mu_rr
        a = np.exp(lam)
        ea = np.exp(-lam)
        p = r**ell
        p1 = ell * r ** (ell - 1) if ell >= 1 else np.zeros_like(r)
        p2 = ell * (ell - 1) * r ** (ell - 2) if ell >= 2 else np.zeros_like(r)
        k12 = p * q
        k12_r = p1 * q + p * q_r
        k12_rr = p2 * q + 2 * p1 * q_r + p * q_rr
        qq = np.abs(q) ** 2
        qr = 2 * np.real(np.conj(q) * q_r)
        qrr = 2 * (np.abs(q_r) ** 2 + np.real(np.conj(q) * q_rr))
        r2l = r ** (2 * ell)
        r2l_1 = 2 * ell * r ** (2 * ell - 1) if ell >= 1 else np.zeros_like(r)
        r2l_2 = 2 * ell * (2 * ell - 1) * r ** (2 * ell - 2) if ell >= 1 else np.zeros_like(r)
        E = r2l * qq
        E_r = r2l_1 * qq + r2l * qr
        E_rr = r2l_2 * qq + 2 * r2l_1 * qr + r2l * qrr
        d = (self.det + E) * ea
        d_r = E_r * ea - d * lam_r
        d_rr = E_rr * ea - 2 * E_r * ea * lam_r - d * lam_rr + d * lam_r**2
        K = np.empty((self.N, 2, 2), dtype=complex)
        Kr = np.empty_like(K)
        Krr = np.empty_like(K)
        K[:, 0, 0], Kr[:, 0, 0], Krr[:, 0, 0] = a, a * lam_r, a * (lam_rr + lam_r**2)
        K[:, 1, 1], Kr[:, 1, 1], Krr[:, 1, 1] = d, d_r, d_rr
        K[:, 0, 1], Kr[:, 0, 1], Krr[:, 0, 1] = k12, k12_r, k12_rr
        K[:, 1, 0], Kr[:, 1, 0], Krr[:, 1, 0] = np.conj(k12), np.conj(k12_r), np.conj(k12_rr)
        return K, Kr, Krr

    def residual_matrix(self, x):
        K, Kr, Krr = self.fields(x)
        ell = self.ell
        w = np.array([[0.0, ell], [-ell, 0.0]])
        Kp = K * (1j * w)
        Kpp = K * (-(w**2))
        r = self.r[:, None, None]
        dH = 0.5 * (Kr - 1j * Kp / r)
        dbH = 0.5 * (Kr + 1j * Kp / r)
        ddbH = 0.25 * (Krr + Kr / r + Kpp / r**2)
        if self.has_S:
            R = hitchin_kernel(K, dH, dbH, ddbH, self.Theta, self.S, self.dS)
        else:
            R = hitchin_kernel(K, dH, dbH, ddbH, self.Theta)
        return R, K

    def residual(self, x):
        R, K = self.residual_matrix(x)
        # whitened residual N = L^H R L^-H is Hermitian and trace free
        a = np.real(K[:, 0, 0])
        l11 = np.sqrt(a)
        l21 = np.conj(K[:, 0, 1]) / l11
        l22 = np.sqrt(np.real(K[:, 1, 1]) - np.abs(l21) ** 2)
        L = np.zeros_like(K)
        L[:, 0, 0], L[:, 1, 0], L[:, 1, 1] = l11, l21, l22
        Nm = _dag(L) @ R @ _inv2(_dag(L))
        F = np.stack([0.5 * np.real(Nm[:, 0, 0] - Nm[:, 1, 1]),
                      0.5 * np.real(Nm[:, 0, 1] + np.conj(Nm[:, 1, 0])),
                      0.5 * np.imag(Nm[:, 0, 1] + np.conj(Nm[:, 1, 0]))], axis=1)
        return F.ravel()

    def pointwise_norm(self, F):
        F = F.reshape(self.N, 3)
        return np.sqrt(2 * F[:, 0] ** 2 + 2 * (F[:, 1] ** 2 + F[:, 2] ** 2))

    def jacobian_banded(self, x):
        n = len(x)
        ab = np.zeros((11, n))
        eps = 1e-6 * (1.0 + np.abs(x))
        for color in range(9):
            cols = np.arange(color, n, 9)
            dx = np.zeros(n)
            dx[cols] = eps[cols]
            dF = (self.residual(x + dx) - self.residual(x - dx))
            for off in range(-5, 6):
                rows = cols + off
                # a column only couples to the three neighbouring nodes
                ok = (rows >= 0) & (rows < n) & (np.abs(rows // 3 - cols // 3) <= 1)
                ab[5 + off, cols[ok]] = dF[rows[ok]] / (2 * eps[cols[ok]])
        return ab

    def profile(self, x) -> RadialMetricProfile:
        mu, q = self.split(x)
        g1, g2 = self.C[0, 0], self.C[1, 1]
        log_a = self.lam_ref[0] + mu - math.log(abs(g1) ** 2)
        q_back = q / (np.conj(g1) * g2)
        return RadialMetricProfile(self.r, log_a, q_back, self.ell, 1.0, 1.0, self.config.frame_mode)

    def det_error(self, x) -> float:
        K, _, _ = self.fields(x)
        det = np.real(K[:, 0, 0] * K[:, 1, 1] - K[:, 0, 1] * K[:, 1, 0])
        return float(np.max(np.abs(det - self.det)) / self.det)


def solve_harmonic(spec: LocalModelSpec, config: SolveConfig = SolveConfig(), frame_change=None,
                   initial: Optional[Tuple[np.ndarray, np.ndarray]] = None):
    """Harmonic metric of the local model on the disc of radius ``config.r_max``.

    The flow is the implicit heat flow ``dx/dt = F(x)`` on the unknowns, one
    linearized backward-Euler step at a time: ``(1/dt - J) dx = F``.  The step
    size grows by ``dt_growth`` while the residual norm decreases and shrinks
    by the ratio of successive norms when it increases, so the iteration
    turns into Newton's method near the solution.  Steps that break positivity or raise
    the residual by more than ``max_increase`` are rejected and ``dt`` halved.  After the tolerance is met a few pure Newton steps polish the
    solution to rounding level.

    ``frame_change`` is an optional constant diagonal ``C``: the problem is
    solved for the metric ``C^H H C`` and transformed back.

    Returns ``(profile, report)``.
    """
    if spec.mode not in ("stable", "polystable"):
        raise ModelError(f"solver needs a stable or polystable model, got {spec.mode} (c={spec.c}, ell={spec.ell})")
    prob = _RadialProblem(spec, config, frame_change)
    t0 = time.perf_counter()
    if initial is None:
        x = np.zeros(3 * prob.N)
    else:
        x = prob.join(np.asarray(initial[0], float), np.asarray(initial[1], complex))
    F = prob.residual(x)
    interior = slice(0, prob.N - 1)
    dt = config.dt0
    trace = []
    acc = rej = 0
    polish = 0
    it = 0

    def stats(F):
        nrm = prob.pointwise_norm(F)
        return float(np.max(nrm[interior])), float(np.sqrt(np.sum(nrm[interior] ** 2 * prob.r[interior] * prob.h * 2 * np.pi)))

    sup, l2 = stats(F)
    trace.append({"iter": 0, "dt": 0.0, "sup": sup, "l2": l2, "accepted": True})
    while it < config.max_iter:
        if sup <= config.tol:
            if polish >= config.polish_steps:
                break
            step_dt = math.inf
        else:
            step_dt = dt
        it += 1
        ab = -prob.jacobian_banded(x)
        if math.isfinite(step_dt):
            ab[5] += 1.0 / step_dt
        try:
            dx = sla.solve_banded((5, 5), ab, F)
        except (np.linalg.LinAlgError, ValueError):
            dx = np.full_like(x, np.nan)
        x_new = x + dx
        ok = bool(np.all(np.isfinite(x_new)))
        if ok:
            F_new = prob.residual(x_new)
            ok = bool(np.all(np.isfinite(F_new)))
        if ok:
            K, _, _ = prob.fields(x_new)
            ok = bool(np.all(np.real(K[:, 1, 1]) > 0))
        if ok:
            ratio = float(np.linalg.norm(F) / max(np.linalg.norm(F_new), 1e-300))
            limit = 1.0 if not math.isfinite(step_dt) else 1.0 / config.max_increase
            ok = ratio >= limit
        if ok:
            x, F = x_new, F_new
            acc += 1
            if math.isfinite(step_dt):
                grow = config.dt_growth if ratio >= 1.0 else ratio
                dt = min(dt * grow, config.dt_max)
            else:
                polish += 1
            sup, l2 = stats(F)
            trace.append({"iter": it, "dt": step_dt if math.isfinite(step_dt) else -1.0,
                          "sup": sup, "l2": l2, "accepted": True})
        else:
            rej += 1
            trace.append({"iter": it, "dt": step_dt if math.isfinite(step_dt) else -1.0,
                          "sup": sup, "l2": l2, "accepted": False})
            if math.isfinite(step_dt):
                dt = dt / 2
                if dt < 1e-14:
                    break
            else:
                # Newton polishing stalled: the solution is at rounding level
                break
    converged = sup <= config.tol
    report = SolveReport(converged, it, sup, l2, prob.det_error(x), acc, rej, time.perf_counter() - t0, trace)
    if not converged:
        raise SolveError(f"no convergence after {it} iterations (last residual {sup:.3e})", report)
    return prob.profile(x), report


def profile_residual(profile: RadialMetricProfile, spec: LocalModelSpec, config: SolveConfig) -> np.ndarray:
    """Pointwise ``|R|_h`` of a profile under the solver's discretization.

    The profile must sit on ``config.grid``.
    """
    prob = _RadialProblem(spec, config)
    if len(profile.radii) != prob.N or np.max(np.abs(profile.radii - prob.r)) > 1e-12:
        raise RangeError("profile radii do not match the configured grid")
    mu = profile.log_a - prob.lam_ref[0]
    x = prob.join(mu, profile.q)
    return prob.pointwise_norm(prob.residual(x))


# ----------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class BcEstimate:
    b_c: float
    spread: float
    window: Tuple[float, float]


def extract_bc(profile: RadialMetricProfile, spec: LocalModelSpec, window: float = 0.2,
               max_spread: float = 1e-3) -> BcEstimate:
    """``b_c = exp(mean(log|v1| - c log r))`` over the outer fraction of radii."""
    if not 0 < window <= 1:
        raise ValueError("window must be in (0, 1]")
    r = profile.radii
    n = max(2, int(round(window * len(r))))
    idx = np.arange(len(r) - n, len(r))
    vf = profile.v_frame()
    est = 0.5 * vf["log_p1"][idx] - float(spec.c) * np.log(r[idx])
    vals = np.exp(est)
    spread = float(np.max(vals) - np.min(vals))
    b = float(np.exp(np.mean(est)))
    if spread > max_spread:
        raise SolveError(f"b_c estimator spread {spread:.3e} exceeds {max_spread:g}; increase r_max")
    return BcEstimate(b, spread, (float(r[idx[0]]), float(r[idx[-1]])))


def _rescaled_for_t(profile: RadialMetricProfile, spec: LocalModelSpec, t: float) -> RadialMetricProfile:
    from .localmodel import rescale_phi_tau, tau_for_t

    return rescale_phi_tau(profile, spec, tau_for_t(spec, t))


def bracket_norm(profile: RadialMetricProfile, spec: LocalModelSpec, t: float = 1.0) -> np.ndarray:
    """``|[t theta, (t theta)^*]|_h`` at every sample radius of ``profile``."""
    H = profile.v_frame_field()
    r = profile.radii
    T = np.zeros_like(H)
    T[:, 0, 0] = t * spec.alpha * r**spec.m
    T[:, 1, 1] = -t * spec.alpha * r**spec.m
    Hi = _inv2(H)
    Ts = Hi @ _dag(T) @ H
    Br = T @ Ts - Ts @ T
    return metric_norm(Br, H)


@dataclass(frozen=True)
class ScanResult:
    t: Tuple[float, ...]
    values: Tuple[float, ...]
    fit: DecayFit

    @property
    def strictly_decreasing(self) -> bool:
        return strictly_decreasing(self.values)

    def to_json(self) -> dict:
        return {"t": list(self.t), "values": list(self.values), "fit": self.fit.to_json(),
                "strictly_decreasing": self.strictly_decreasing}


def _check_t_list(t_list):
    t = [float(x) for x in t_list]
    if not t or any(x <= 0 for x in t) or any(b <= a for a, b in zip(t, t[1:])):
        raise ValueError("t_list must be positive and increasing")
    return t


def decoupling_scan(profile: RadialMetricProfile, spec: LocalModelSpec, t_list: Sequence[float],
                    annulus: Tuple[float, float] = (1.0, 2.0)) -> ScanResult:
    """Sup over the annulus of ``|[t theta, (t theta)^*]|_{h_t}`` for each t."""
    t_vals = _check_t_list(t_list)
    lo, hi = annulus
    values = []
    for t in t_vals:
        pt = _rescaled_for_t(profile, spec, t)
        idx = pt.restrict(lo, hi)
        sub = RadialMetricProfile(pt.radii[idx], pt.log_a[idx], pt.q[idx], pt.ell, pt.det, pt.sigma, pt.frame_mode)
        values.append(float(np.max(bracket_norm(sub, spec, t))))
    return ScanResult(tuple(t_vals), tuple(values), DecayFit.from_samples(t_vals, values))


def dvector_pairs_2x2(log_x, log_y, z) -> np.ndarray:
    """d-vectors of whitened 2x2 metrics ``[[x, z], [conj z, y]]`` against the
    identity, accurate when the metric is close to the identity."""
    ex, ey = np.expm1(log_x), np.expm1(log_y)
    m = 0.5 * (ex + ey)
    dlt = np.sqrt((0.5 * (ex - ey)) ** 2 + np.abs(z) ** 2)
    up = 0.5 * np.log1p(m + dlt)
    dn = 0.5 * np.log1p(m - dlt)
    return np.stack([up, dn], axis=-1)


def limit_distance(profile: RadialMetricProfile, spec: LocalModelSpec, gamma: float) -> np.ndarray:
    """Per-radius ``|d(h_lim, Psi_gamma^* h)|_inf`` for a v-frame profile."""
    vf = profile.v_frame()
    r = profile.radii
    c, ell = float(spec.c), spec.ell
    lx = vf["log_p1"] + 2 * math.log(gamma) - 2 * c * np.log(r)
    ly = vf["log_p2"] - 2 * math.log(gamma) + (2 * c + 2 * ell) * np.log(r)
    z = vf["w"] * r ** (ell)  # w / sqrt(D1 D2) with D1 D2 = r^(-2 ell)
    kap = dvector_pairs_2x2(lx, ly, z)
    return np.max(np.abs(kap), axis=-1)


def limit_convergence_check(profile: RadialMetricProfile, spec: LocalModelSpec, b_c: float,
                            t_list: Sequence[float], T: float = 1.0) -> ScanResult:
    """Sup over ``T <= |zeta| <= (solved range)`` of the limit distance per t."""
    from .localmodel import limiting_rescale_factor

    t_vals = _check_t_list(t_list)
    values = []
    for t in t_vals:
        pt = _rescaled_for_t(profile, spec, t)
        idx = pt.restrict(T, pt.r_max)
        sub = RadialMetricProfile(pt.radii[idx], pt.log_a[idx], pt.q[idx], pt.ell, pt.det, pt.sigma, pt.frame_mode)
        gamma = limiting_rescale_factor(spec, t, b_c)
        values.append(float(np.max(limit_distance(sub, spec, gamma))))
    return ScanResult(tuple(t_vals), tuple(values), DecayFit.from_samples(t_vals, values))


def offdiagonal_decay_fit(profile: RadialMetricProfile, spec: LocalModelSpec, r_lo: float = 1.0,
                          r_hi: Optional[float] = None) -> DecayFit:
    """Fit ``|h(v1, v2)| ~ K exp(-delta r^(m+1))`` on ``[r_lo, r_hi]``."""
    r_hi = profile.r_max if r_hi is None else r_hi
    idx = profile.restrict(r_lo, r_hi)
    w = np.abs(profile.v_frame()["w"][idx])
    x = profile.radii[idx] ** (spec.m + 1)
    return DecayFit.from_samples(x, w)


# ----------------------------------------------------------------------------
# fields on full polar grids


def profile_to_field(profile: RadialMetricProfile, n_angles: int) -> Tuple[PolarGrid, np.ndarray]:
    """The e-frame metric of a profile sampled on a full polar grid."""
    grid = PolarGrid(profile.radii, n_angles, "mirror")
    return grid, profile.e_frame_field(grid.points())


def higgs_field(spec: LocalModelSpec, grid: PolarGrid, frame: str = E_FRAME, t: complex = 1.0) -> np.ndarray:
    return t * higgs_matrix(spec, frame, grid.points())


def hkappa_residual(kappa: float, L: int, spec: LocalModelSpec, n_radii: int = 200,
                    n_angles: int = 64) -> ResidualResult:
    """Hitchin residual of the explicit family ``h_kappa`` on the unit disc."""
    from .localmodel import hkappa_field

    grid = PolarGrid.uniform(n_radii, 1.0, n_angles)
    pts = grid.points()
    return hitchin_residual(hkappa_field(kappa, L, spec, pts), higgs_matrix(spec, E_FRAME, pts), grid)
