"""Singular perturbation along a path and WKB comparison of transports.

A connection along ``[0, 1]`` is ``d/ds + A^t(s) + B(s)`` with
``A^t = diag(alpha_1^t, ..., alpha_r^t)``, ``alpha_j^t = t a_j + b_j`` and
``B`` off-diagonal.  Parallel sections solve ``x' = -(A^t + B) x`` and the
transport matrix maps ``x(0)`` to ``x(1)``.

The operator ``D0(X) = X' + [A^t, X]`` acts entrywise on off-diagonal
functions, ``D0(X)_ij = X_ij' + (alpha_i - alpha_j) X_ij``, and ``I0`` is its
inverse on functions with ``X_ij(1) = 0`` for ``i < j`` and ``X_ij(0) = 0``
for ``i > j``.  When the real parts of the ``a_j`` are increasing these
boundary conditions make every exponential weight in ``I0`` bounded by one
(up to the ``b`` contributions), uniformly in ``t``.

Sampled functions are arrays of shape ``(n_nodes, r, r)``.  Stiff data
(``t |a_i - a_j|`` large) must be sampled finely enough for the derivative
stencils to resolve boundary layers; :func:`resolve` refines a path so that
``max |alpha_i - alpha_j| * h <= 0.015`` and the solvers call it internally.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline
from scipy.ndimage import correlate1d

from .fitting import DecayFit
from .gaugecalc import HermitianForm, compound_matrix

STIFF_STEP = 0.015
LOG_BLOCK = 40.0


class PathError(ValueError):
    """Malformed or critical path data."""


class GaugeError(RuntimeError):
    def __init__(self, message: str, residual: float = float("nan"), contraction: float = float("nan")):
        super().__init__(message)
        self.residual = residual
        self.contraction = contraction


class TransportError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# path data


def _fd_weights(offsets: Sequence[int]) -> np.ndarray:
    """First-derivative weights for unit spacing on the given offsets."""
    k = np.asarray(offsets, dtype=float)
    n = len(k)
    V = np.vander(k, n, increasing=True).T
    rhs = np.zeros(n)
    rhs[1] = 1.0
    return np.linalg.solve(V, rhs)


_C4 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
_C6 = np.array([-1.0, 9.0, -45.0, 0.0, 45.0, -9.0, 1.0]) / 60.0
_EDGE = {off: _fd_weights(range(-off, 7 - off)) for off in range(4)}


def derivative(X: np.ndarray, h: float, order: int = 4) -> np.ndarray:
    """Derivative along axis 0 of uniformly sampled data.

    ``order == 4``: five-point central stencil inside, one-sided seven-point
    stencils (sixth order) at the nodes the central stencil cannot reach.
    ``order == 6``: seven-point central stencil inside, same edge treatment.
    """
    X = np.asarray(X)
    n = X.shape[0]
    if n < 7:
        raise PathError("need at least 7 nodes for derivative stencils")
    if order == 4:
        c, half = _C4, 2
    elif order == 6:
        c, half = _C6, 3
    else:
        raise ValueError("order must be 4 or 6")
    # the stencil runs along a contiguous last axis (real and imaginary parts separately)
    X = np.asarray(X, dtype=np.result_type(X.dtype, float))
    parts = (X.real, X.imag) if np.iscomplexobj(X) else (X,)
    outs = [np.moveaxis(correlate1d(np.ascontiguousarray(np.moveaxis(p, 0, -1)), c, axis=-1, mode="nearest"), -1, 0)
            for p in parts]
    D = outs[0] + 1j * outs[1] if len(outs) == 2 else outs[0]
    for off in range(half):
        w = _EDGE[off]
        D[off] = np.tensordot(w, X[0:7], axes=(0, 0))
        D[n - 1 - off] = -np.tensordot(w, X[n - 1::-1][0:7], axes=(0, 0))
    return D / h


@dataclass(frozen=True)
class PathConnectionData:
    """Samples of ``a_j``, ``b_j`` and ``B`` on a uniform grid of ``[0, 1]``.

    ``a`` and ``b`` have shape ``(N + 1, r)``, ``B`` shape ``(N + 1, r, r)``.
    Optional callables (``functions = (a_fn, b_fn, B_fn)``, each mapping an
    array of ``s`` values to samples) make refinement exact; without them,
    refinement interpolates with cubic splines.
    """

    a: np.ndarray
    b: np.ndarray
    B: np.ndarray
    t: float = 1.0
    C0: Optional[float] = None
    functions: Optional[Tuple[Callable, Callable, Callable]] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        a = np.array(self.a, dtype=complex)
        b = np.array(self.b, dtype=complex)
        B = np.array(self.B, dtype=complex)
        if a.ndim != 2 or a.shape[0] < 7 or a.shape[1] < 1:
            raise PathError("a must have shape (N + 1, r) with N >= 6")
        n, r = a.shape
        if b.shape != (n, r) or B.shape != (n, r, r):
            raise PathError(f"shape mismatch: a {a.shape}, b {b.shape}, B {B.shape}")
        if np.any(np.diagonal(B, axis1=1, axis2=2) != 0):
            raise PathError("B must have zero diagonal")
        if not (self.t >= 0 and math.isfinite(self.t)):
            raise PathError("t must be a finite nonnegative number")
        if self.C0 is not None and np.max(np.abs(b), initial=0.0) > self.C0:
            raise PathError(f"|b_j| exceeds the declared bound C0 = {self.C0}")
        for arr in (a, b, B):
            if not np.all(np.isfinite(arr)):
                raise PathError("path data must be finite")
            arr.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "t", float(self.t))

    @classmethod
    def from_functions(cls, a_fn, b_fn, B_fn, n: int, t: float = 1.0, C0: Optional[float] = None):
        s = np.linspace(0.0, 1.0, n + 1)
        return cls(a_fn(s), b_fn(s), B_fn(s), t, C0, (a_fn, b_fn, B_fn))

    @classmethod
    def constant(cls, a: Sequence[complex], b: Sequence[complex], B, n: int, t: float = 1.0):
        a = np.asarray(a, dtype=complex)
        b = np.asarray(b, dtype=complex)
        B = np.asarray(B, dtype=complex)
        return cls.from_functions(lambda s: np.broadcast_to(a, (len(s), len(a))).copy(),
                                  lambda s: np.broadcast_to(b, (len(s), len(b))).copy(),
                                  lambda s: np.broadcast_to(B, (len(s),) + B.shape).copy(), n, t)

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.a.shape[0]

    @property
    def h(self) -> float:
        return 1.0 / (self.n_nodes - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_nodes)

    @property
    def alpha(self) -> np.ndarray:
        return self.t * self.a + self.b

    def with_t(self, t: float) -> "PathConnectionData":
        return PathConnectionData(self.a, self.b, self.B, t, self.C0, self.functions)

    def with_B(self, B_fn: Callable) -> "PathConnectionData":
        fns = None if self.functions is None else (self.functions[0], self.functions[1], B_fn)
        return PathConnectionData(self.a, self.b, B_fn(self.nodes), self.t, self.C0, fns)

    def sup_B(self) -> float:
        """``|B|_0``: sup over nodes of the Frobenius norm."""
        return _norm0(self.B)

    def evaluate(self, s) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(a, b, B)`` at arbitrary points of ``[0, 1]``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if self.functions is not None:
            fa, fb, fB = self.functions
            return (np.asarray(fa(s), complex), np.asarray(fb(s), complex), np.asarray(fB(s), complex))
        x = self.nodes
        return (CubicSpline(x, self.a)(s), CubicSpline(x, self.b)(s), CubicSpline(x, self.B)(s))

    def refined(self, factor: int) -> "PathConnectionData":
        """Same path sampled with ``factor`` times as many intervals."""
        if factor == 1:
            return self
        n = (self.n_nodes - 1) * factor
        s = np.linspace(0.0, 1.0, n + 1)
        a, b, B = self.evaluate(s)
        for k in range(self.rank):
            B[:, k, k] = 0.0
        return PathConnectionData(a, b, B, self.t, self.C0, self.functions)

    def stiffness(self) -> float:
        """``max |alpha_i - alpha_j| * h`` over nodes and pairs."""
        al = self.alpha
        gap = np.abs(al[:, :, None] - al[:, None, :])
        return float(np.max(gap) * self.h)

    def subpath(self, s0: float, s1: float) -> "PathConnectionData":
        """The restriction to ``[s0, s1]``, reparametrized by ``[0, 1]``."""
        if not 0 <= s0 < s1 <= 1:
            raise PathError("need 0 <= s0 < s1 <= 1")
        L = s1 - s0
        i0, i1 = s0 / self.h, s1 / self.h
        if abs(i0 - round(i0)) < 1e-9 and abs(i1 - round(i1)) < 1e-9 and self.functions is None:
            sl = slice(int(round(i0)), int(round(i1)) + 1)
            return PathConnectionData(L * self.a[sl], L * self.b[sl], L * self.B[sl], self.t)
        n = max(6, int(round((self.n_nodes - 1) * L)))
        base = self

        def fa(s):
            return L * base.evaluate(s0 + L * np.asarray(s))[0]

        def fb(s):
            return L * base.evaluate(s0 + L * np.asarray(s))[1]

        def fB(s):
            return L * base.evaluate(s0 + L * np.asarray(s))[2]

        return PathConnectionData.from_functions(fa, fb, fB, n, self.t)

    def to_json(self) -> dict:
        r = self.rank

        def pair(x):
            return {"re": [float(v) for v in np.real(x)], "im": [float(v) for v in np.imag(x)]}

        return {
            "n_nodes": self.n_nodes,
            "rank": r,
            "t": self.t,
            "C0": self.C0,
            "a": [pair(self.a[:, j]) for j in range(r)],
            "b": [pair(self.b[:, j]) for j in range(r)],
            "B": [[pair(self.B[:, i, j]) for j in range(r)] for i in range(r)],
        }

    @classmethod
    def from_json(cls, obj) -> "PathConnectionData":
        r = int(obj["rank"])
        n = int(obj["n_nodes"])

        def arr(p):
            x = np.asarray(p["re"], float) + 1j * np.asarray(p["im"], float)
            if x.shape != (n,):
                raise PathError("per-node array has the wrong length")
            return x

        a = np.stack([arr(obj["a"][j]) for j in range(r)], axis=1)
        b = np.stack([arr(obj["b"][j]) for j in range(r)], axis=1)
        B = np.zeros((n, r, r), dtype=complex)
        for i in range(r):
            for j in range(r):
                B[:, i, j] = arr(obj["B"][i][j])
        return cls(a, b, B, float(obj.get("t", 1.0)), obj.get("C0"))


def resolve(conn: PathConnectionData, max_step: float = STIFF_STEP) -> Tuple[PathConnectionData, int]:
    """Refine ``conn`` until its stiffness is at most ``max_step``.

    Returns the refined path and the integer refinement factor, so that
    every ``factor``-th node of the result is a node of the input.
    """
    factor = max(1, int(math.ceil(conn.stiffness() / max_step)))
    return conn.refined(factor), factor


@dataclass(frozen=True)
class NoncriticalVerdict:
    noncritical: bool
    ordered: bool
    gap: float


def check_noncritical(conn: PathConnectionData) -> NoncriticalVerdict:
    """Do the real parts of the ``a_j`` stay apart along the sampled path?

    A pair whose difference changes sign between neighbouring nodes counts
    as a crossing (gap 0) even if no node hits it.
    """
    ra = np.real(conn.a)
    r = conn.rank
    if r == 1:
        return NoncriticalVerdict(True, True, math.inf)
    gap = math.inf
    crossing = False
    for i in range(r):
        for j in range(i + 1, r):
            d = ra[:, j] - ra[:, i]
            gap = min(gap, float(np.min(np.abs(d))))
            if np.any(np.sign(d[1:]) != np.sign(d[:-1])):
                crossing = True
    if crossing:
        gap = 0.0
    ordered = bool(np.all(np.diff(ra, axis=1) > 0))
    return NoncriticalVerdict(gap > 0, ordered, gap)


def _require_ordered(conn: PathConnectionData):
    if not np.all(np.diff(np.real(conn.a), axis=1) > 0):
        raise PathError("Re a_j must be strictly increasing in j at every node")


# ----------------------------------------------------------------------------
# D0 and I0


def _check_function(X, conn: PathConnectionData) -> np.ndarray:
    X = np.asarray(X, dtype=complex)
    r = conn.rank
    if X.shape[:3] != (conn.n_nodes, r, r):
        raise PathError(f"function of shape {X.shape} does not match the grid ({conn.n_nodes}, {r}, {r})")
    return X


def offdiag(X: np.ndarray) -> np.ndarray:
    Y = np.array(X, copy=True)
    r = Y.shape[1]
    Y[:, np.arange(r), np.arange(r)] = 0.0
    return Y


def diag_part(X: np.ndarray) -> np.ndarray:
    r = X.shape[1]
    Y = np.zeros_like(X)
    Y[:, np.arange(r), np.arange(r)] = X[:, np.arange(r), np.arange(r)]
    return Y


def apply_D0(X, conn: PathConnectionData) -> np.ndarray:
    """``X' + [A^t, X]`` entrywise, with the fourth-order stencil."""
    X = _check_function(X, conn)
    al = conn.alpha
    out = np.zeros_like(X)
    extra = (1,) * (X.ndim - 3)
    for i in range(conn.rank):
        for j in range(conn.rank):
            if i != j and np.any(X[:, i, j] != 0):
                x = X[:, i, j]
                out[:, i, j] = derivative(x, conn.h, 4) + (al[:, i] - al[:, j]).reshape((-1,) + extra) * x
    return out


def cumulative_integral(f: np.ndarray, h: float) -> np.ndarray:
    """Running integral along axis 0 of uniformly sampled data, fourth order.

    Each interval uses the cubic through the four nearest nodes; works for
    complex data (unlike the scipy routines, which drop imaginary parts).
    """
    f = np.asarray(f)
    n = f.shape[0]
    if n < 4:
        raise PathError("need at least 4 nodes to integrate")
    seg = np.empty((n - 1,) + f.shape[1:], dtype=np.result_type(f.dtype, float))
    seg[1:n - 2] = (13.0 * (f[1:n - 2] + f[2:n - 1]) - (f[0:n - 3] + f[3:n])) * (h / 24.0)
    seg[0] = (9.0 * f[0] + 19.0 * f[1] - 5.0 * f[2] + f[3]) * (h / 24.0)
    seg[n - 2] = (9.0 * f[n - 1] + 19.0 * f[n - 2] - 5.0 * f[n - 3] + f[n - 4]) * (h / 24.0)
    out = np.zeros((n,) + f.shape[1:], dtype=seg.dtype)
    np.cumsum(seg, axis=0, out=out[1:])
    return out


def _forward_solve(lam: np.ndarray, Y: np.ndarray, h: float) -> np.ndarray:
    """``X' + lam X = Y`` with ``X(0) = 0`` and ``Re lam > 0`` mostly.

    The weight ``exp(-(F(s) - F(tau)))`` is applied block by block: inside a
    block ``Re F`` varies by at most ``LOG_BLOCK`` so that no exponential
    overflows, and the running value is carried across block boundaries.
    """
    n = len(lam)
    F = cumulative_integral(lam, h)
    X = np.zeros_like(Y)
    extra = (1,) * (Y.ndim - 1)
    # fixed-length blocks over which |F| changes by at most LOG_BLOCK
    rate = float(np.max(np.abs(lam))) * h
    m = n - 1 if rate == 0 else max(3, min(n - 1, int(LOG_BLOCK / rate)))
    start = 0
    while start < n - 1:
        stop = min(start + m, n - 1)
        if stop - start < 3:
            start = stop - 3
        dF = F[start:stop + 1] - F[start]
        up = np.exp(dF).reshape((-1,) + extra)
        down = np.exp(-dF).reshape((-1,) + extra)
        C = cumulative_integral(up * Y[start:stop + 1], h)
        X[start:stop + 1] = down * (C + X[start])
        start = stop
    return X


def apply_I0(Y, conn: PathConnectionData) -> np.ndarray:
    """Inverse of :func:`apply_D0` with the path's boundary conditions.

    Extra trailing axes of ``Y`` (beyond ``(n_nodes, r, r)``) are treated as a
    batch of functions.
    """
    Y = _check_function(Y, conn)
    _require_ordered(conn)
    r = conn.rank
    al = conn.alpha
    X = np.zeros_like(Y)
    h = conn.h
    for i in range(r):
        for j in range(r):
            if i == j:
                continue
            lam = al[:, i] - al[:, j]
            y = Y[:, i, j]
            if not np.any(y != 0):
                continue
            if i > j:
                X[:, i, j] = _forward_solve(lam, y, h)
            else:
                # reflect s -> 1 - s: the upper-limit integral becomes a lower-limit one
                X[:, i, j] = _forward_solve(-lam[::-1], -y[::-1], h)[::-1]
    return X


def _norm0(X) -> float:
    """Sup over nodes of the Frobenius norm."""
    return float(np.max(np.sqrt(np.sum(np.abs(np.asarray(X)) ** 2, axis=(1, 2)))))


# ----------------------------------------------------------------------------
# gauge solve


@dataclass(frozen=True)
class GaugePair:
    """``G`` (off-diagonal) and ``H`` (diagonal) sampled on ``conn``'s grid."""

    G: np.ndarray
    H: np.ndarray
    conn: PathConnectionData
    stride: int = 1
    iterations: int = 0
    residual: float = 0.0
    contraction: float = 0.0

    def at_nodes(self) -> Tuple[np.ndarray, np.ndarray]:
        """``(G, H)`` on the grid of the path handed to :func:`solve_gauge`."""
        return self.G[:: self.stride], self.H[:: self.stride]

    def boundary_defect(self) -> float:
        r = self.conn.rank
        iu = np.triu_indices(r, 1)
        il = np.tril_indices(r, -1)
        return float(max(np.max(np.abs(self.G[-1][iu]), initial=0.0), np.max(np.abs(self.G[0][il]), initial=0.0)))

    def bound_ratio(self) -> float:
        """``(|G|_0 + |D0 G|_0 + |H|_0) / |B|_0``."""
        nb = _norm0(self.conn.B)
        if nb == 0:
            return 0.0
        return (_norm0(self.G) + _norm0(apply_D0(self.G, self.conn)) + _norm0(self.H)) / nb


def gauge_residual(G, H, conn: PathConnectionData, order: int = 6) -> np.ndarray:
    """``(I+G)(A+B) - (A+H)(I+G) - G'`` at every node (derivative stencil of
    the given order, sixth by default so it differs from the one in D0)."""
    G = _check_function(G, conn)
    r = conn.rank
    A = np.zeros_like(G)
    A[:, np.arange(r), np.arange(r)] = conn.alpha
    I = np.eye(r)
    return (I + G) @ (A + conn.B) - (A + H) @ (I + G) - derivative(G, conn.h, order)


def solve_gauge(conn: PathConnectionData, tol: float = 1e-14, max_iter: int = 200,
                threshold: float = 0.05, refine: bool = True) -> GaugePair:
    """Gauge ``(G, H)`` with ``A + B = (I+G)^-1 (A+H)(I+G) + (I+G)^-1 G'``.

    Picard iteration ``G <- I0(B + offdiag(G B) - H G)`` with ``H = diag(G B)``.
    The step is damped by one half as soon as the increment grows.  With
    ``refine`` the path is first refined by :func:`resolve`; the result lives on
    the refined grid and :meth:`GaugePair.at_nodes` samples it back.
    """
    if conn.sup_B() > threshold:
        raise GaugeError(f"|B|_0 = {conn.sup_B():.3g} exceeds the smallness threshold {threshold}")
    _require_ordered(conn)
    fine, stride = resolve(conn) if refine else (conn, 1)
    B = fine.B
    r = fine.rank
    G = np.zeros_like(B)
    H = np.zeros_like(B)
    if not np.any(B != 0):
        return GaugePair(G, H, fine, stride, 0, 0.0, 0.0)
    damping = 1.0
    last = math.inf
    contraction = 0.0
    it = 0
    nb = _norm0(B)
    for it in range(1, max_iter + 1):
        GB = G @ B
        H = diag_part(GB)
        G_new = apply_I0(offdiag(B + GB - H @ G), fine)
        step = _norm0(G_new - G)
        if step > last and damping == 1.0:
            damping = 0.5
        G = G + damping * (G_new - G)
        if math.isfinite(last) and last > 0:
            contraction = step / last
        last = step
        if step <= tol * max(nb, 1e-300) or step == 0.0:
            break
        if not np.all(np.isfinite(G)):
            raise GaugeError("gauge iteration diverged", math.nan, contraction)
    else:
        res = _norm0(gauge_residual(G, diag_part(G @ B), fine))
        raise GaugeError(f"no contraction within {max_iter} iterations (residual {res:.3e}, "
                         f"contraction factor {contraction:.3g}); B may be too large for this t",
                         res, contraction)
    H = diag_part(G @ B)
    res = _norm0(gauge_residual(G, H, fine))
    return GaugePair(G, H, fine, stride, it, res, contraction)


# ----------------------------------------------------------------------------
# transport


@dataclass(frozen=True)
class FactoredTransport:
    """``left @ diag(exp(log_diag)) @ right``; keeps exponentially graded
    transports free of overflow and of the rounding of their small entries."""

    left: np.ndarray
    log_diag: np.ndarray
    right: np.ndarray

    def matrix(self) -> np.ndarray:
        return self.left @ np.diag(np.exp(self.log_diag)) @ self.right

    def log_det(self) -> complex:
        return (np.log(complex(np.linalg.det(self.left))) + complex(np.sum(self.log_diag))
                + np.log(complex(np.linalg.det(self.right))))

    def log_singular_values(self, h0=None, h1=None) -> np.ndarray:
        """Descending ``log sigma_k`` of the transport from ``(C^r, h0)`` to ``(C^r, h1)``."""
        r = len(self.log_diag)
        P, Q = self.left, self.right
        if h1 is not None:
            P = HermitianForm(np.asarray(getattr(h1, "entries", h1))).chol.conj().T @ P
        if h0 is not None:
            L0 = HermitianForm(np.asarray(getattr(h0, "entries", h0))).chol
            Q = np.linalg.solve(L0, Q.conj().T).conj().T
        re = np.real(self.log_diag)
        ph = np.exp(1j * np.imag(self.log_diag))
        Pd = P * ph[None, :]
        logs = [0.0]
        for k in range(1, r + 1):
            subsets = list(itertools.combinations(range(r), k))
            w = np.array([sum(re[list(S)]) for S in subsets])
            top = float(np.max(w))
            M = compound_matrix(Pd, k) @ np.diag(np.exp(w - top)) @ compound_matrix(Q, k)
            logs.append(top + float(np.log(np.linalg.norm(M, 2))))
        return np.sort(np.diff(logs))[::-1]


def _integral(f: np.ndarray, h: float) -> np.ndarray:
    """Integral over ``[0, 1]``: the rule of :func:`cumulative_integral` summed
    with integer weights, so constants integrate exactly."""
    f = np.asarray(f)
    n = f.shape[0]
    w = np.full(n, 24.0)
    w[:4] = [9.0, 28.0, 23.0, 24.0] if n > 7 else w[:4]
    w[-4:] = [24.0, 23.0, 28.0, 9.0] if n > 7 else w[-4:]
    if n <= 7:
        return cumulative_integral(f, h)[-1]
    return np.tensordot(w, f, axes=(0, 0)) / (24.0 * (n - 1))


def gauged_transport(conn: PathConnectionData, gauge: Optional[GaugePair] = None) -> FactoredTransport:
    """Transport as ``(I+G(1))^-1 exp(-int (alpha + H)) (I+G(0))``."""
    if gauge is None:
        gauge = solve_gauge(conn)
    fine = gauge.conn
    r = fine.rank
    diag_H = gauge.H[:, np.arange(r), np.arange(r)]
    log_d = -_integral(fine.alpha + diag_H, fine.h)
    I = np.eye(r)
    left = np.linalg.inv(I + gauge.G[-1])
    right = I + gauge.G[0]
    return FactoredTransport(left, log_d, right)


def direct_transport(conn: PathConnectionData, rtol: float = 1e-12, atol: float = 1e-14,
                     stiffness_limit: float = 2e4) -> np.ndarray:
    """Integrate ``X' = -(A + B) X`` with an explicit eighth-order method."""
    r = conn.rank
    gap = conn.stiffness() / conn.h
    if gap > stiffness_limit:
        raise TransportError(f"direct integration of a path with |alpha_i - alpha_j| up to {gap:.3g} "
                             "is too stiff; use the gauged transport instead")

    def rhs(s, y):
        a, b, B = conn.evaluate(np.array([s]))
        M = np.diag(conn.t * a[0] + b[0]) + B[0]
        return (-M @ y.reshape(r, r)).ravel()

    sol = solve_ivp(rhs, (0.0, 1.0), np.eye(r, dtype=complex).ravel(), method="DOP853", rtol=rtol, atol=atol)
    if sol.status != 0:
        raise TransportError(f"direct integration failed: {sol.message}; use the gauged transport")
    return sol.y[:, -1].reshape(r, r)


def parallel_transport(conn: PathConnectionData, gauge: Optional[GaugePair] = None,
                       mode: str = "gauged") -> np.ndarray:
    """Transport matrix from ``s = 0`` to ``s = 1``.

    ``mode == "gauged"`` uses (or computes) the gauge and exact exponentials of
    the diagonal integrals; ``mode == "direct"`` integrates the raw system.
    """
    if mode == "direct":
        return direct_transport(conn)
    if mode != "gauged":
        raise ValueError(f"unknown transport mode {mode!r}")
    return gauged_transport(conn, gauge).matrix()


# ----------------------------------------------------------------------------
# WKB comparison


def flat_connection(conn: PathConnectionData, t: float) -> PathConnectionData:
    """Path data of ``d + t theta + t theta^*`` in an almost orthonormal frame:
    the diagonal is ``2 t Re a_j + b_j``."""
    a2 = 2 * np.real(conn.a)
    fns = None
    if conn.functions is not None:
        fa, fb, fB = conn.functions
        fns = (lambda s: 2 * np.real(np.asarray(fa(s), complex)).astype(complex), fb, fB)
    return PathConnectionData(a2, conn.b, conn.B, t, conn.C0, fns)


@dataclass(frozen=True)
class WkbReport:
    t: Tuple[float, ...]
    kappa: Tuple[Tuple[float, ...], ...]  # (1/t) d-vector per t
    target: Tuple[float, ...]
    errors: Tuple[float, ...]
    fit: DecayFit

    def to_json(self) -> dict:
        return {"t": list(self.t), "kappa": [list(k) for k in self.kappa], "target": list(self.target),
                "errors": list(self.errors), "fit": self.fit.to_json()}

    def to_csv(self) -> str:
        r = len(self.target)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "err_inf"] + [f"kappa_{k + 1}" for k in range(r)] + [f"target_{k + 1}" for k in range(r)])
        for t, e, k in zip(self.t, self.errors, self.kappa):
            w.writerow([repr(float(t)), repr(float(e))] + [repr(float(x)) for x in k] + [repr(float(x)) for x in self.target])
        return buf.getvalue()


def wkb_compare(conn: PathConnectionData, t_list: Sequence[float], h0=None, h1=None,
                B_scale: Optional[Callable[[float], float]] = None) -> WkbReport:
    """``(1/t) d(h0, Pi_t^* h1)`` against ``(2 alpha_1, ..., 2 alpha_r)``.

    ``alpha_i = -int Re a_i``; ``Pi_t`` is the transport of
    :func:`flat_connection`.  Endpoint metrics default to the identity.
    ``B_scale(t)`` optionally multiplies the off-diagonal part at each t,
    modelling families whose off-diagonal coupling itself decays with t.
    """
    verdict = check_noncritical(conn)
    if not verdict.noncritical or not verdict.ordered:
        raise PathError(f"critical or unordered path (gap {verdict.gap:.3g})")
    t_vals = [float(t) for t in t_list]
    if not t_vals or any(t <= 0 for t in t_vals):
        raise ValueError("t values must be positive")
    r = conn.rank
    kappas, errors = [], []
    target = None
    for t in t_vals:
        flat = flat_connection(conn, t)
        if B_scale is not None:
            k = float(B_scale(t))
            fns = flat.functions
            if fns is not None:
                fB = fns[2]
                fns = (fns[0], fns[1], lambda s, fB=fB, k=k: k * np.asarray(fB(s)))
            flat = PathConnectionData(flat.a, flat.b, k * flat.B, t, flat.C0, fns)
        gauge = solve_gauge(flat)
        fine = gauge.conn
        alpha_i = -_integral(np.real(fine.a), fine.h) / 2.0  # fine.a = 2 Re a
        tgt = 2 * alpha_i
        if target is None:
            target = tgt
        diag_H = gauge.H[:, np.arange(r), np.arange(r)]
        rest = -_integral(np.real(fine.b + diag_H), fine.h)
        trivial = (not np.any(gauge.G != 0)) and h0 is None and h1 is None
        if trivial:
            kap = np.sort(tgt + rest / t)[::-1]
        else:
            ft = gauged_transport(flat, gauge)
            kap = ft.log_singular_values(h0, h1) / t
        kappas.append(tuple(float(x) for x in kap))
        errors.append(float(np.max(np.abs(kap - np.sort(tgt)[::-1]))))
    target_sorted = tuple(float(x) for x in np.sort(target)[::-1])
    return WkbReport(tuple(t_vals), tuple(kappas), target_sorted, tuple(errors), DecayFit.from_samples(t_vals, errors))


def random_ordered_path(rng: np.random.Generator, r: int, n: int, gap: float = 1.0, b_bound: float = 0.3,
                        B_size: float = 0.05, t: float = 1.0) -> PathConnectionData:
    """Random smooth path data with ``Re a_{j+1} - Re a_j >= gap``.

    Each function is a constant plus a few low Fourier modes, so the path
    can be refined exactly.
    """
    K = 3

    base = np.cumsum(np.full(r, gap + 0.5)) - (gap + 0.5) * (r + 1) / 2
    ca = rng.uniform(-1, 1, size=(r, 2, K)) * 0.25 / K
    ia = rng.normal(size=r)
    cb = rng.uniform(-1, 1, size=(r, 2, K)) * b_bound / (2 * K)
    cB = rng.uniform(-1, 1, size=(r, r, 2, K)) * B_size / (2 * K)
    ks = np.arange(1, K + 1)

    def modes(s):
        s = np.asarray(s, dtype=float)
        ang = np.pi * ks[None, :] * s[:, None]
        return np.cos(ang), np.sin(ang)

    def fa(s):
        c, sn = modes(s)
        re = base[None, :] + c @ ca[:, 0, :].T
        im = ia[None, :] + sn @ ca[:, 1, :].T
        return re + 1j * im

    def fb(s):
        c, sn = modes(s)
        return c @ cb[:, 0, :].T + 1j * (sn @ cb[:, 1, :].T)

    def fB(s):
        c, sn = modes(s)
        out = np.einsum("nk,ijk->nij", c, cB[:, :, 0, :]) + 1j * np.einsum("nk,ijk->nij", sn, cB[:, :, 1, :])
        out[:, np.arange(r), np.arange(r)] = 0.0
        return out

    return PathConnectionData.from_functions(fa, fb, fB, n, t, C0=b_bound)
