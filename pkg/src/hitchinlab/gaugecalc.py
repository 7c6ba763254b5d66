"""Frame-based Hermitian linear algebra.

A Hermitian metric on ``C^r`` is stored through its Gram matrix in a chosen
frame, ``H[i, j] = h(v_i, v_j)``, antilinear in the first slot, so that a
coordinate column ``x`` has ``|x|^2 = x^H H x``.  Writing ``H = L L^H``
(Cholesky), the map ``x -> L^H x`` is an isometry onto ``C^r`` with the
standard metric; most operations below whiten through it.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg as sla

ALG_TOL = 1e-10


class MetricError(ValueError):
    """Invalid metric or incompatible inputs."""


@dataclass(frozen=True, eq=False)
class HermitianForm:
    entries: np.ndarray

    def __eq__(self, other):
        return isinstance(other, HermitianForm) and np.array_equal(self.entries, other.entries)

    __hash__ = None

    def __post_init__(self):
        H = np.array(self.entries, dtype=complex)
        if H.ndim != 2 or H.shape[0] != H.shape[1] or H.shape[0] == 0:
            raise MetricError(f"metric must be a square matrix, got shape {H.shape}")
        scale = max(1.0, float(np.max(np.abs(H))))
        if np.max(np.abs(H - H.conj().T)) > 1e-12 * scale:
            raise MetricError("metric matrix is not Hermitian")
        H = 0.5 * (H + H.conj().T)
        try:
            np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            raise MetricError("metric matrix is not positive definite") from None
        H.setflags(write=False)
        object.__setattr__(self, "entries", H)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def chol(self) -> np.ndarray:
        return np.linalg.cholesky(self.entries)

    def norm(self, x) -> float:
        x = np.asarray(x, dtype=complex)
        return float(np.sqrt(np.real(x.conj() @ self.entries @ x)))

    def pair(self, x, y) -> complex:
        return complex(np.asarray(x).conj() @ self.entries @ np.asarray(y))

    def det(self) -> float:
        return float(np.real(np.linalg.det(self.entries)))

    @classmethod
    def identity(cls, r: int) -> "HermitianForm":
        return cls(np.eye(r))

    def to_json(self) -> dict:
        return matrix_to_json(self.entries)

    @classmethod
    def from_json(cls, obj) -> "HermitianForm":
        return cls(matrix_from_json(obj))


@dataclass(frozen=True, eq=False)
class FrameChange:
    """New frame ``w = v . g``, i.e. ``w_j = sum_i v_i g[i, j]``."""

    matrix: np.ndarray

    def __eq__(self, other):
        return isinstance(other, FrameChange) and np.array_equal(self.matrix, other.matrix)

    __hash__ = None

    def __post_init__(self):
        g = np.array(self.matrix, dtype=complex)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise MetricError("frame change must be square")
        if abs(np.linalg.det(g)) == 0.0 or np.linalg.cond(g) > 1e14:
            raise MetricError("frame change is singular")
        g.setflags(write=False)
        object.__setattr__(self, "matrix", g)

    def pullback(self, h: HermitianForm) -> HermitianForm:
        """Gram matrix of the same metric in the new frame."""
        g = self.matrix
        return HermitianForm(g.conj().T @ h.entries @ g)

    def transform_endomorphism(self, A) -> np.ndarray:
        """Matrix of an endomorphism in the new frame."""
        g = self.matrix
        return np.linalg.solve(g, np.asarray(A) @ g)

    def compose(self, other: "FrameChange") -> "FrameChange":
        return FrameChange(self.matrix @ other.matrix)

    def inverse(self) -> "FrameChange":
        return FrameChange(np.linalg.inv(self.matrix))


@dataclass(frozen=True)
class ProjectorFamily:
    projectors: tuple
    centers: tuple
    gap: float

    def check(self, tol: float = ALG_TOL) -> float:
        """Largest violation of the family identities (raises if above ``tol``)."""
        P = [np.asarray(p) for p in self.projectors]
        r = P[0].shape[0]
        err = np.max(np.abs(sum(P) - np.eye(r)))
        for i, p in enumerate(P):
            err = max(err, np.max(np.abs(p @ p - p)))
            for j, q in enumerate(P):
                if i != j:
                    err = max(err, np.max(np.abs(p @ q)))
        ranks = sum(int(round(np.real(np.trace(p)))) for p in P)
        if ranks != r:
            err = max(err, 1.0)
        if err > tol:
            raise MetricError(f"projector family violates its identities by {err:.3e}")
        return float(err)


def _as_form(h) -> HermitianForm:
    return h if isinstance(h, HermitianForm) else HermitianForm(h)


def _whiten(h1: HermitianForm, h2: HermitianForm) -> np.ndarray:
    if h1.dim != h2.dim:
        raise MetricError(f"dimension mismatch: {h1.dim} vs {h2.dim}")
    L = h1.chol
    X = sla.solve_triangular(L, h2.entries, lower=True)
    M = sla.solve_triangular(L, X.conj().T, lower=True)
    return 0.5 * (M + M.conj().T)


def dvector(h1, h2) -> np.ndarray:
    """Log stretch factors of ``h2`` relative to ``h1``, sorted descending."""
    h1, h2 = _as_form(h1), _as_form(h2)
    lam = np.linalg.eigvalsh(_whiten(h1, h2))
    if np.any(lam <= 0):
        raise MetricError("whitened metric is not positive definite")
    return np.sort(0.5 * np.log(lam))[::-1]


def _whitened_map(f, h1: HermitianForm, h2: HermitianForm) -> np.ndarray:
    # op-norms from (C^r, h1) to (C^r, h2) equal standard norms of L2^H f L1^{-H}
    f = np.asarray(f, dtype=complex)
    if f.shape != (h1.dim, h2.dim):
        raise MetricError(f"map of shape {f.shape} does not match metrics of dimension {h1.dim}")
    A = h2.chol.conj().T @ f
    # right-multiply by L1^{-H}:  A L1^{-H} = (L1^{-1} A^H)^H
    return sla.solve_triangular(h1.chol, A.conj().T, lower=True).conj().T


def compound_matrix(A: np.ndarray, k: int) -> np.ndarray:
    """k-th exterior power of ``A`` in the basis of increasing index subsets."""
    A = np.asarray(A)
    r = A.shape[0]
    if k == 0:
        return np.ones((1, 1), dtype=A.dtype)
    subsets = list(itertools.combinations(range(r), k))
    C = np.empty((len(subsets), len(subsets)), dtype=complex)
    for a, I in enumerate(subsets):
        rows = A[list(I), :]
        for b, J in enumerate(subsets):
            C[a, b] = np.linalg.det(rows[:, list(J)])
    return C


def singular_exponents(f, h1, h2) -> np.ndarray:
    """``beta_k = log||wedge^k f||_op - log||wedge^(k-1) f||_op``, descending."""
    h1, h2 = _as_form(h1), _as_form(h2)
    f = np.asarray(f, dtype=complex)
    if f.shape[0] != f.shape[1] or np.linalg.matrix_rank(f) < f.shape[0]:
        raise MetricError("f must be invertible")
    M = _whitened_map(f, h1, h2)
    r = M.shape[0]
    logs = [0.0]
    for k in range(1, r + 1):
        n = np.linalg.norm(compound_matrix(M, k), 2)
        if n == 0:
            raise MetricError("f must be invertible")
        logs.append(float(np.log(n)))
    return np.sort(np.diff(logs))[::-1]


def pullback(f, h2) -> HermitianForm:
    """``f^* h2``: the metric ``x -> |f x|_{h2}``."""
    f = np.asarray(f, dtype=complex)
    h2 = _as_form(h2)
    return HermitianForm(f.conj().T @ h2.entries @ f)


def _cluster_labels(eig: np.ndarray, centers: Optional[Sequence[complex]], tol: float):
    if centers is None:
        centers = []
        for z in eig:
            if all(abs(z - c) > tol * max(1.0, abs(z)) for c in centers):
                centers.append(z)
        # merge the eigenvalues assigned to each automatically found center
    centers = np.asarray(list(centers), dtype=complex)
    labels = np.argmin(np.abs(eig[:, None] - centers[None, :]), axis=1)
    return centers, labels


def spectral_projectors(f, clusters: Optional[Sequence[complex]] = None, tol: float = ALG_TOL) -> ProjectorFamily:
    """Spectral projectors onto the generalized eigenspaces of each cluster.

    ``clusters`` lists cluster centers; each eigenvalue joins its nearest
    center.  Without centers, eigenvalues closer than ``1e-8`` (relative) are
    merged.  Clusters must be separated: each cluster's diameter has to stay
    below a tenth of the smallest distance between centers.
    """
    f = np.asarray(f, dtype=complex)
    r = f.shape[0]
    eig = np.linalg.eigvals(f)
    centers, labels = _cluster_labels(eig, clusters, 1e-8)
    used = sorted(set(labels.tolist()))
    centers = centers[used]
    labels = np.array([used.index(x) for x in labels])
    if len(centers) > 1:
        gap = min(abs(a - b) for a, b in itertools.combinations(centers, 2))
    else:
        gap = float("inf")
    for k in range(len(centers)):
        members = eig[labels == k]
        diam = max((abs(a - b) for a, b in itertools.combinations(members, 2)), default=0.0)
        spread = max(abs(members - centers[k]))
        if max(diam, spread) >= gap / 10:
            raise MetricError("eigenvalue clusters are not separated (diameter >= gap/10)")
    projectors: List[np.ndarray] = []
    for k in range(len(centers)):
        if len(centers) == 1:
            projectors.append(np.eye(r, dtype=complex))
            break
        members = eig[labels == k]
        mid = centers[k]
        radius = gap / 2

        def select(z, mid=mid, radius=radius):
            return abs(z - mid) < radius

        T, Z, sdim = sla.schur(f, output="complex", sort=select)
        if sdim != len(members):
            raise MetricError("Schur reordering did not isolate the cluster")
        T11, T12, T22 = T[:sdim, :sdim], T[:sdim, sdim:], T[sdim:, sdim:]
        X = sla.solve_sylvester(T11, -T22, -T12)
        block = np.zeros((r, r), dtype=complex)
        block[:sdim, :sdim] = np.eye(sdim)
        block[:sdim, sdim:] = -X
        projectors.append(Z @ block @ Z.conj().T)
    fam = ProjectorFamily(tuple(projectors), tuple(complex(c) for c in centers), float(gap))
    fam.check(tol=max(tol, 1e-10 * max(1.0, np.linalg.cond(f) ** 0.5)))
    return fam


def hermitian_projector(pi, h) -> np.ndarray:
    """The h-orthogonal projector onto the image of ``pi``."""
    h = _as_form(h)
    pi = np.asarray(pi, dtype=complex)
    k = int(round(np.real(np.trace(pi))))
    if k == 0:
        return np.zeros_like(pi)
    U, s, _ = np.linalg.svd(pi)
    V = U[:, :k]
    G = V.conj().T @ h.entries @ V
    return V @ np.linalg.solve(G, V.conj().T @ h.entries)


def endomorphism_norm(A, h) -> float:
    """Frobenius norm of an endomorphism measured by ``h``: ``sqrt(tr(A A^*))``."""
    h = _as_form(h)
    L = h.chol
    A = np.asarray(A, dtype=complex)
    N = L.conj().T @ A
    N = sla.solve_triangular(L, N.conj().T, lower=True).conj().T
    return float(np.linalg.norm(N))


def orthogonality_defect(pi, h, tol: float = ALG_TOL) -> float:
    """``|pi - pi'|_h`` where ``pi'`` is the h-orthogonal projector with the same image."""
    pi = np.asarray(pi, dtype=complex)
    scale = max(1.0, float(np.max(np.abs(pi))))
    if np.max(np.abs(pi @ pi - pi)) > tol * scale**2:
        raise MetricError("input is not idempotent")
    return endomorphism_norm(pi - hermitian_projector(pi, h), h)


def is_self_adjoint(A, h, tol: float = ALG_TOL) -> bool:
    h = _as_form(h)
    A = np.asarray(A, dtype=complex)
    H = h.entries
    return bool(np.max(np.abs(H @ A - A.conj().T @ H)) <= tol * max(1.0, np.max(np.abs(H @ A))))


def op_norm(f, h=None, h_target=None, area_weight: float = 1.0) -> float:
    """Largest singular value of ``f`` from ``(C^r, h)`` to ``(C^r, h_target)``.

    ``h_target`` defaults to ``h`` and ``h`` to the standard metric.  For the
    coefficient of a form-valued sample, ``area_weight`` is the norm of the
    form itself and multiplies the result.
    """
    f = np.asarray(f, dtype=complex)
    if f.ndim != 2:
        raise MetricError("op_norm expects a matrix")
    if h is None:
        h = HermitianForm.identity(f.shape[1])
    h = _as_form(h)
    h2 = h if h_target is None else _as_form(h_target)
    if h.dim != f.shape[1] or h2.dim != f.shape[0]:
        raise MetricError("map shape does not match metric dimensions")
    if area_weight < 0:
        raise MetricError("area weight must be nonnegative")
    A = h2.chol.conj().T @ f
    A = sla.solve_triangular(h.chol, A.conj().T, lower=True).conj().T
    return float(np.linalg.norm(A, 2)) * float(area_weight)


def psd_sqrt(H: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(H)
    return (V * np.sqrt(w)) @ V.conj().T


def matrix_to_json(A) -> dict:
    A = np.atleast_2d(np.asarray(A, dtype=complex))
    return {
        "dim": int(A.shape[0]),
        "re": [[float(x) for x in row] for row in A.real],
        "im": [[float(x) for x in row] for row in A.imag],
    }


def matrix_from_json(obj) -> np.ndarray:
    A = np.asarray(obj["re"], dtype=float) + 1j * np.asarray(obj["im"], dtype=float)
    if A.shape != (obj["dim"], obj["dim"]):
        raise MetricError("matrix JSON has inconsistent dimension")
    return A


def random_metric(rng, r: int, spread: float = 1.0) -> HermitianForm:
    """Random positive-definite metric with log-eigenvalues in ``[-spread, spread]``."""
    Q, _ = np.linalg.qr(rng.normal(size=(r, r)) + 1j * rng.normal(size=(r, r)))
    d = np.exp(rng.uniform(-spread, spread, size=r))
    return HermitianForm((Q * d) @ Q.conj().T)
