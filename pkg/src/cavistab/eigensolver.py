"""Generalized symmetric eigensolver: A x = lambda M x, lowest part.

Shift-invert Lanczos with full reorthogonalization in the M-inner product,
driven by a sparse LU factorization of A - shift*M (SuperLU, COLAMD
fill-reducing ordering). A dense route exists below `dense_cutoff` and serves
as the independent oracle in tests; the Lanczos path never consults it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import FactorizationSingularError, NoConvergenceError, SolverError
from .fem import FemSpace, SparseSymOp, divergence_l2

__all__ = ["Spectrum", "solve_gevp", "classify_modes", "cluster_eigenvalues"]

TAG_MAXWELL, TAG_GRADIENT, TAG_UNCLASSIFIED = "maxwell", "gradient", "unclassified"


def _as_csr(A):
    if isinstance(A, SparseSymOp):
        return A.csr
    return sp.csr_matrix(A)


@dataclass
class Cluster:
    value: float
    count: int
    indices: np.ndarray
    tags: dict = field(default_factory=dict)


def cluster_eigenvalues(values, rtol: float, tags=None):
    """Group ascending eigenvalues whose consecutive gaps are below rtol
    (relative to max(|lambda|, 1))."""
    values = np.asarray(values, dtype=float)
    clusters = []
    start = 0
    for i in range(1, len(values) + 1):
        if i == len(values) or (values[i] - values[i - 1]
                                > rtol * max(abs(values[i - 1]), 1.0)):
            idx = np.arange(start, i)
            cl = Cluster(value=float(values[idx].mean()), count=len(idx),
                         indices=idx)
            if tags is not None:
                for t in np.asarray(tags)[idx]:
                    cl.tags[t] = cl.tags.get(t, 0) + 1
            clusters.append(cl)
            start = i
    return clusters


@dataclass
class Spectrum:
    """Eigenpairs of the penalized pencil, ascending and M-orthonormal."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray            # (n, m)
    residuals: np.ndarray               # ||A x - lambda M x||_{M^{-1}}
    tags: list
    div_ratios: Optional[np.ndarray] = None
    shift: float = 0.0
    method: str = "lanczos"

    @property
    def m(self) -> int:
        return len(self.eigenvalues)

    @property
    def mu(self) -> np.ndarray:
        """Resolvent-side eigenvalues mu = (lambda + 1)^{-1} (decreasing)."""
        return 1.0 / (1.0 + self.eigenvalues)

    def clusters(self, rtol: float = 1e-6):
        return cluster_eigenvalues(self.eigenvalues, rtol, tags=self.tags)

    def orthonormality_error(self, M) -> float:
        Mc = _as_csr(M)
        G = self.eigenvectors.T @ (Mc @ self.eigenvectors)
        return float(np.max(np.abs(G - np.eye(self.m))))

    def csv_rows(self):
        rows = []
        for i in range(self.m):
            dr = "" if self.div_ratios is None else float(self.div_ratios[i])
            rows.append([i, float(self.eigenvalues[i]), float(self.residuals[i]),
                         dr, self.tags[i]])
        return rows


def _factor_shifted(A, M, shift, tries=3):
    sigma = shift
    for attempt in range(tries):
        try:
            lu = spla.splu((A - sigma * M).tocsc())
            # SuperLU can "succeed" with tiny pivots; probe one solve
            probe = lu.solve(np.ones(A.shape[0]))
            if np.all(np.isfinite(probe)):
                return lu, sigma
        except RuntimeError:
            pass
        sigma = sigma - 0.05 * (1.0 + abs(sigma))
    raise FactorizationSingularError(
        f"factorization failed near shift {shift}; spectrum too close")


def _residuals_Minv(A, M, Msolve, lam, X):
    R = A @ X - (M @ X) * lam[None, :]
    out = np.empty(len(lam))
    for i in range(len(lam)):
        out[i] = np.sqrt(max(0.0, R[:, i] @ Msolve(R[:, i])))
    return out


def solve_gevp(A, M, m: int, shift: float = -0.5, tol: float = 1e-9,
               max_iter: int = 300, method: str = "auto", seed: int = 0,
               dense_cutoff: int = 2000) -> Spectrum:
    """Lowest m eigenpairs of A x = lambda M x (A sym PSD, M sym PD).

    method: 'lanczos', 'dense', or 'auto' (dense below dense_cutoff).
    Residual contract: ||A x - lambda M x||_{M^{-1}} <= tol * (|lambda| + 1).
    """
    A, M = _as_csr(A), _as_csr(M)
    n = A.shape[0]
    m = min(m, n)
    if m <= 0:
        raise SolverError("need at least one requested eigenpair")
    if method == "auto":
        method = "dense" if n < dense_cutoff else "lanczos"

    if method == "dense":
        if n > 6000:
            raise SolverError("dense path refused above dimension 6000")
        lam_all, X_all = sla.eigh(A.toarray(), M.toarray())
        keep = lam_all >= -tol
        lam = lam_all[keep][:m]
        X = X_all[:, keep][:, :m]
        Mlu = spla.splu(M.tocsc())
        res = _residuals_Minv(A, M, Mlu.solve, lam, X)
        return Spectrum(eigenvalues=lam, eigenvectors=X, residuals=res,
                        tags=[TAG_UNCLASSIFIED] * len(lam), shift=shift,
                        method="dense")

    lu, sigma = _factor_shifted(A, M, shift)
    Mlu = spla.splu(M.tocsc())
    rng = np.random.default_rng(seed)

    max_basis = min(n, max_iter)
    cap = min(max_basis, max(2 * m + 20, 40))
    V = np.empty((n, cap))
    MV = np.empty((n, cap))
    # Rayleigh matrix of the shift-inverted operator on the basis. With full
    # reorthogonalization the orthogonalization coefficients fill H exactly,
    # which stays valid across invariant-subspace restarts (where a plain
    # three-term recurrence would not).
    H = np.zeros((cap, cap))

    v = rng.standard_normal(n)
    v /= np.sqrt(v @ (M @ v))
    V[:, 0] = v
    MV[:, 0] = M @ v
    j = 0
    lam = X = None
    while True:
        w = lu.solve(MV[:, j])
        coef = np.zeros(j + 1)
        for _ in range(2):  # full reorthogonalization, twice for stability
            c = MV[:, :j + 1].T @ w
            w -= V[:, :j + 1] @ c
            coef += c
        H[:j + 1, j] = coef
        b = float(np.sqrt(max(0.0, w @ (M @ w))))
        j += 1
        exhausted = restarted = False
        if b < 1e-13:
            # invariant subspace found: restart with a fresh M-orthogonal
            # direction (its coupling column in H is genuinely zero)
            restarted = True
            w = rng.standard_normal(n)
            for _ in range(2):
                w -= V[:, :j] @ (MV[:, :j].T @ w)
            b = float(np.sqrt(max(0.0, w @ (M @ w))))
            exhausted = b < 1e-10
        converged_enough = False
        if j >= m and (j % 5 == 0 or j >= max_basis or exhausted):
            Hs = 0.5 * (H[:j, :j] + H[:j, :j].T)
            theta, Y = sla.eigh(Hs)
            nonzero = np.abs(theta) > 1e-13
            lam_c = sigma + 1.0 / theta[nonzero]
            Yc = Y[:, nonzero]
            bound = b * np.abs(Yc[-1, :])
            order = np.argsort(lam_c)
            lam_c, Yc, bound = lam_c[order], Yc[:, order], bound[order]
            if len(lam_c) >= m:
                # Ritz bound on the shift-inverted operator, converted through
                # theta to an estimate on lambda
                th = 1.0 / (lam_c[:m] - sigma)
                est = bound[:m] / th**2
                if np.all(est <= 0.1 * tol * (np.abs(lam_c[:m]) + 1.0)):
                    converged_enough = True
        if converged_enough or j >= max_basis or exhausted:
            Hs = 0.5 * (H[:j, :j] + H[:j, :j].T)
            theta, Y = sla.eigh(Hs)
            nonzero = np.abs(theta) > 1e-13
            lam_c = sigma + 1.0 / theta[nonzero]
            Yc = Y[:, nonzero]
            order = np.argsort(lam_c)[:m]
            lam = lam_c[order]
            X = V[:, :j] @ Yc[:, order]
            # M-orthonormalize (Cholesky of the Gram matrix)
            G = X.T @ (M @ X)
            L = np.linalg.cholesky(G)
            X = np.linalg.solve(L, X.T).T
            res = _residuals_Minv(A, M, Mlu.solve, lam, X)
            if np.all(res <= tol * (np.abs(lam) + 1.0)):
                break
            if j >= max_basis or exhausted:
                raise NoConvergenceError(
                    f"{int(np.sum(res > tol * (np.abs(lam) + 1)))} of {m} pairs "
                    f"unconverged at basis size {j} (max residual {res.max():.2e})")
        if j + 1 > cap:
            cap = min(max_basis, int(cap * 1.5) + 1)
            V = np.concatenate([V, np.empty((n, cap - V.shape[1]))], axis=1)
            MV = np.concatenate([MV, np.empty((n, cap - MV.shape[1]))], axis=1)
            Hgrow = np.zeros((cap, cap))
            Hgrow[:H.shape[0], :H.shape[1]] = H
            H = Hgrow
        if not restarted:
            H[j, j - 1] = b  # subdiagonal of the recurrence; zero on restarts
        V[:, j] = w / b
        MV[:, j] = M @ V[:, j]

    keep = lam >= -tol
    lam, X, res = lam[keep], X[:, keep], res[keep]
    return Spectrum(eigenvalues=lam, eigenvectors=X, residuals=res,
                    tags=[TAG_UNCLASSIFIED] * len(lam), shift=sigma,
                    method="lanczos")


def classify_modes(spectrum: Spectrum, space: FemSpace, tau: float,
                   threshold: float = 0.5, cluster_rtol: float = 1e-4) -> Spectrum:
    """Tag eigenpairs by relative divergence energy.

    A gradient-branch pair u = grad f of the Dirichlet problem satisfies
    ||div u||^2 = (lambda/tau) ||u||^2 exactly, so the dimensionless ratio
    ||div u||^2 / (lambda/tau * ||u||^2) sits near 1 on that branch and near 0
    on the Maxwell branch. Within a numerically degenerate cluster the solver
    returns an arbitrary rotation of the eigenspace, so the div quadratic form
    is diagonalized per cluster first (choosing the generalized-eigenfunction
    basis that separates the branches). Pairs within 10% of the threshold stay
    unclassified.
    """
    D = space._reduced("div")
    M = space._reduced("mass")
    X = spectrum.eigenvectors.copy()
    for cl in cluster_eigenvalues(spectrum.eigenvalues, cluster_rtol):
        if cl.count < 2:
            continue
        idx = cl.indices
        U = X[:, idx]
        B = U.T @ (D @ U)
        _, W = np.linalg.eigh(0.5 * (B + B.T))
        X[:, idx] = U @ W
    ratios = np.empty(spectrum.m)
    tags = []
    for i in range(spectrum.m):
        u = X[:, i]
        lam = spectrum.eigenvalues[i]
        div2 = float(u @ (D @ u))
        norm2 = float(u @ (M @ u))
        scale = max(lam, 1e-300) / tau
        ratios[i] = div2 / (norm2 * scale) if scale > 0 else np.inf
        if ratios[i] > 1.1 * threshold:
            tags.append(TAG_GRADIENT)
        elif ratios[i] < 0.9 * threshold:
            tags.append(TAG_MAXWELL)
        else:
            tags.append(TAG_UNCLASSIFIED)
    return replace(spectrum, eigenvectors=X, tags=tags, div_ratios=ratios)
