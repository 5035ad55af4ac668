"""Vector Lagrange finite elements for the penalized curl-curl form.

The discrete space is (P1 or P2)^3 on affine tets with the electric boundary
condition nu x u = 0 imposed nodally: at each boundary node the admissible
vectors are those parallel to every adjacent boundary-face normal, so a node
with essentially one normal direction keeps its normal component, while nodes
on geometric edges and corners are pinned to zero. Constraints are eliminated
through a sparse injection matrix C, and all operators live on the reduced
space.

Element integrals use exact reference-tetrahedron tensors derived from the
barycentric monomial formula  int_T prod lambda_i^{p_i} dx
= 6V * prod(p_i!) / (|p|+3)!  - no assembly quadrature error on affine tets.
An independent quadrature route (`energy_by_quadrature`) exists for
verification and is never used to build matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import FemError, InvertedElementError
from .mesh import TetMesh
from .quadrature import grundmann_moller_tet

__all__ = ["FemSpace", "SparseSymOp", "build_space", "assemble_stiffness",
           "assemble_mass", "assemble_h1", "divergence_l2",
           "energy_by_quadrature"]

_EDGE_LOCAL = list(combinations(range(4), 2))  # (0,1),(0,2),(0,3),(1,2),(1,3),(2,3)
# Relative singular-value threshold for the node normal set. Box edges and
# corners give ratios near 1; normals of a policy-resolved oscillating top
# (h <= eps/8) spread below ~0.3, so 0.5 separates the two regimes.
_RANK_TOL = 0.5


# -- exact reference tensors ---------------------------------------------------

def _poly_mul(p, q):
    out = {}
    for ka, va in p.items():
        for kb, vb in q.items():
            key = tuple(a + b for a, b in zip(ka, kb))
            out[key] = out.get(key, 0.0) + va * vb
    return out


def _poly_integral(p):
    """I(f) with int_T f dx = 6V * I(f) for barycentric polynomials."""
    total = 0.0
    for key, coef in p.items():
        num = 1.0
        for e in key:
            num *= math.factorial(e)
        total += coef * num / math.factorial(sum(key) + 3)
    return total


def _basis_polys(order: int):
    """Barycentric polynomials of the nodal basis, as {exponent: coef} dicts."""
    lam = [{tuple(int(i == k) for k in range(4)): 1.0} for i in range(4)]
    one = {(0, 0, 0, 0): 1.0}
    if order == 1:
        return lam
    out = []
    for i in range(4):
        # lambda_i (2 lambda_i - 1)
        out.append(_poly_mul(lam[i], {k: 2 * v for k, v in lam[i].items()}))
        out[-1] = {k: out[-1].get(k, 0.0) - lam[i].get(k, 0.0)
                   for k in set(out[-1]) | set(lam[i])}
    for a, b in _EDGE_LOCAL:
        out.append(_poly_mul(lam[a], {k: 4 * v for k, v in lam[b].items()}))
    return out


def _poly_dlam(p, k):
    out = {}
    for key, coef in p.items():
        if key[k] == 0:
            continue
        nk = list(key)
        nk[k] -= 1
        nk = tuple(nk)
        out[nk] = out.get(nk, 0.0) + coef * key[k]
    return out


@lru_cache(maxsize=4)
def reference_tensors(order: int):
    """(S, TG): int_T N_i N_j dx = 6V S[i,j];
    int_T (dN_i/dlam_k)(dN_j/dlam_l) dx = 6V TG[k,l,i,j]."""
    basis = _basis_polys(order)
    n = len(basis)
    S = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            S[i, j] = _poly_integral(_poly_mul(basis[i], basis[j]))
    TG = np.empty((4, 4, n, n))
    dbasis = [[_poly_dlam(b, k) for k in range(4)] for b in basis]
    for k in range(4):
        for l in range(4):
            for i in range(n):
                for j in range(n):
                    TG[k, l, i, j] = _poly_integral(
                        _poly_mul(dbasis[i][k], dbasis[j][l]))
    return S, TG


def _basis_at(order: int, bary):
    """Nodal basis values and lambda-derivatives at barycentric points.

    bary (..., 4) -> (vals (..., n), dlam (..., n, 4))."""
    b = np.asarray(bary, dtype=float)
    if order == 1:
        vals = b.copy()
        dlam = np.broadcast_to(np.eye(4), b.shape[:-1] + (4, 4)).copy()
        return vals, dlam
    n = 10
    vals = np.empty(b.shape[:-1] + (n,))
    dlam = np.zeros(b.shape[:-1] + (n, 4))
    for i in range(4):
        vals[..., i] = b[..., i] * (2 * b[..., i] - 1)
        dlam[..., i, i] = 4 * b[..., i] - 1
    for e, (a, c) in enumerate(_EDGE_LOCAL):
        vals[..., 4 + e] = 4 * b[..., a] * b[..., c]
        dlam[..., 4 + e, a] = 4 * b[..., c]
        dlam[..., 4 + e, c] = 4 * b[..., a]
    return vals, dlam


# -- operators -----------------------------------------------------------------

@dataclass
class SparseSymOp:
    """Symmetric sparse operator in CSR storage."""

    csr: sp.csr_matrix
    symmetric: bool = True

    def __post_init__(self):
        self.csr = self.csr.tocsr()

    @property
    def dim(self) -> int:
        return self.csr.shape[0]

    @property
    def indptr(self):
        return self.csr.indptr

    @property
    def indices(self):
        return self.csr.indices

    @property
    def data(self):
        return self.csr.data

    def matvec(self, x):
        return self.csr @ x

    __matmul__ = matvec

    def symmetry_error(self) -> float:
        d = self.csr - self.csr.T
        return 0.0 if d.nnz == 0 else float(np.max(np.abs(d.data)))

    def factorize(self):
        """LU solve closure (SuperLU with COLAMD ordering)."""
        lu = spla.splu(self.csr.tocsc())
        return lu.solve

    def to_dense(self):
        return self.csr.toarray()

    def min_ritz(self, iters: int = 60, seed: int = 0) -> float:
        """Rough smallest Ritz value (plain Lanczos), for definiteness checks."""
        n = self.dim
        if n <= 600:
            return float(np.linalg.eigvalsh(self.to_dense())[0])
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(n)
        v /= np.linalg.norm(v)
        V, alphas, betas = [v], [], []
        for _ in range(min(iters, n - 1)):
            w = self.csr @ V[-1]
            a = float(V[-1] @ w)
            w -= a * V[-1] + (betas[-1] * V[-2] if betas else 0.0)
            for u in V:
                w -= (u @ w) * u
            b = float(np.linalg.norm(w))
            alphas.append(a)
            if b < 1e-14:
                break
            betas.append(b)
            V.append(w / b)
        if len(alphas) == 1:
            return alphas[0]
        from scipy.linalg import eigh_tridiagonal
        vals = eigh_tridiagonal(alphas, betas[:len(alphas) - 1],
                                select="i", select_range=(0, 0))[0]
        return float(vals[0])


def matrix_market_dump(op: SparseSymOp, fh):
    """Coordinate text dump (row, col, value), 0-based, one entry per line."""
    coo = op.csr.tocoo()
    close = isinstance(fh, (str, bytes))
    if close:
        fh = open(fh, "w")
    try:
        fh.write(f"# cavistab coo v1 {op.dim} {op.dim} {coo.nnz}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {float(v)!r}\n")
    finally:
        if close:
            fh.close()


# -- the space ------------------------------------------------------------------

class FemSpace:
    """Vector nodal space with tangential-trace constraints eliminated."""

    def __init__(self, mesh: TetMesh, order: int = 1):
        if order not in (1, 2):
            raise FemError("order must be 1 or 2")
        self.mesh = mesh
        self.order = order
        self._build_nodes()
        self._build_frames()
        self._cache = {}

    # nodes / dofmap
    def _build_nodes(self):
        mesh = self.mesh
        if self.order == 1:
            self.nodes = mesh.vertices
            self.dofmap = mesh.tets
            self.edge_ids = None
            return
        edges = np.concatenate([mesh.tets[:, [a, b]] for a, b in _EDGE_LOCAL])
        edges.sort(axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        nv = mesh.num_vertices
        self.edge_ids = {tuple(e): nv + i for i, e in enumerate(uniq)}
        mids = 0.5 * (mesh.vertices[uniq[:, 0]] + mesh.vertices[uniq[:, 1]])
        self.nodes = np.vstack([mesh.vertices, mids])
        ne = mesh.num_tets
        dof = np.empty((ne, 10), dtype=np.int64)
        dof[:, :4] = mesh.tets
        inv = inv.reshape(len(_EDGE_LOCAL), ne)
        for e in range(len(_EDGE_LOCAL)):
            dof[:, 4 + e] = nv + inv[e]
        self.dofmap = dof

    @property
    def node_count(self):
        return len(self.nodes)

    # boundary frames: collect area-weighted normals per node, eigen-classify
    def _build_frames(self):
        mesh = self.mesh
        nrm = mesh.boundary_normals()
        areas = mesh.boundary_face_areas()
        N = self.node_count
        gram = np.zeros((N, 3, 3))
        mean = np.zeros((N, 3))
        is_b = np.zeros(N, dtype=bool)
        face_nodes = [mesh.boundary_faces]
        if self.order == 2:
            extra = np.empty((len(mesh.boundary_faces), 3), dtype=np.int64)
            for f, face in enumerate(mesh.boundary_faces):
                for e, (a, b) in enumerate(((0, 1), (1, 2), (2, 0))):
                    key = tuple(sorted((face[a], face[b])))
                    extra[f, e] = self.edge_ids[key]
            face_nodes.append(extra)
        for nodes in face_nodes:
            for c in range(nodes.shape[1]):
                ids = nodes[:, c]
                np.add.at(gram, ids, areas[:, None, None]
                          * nrm[:, :, None] * nrm[:, None, :])
                np.add.at(mean, ids, areas[:, None] * nrm)
                is_b[ids] = True
        self.is_boundary_node = is_b
        bidx = np.nonzero(is_b)[0]
        w, v = np.linalg.eigh(gram[bidx])
        # eigvals ascending; singular values are sqrt(eig)
        free_dim = np.sum(np.sqrt(np.maximum(w, 0.0))
                          > _RANK_TOL * np.sqrt(w[:, 2:]), axis=1)
        self.node_free_dim = np.full(N, 3, dtype=np.int64)
        self.node_normal = np.zeros((N, 3))
        for i, n in zip(bidx, range(len(bidx))):
            rank = free_dim[n]
            if rank == 1:
                direction = v[n][:, 2]
                if direction @ mean[i] < 0:
                    direction = -direction
                self.node_free_dim[i] = 1
                self.node_normal[i] = direction
            else:
                self.node_free_dim[i] = 0
        self._build_constraints()

    def _build_constraints(self):
        N = self.node_count
        rows, cols, vals = [], [], []
        col = 0
        self.node_first_free = np.full(N, -1, dtype=np.int64)
        for i in range(N):
            fd = self.node_free_dim[i]
            if fd == 3:
                self.node_first_free[i] = col
                for c in range(3):
                    rows.append(3 * i + c)
                    cols.append(col)
                    vals.append(1.0)
                    col += 1
            elif fd == 1:
                self.node_first_free[i] = col
                for c in range(3):
                    rows.append(3 * i + c)
                    cols.append(col)
                    vals.append(self.node_normal[i, c])
                col += 1
        self.C = sp.csr_matrix((vals, (rows, cols)), shape=(3 * N, col))
        self.free_dof_count = col

    @property
    def constrained_dof_count(self):
        return 3 * self.node_count - self.free_dof_count

    def frame(self, node: int):
        """Orthonormal (normal, t1, t2) at a rank-1 boundary node."""
        if self.node_free_dim[node] != 1:
            raise FemError("frame defined at rank-1 boundary nodes only")
        n = self.node_normal[node]
        t1 = np.cross(n, [1.0, 0.0, 0.0])
        if np.linalg.norm(t1) < 0.5:
            t1 = np.cross(n, [0.0, 1.0, 0.0])
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(n, t1)
        return n, t1, t2

    def expand(self, u):
        """Reduced DOF vector -> full 3N vector (or pass a full one through)."""
        u = np.asarray(u, dtype=float)
        if u.shape[0] == self.free_dof_count:
            return self.C @ u
        if u.shape[0] == 3 * self.node_count:
            return u
        raise FemError("DOF vector length matches neither reduced nor full size")

    def interpolate(self, fn):
        """Nodal interpolation of fn(points (N,3)) -> full 3N DOF vector."""
        return np.asarray(fn(self.nodes), dtype=float).reshape(-1)

    def evaluate(self, u_full, tet_ids, bary):
        """Field values at located points (tet index + barycentric coords)."""
        vals, _ = _basis_at(self.order, bary)
        nodes = self.dofmap[tet_ids]
        comp = u_full.reshape(-1, 3)[nodes]
        return np.einsum("...k,...kd->...d", vals, comp)

    # geometry
    def _geometry(self):
        if "geom" in self._cache:
            return self._cache["geom"]
        v = self.mesh.vertices[self.mesh.tets]
        A = v[:, 1:] - v[:, :1]
        vols = np.linalg.det(A) / 6.0
        if np.any(vols <= 0):
            raise InvertedElementError("assembly on a mesh with inverted tets")
        G = np.empty((len(v), 4, 3))
        G[:, 1:] = np.swapaxes(np.linalg.inv(A), 1, 2)
        G[:, 0] = -G[:, 1:].sum(axis=1)
        self._cache["geom"] = (vols, G)
        return vols, G

    # full (unconstrained) matrices, assembled chunk-wise
    def _full_matrices(self):
        if "full" in self._cache:
            return self._cache["full"]
        S, TG = reference_tensors(self.order)
        vols, G = self._geometry()
        nloc = S.shape[0]
        N3 = 3 * self.node_count
        ne = self.mesh.num_tets
        chunk = max(1, int(4e6 / (nloc * nloc * 9)))
        mats = {k: sp.csr_matrix((N3, N3)) for k in ("curl", "div", "mass", "grad")}
        for start in range(0, ne, chunk):
            sl = slice(start, min(start + chunk, ne))
            dof = self.dofmap[sl]
            vi = 6.0 * vols[sl]
            Sab = np.einsum("e,eka,elb,klij->eijab", vi, G[sl], G[sl], TG,
                            optimize=True)
            gram = np.einsum("eijaa->eij", Sab)
            mel = vi[:, None, None] * S[None]
            shape = Sab.shape[:3]
            row_base = np.broadcast_to((3 * dof)[:, :, None], shape)
            col_base = np.broadcast_to((3 * dof)[:, None, :], shape)
            triplets = {k: ([], [], []) for k in mats}

            def scat(key, c, d, block):
                triplets[key][0].append((row_base + c).ravel())
                triplets[key][1].append((col_base + d).ravel())
                triplets[key][2].append(block.ravel())

            for c in range(3):
                for d in range(3):
                    scat("div", c, d, Sab[:, :, :, c, d])
                    blk = -Sab[:, :, :, d, c]
                    if c == d:
                        blk = blk + gram
                        scat("mass", c, d, mel)
                        scat("grad", c, d, gram)
                    scat("curl", c, d, blk)
            for k in mats:
                r = np.concatenate(triplets[k][0])
                c = np.concatenate(triplets[k][1])
                v_ = np.concatenate(triplets[k][2])
                mats[k] = mats[k] + sp.coo_matrix((v_, (r, c)),
                                                  shape=(N3, N3)).tocsr()
        for k in mats:
            mats[k] = (mats[k] + mats[k].T) * 0.5  # discard roundoff asymmetry
        self._cache["full"] = mats
        return mats

    def _reduced(self, key):
        ck = f"red_{key}"
        if ck not in self._cache:
            full = self._full_matrices()[key]
            self._cache[ck] = (self.C.T @ (full @ self.C)).tocsr()
        return self._cache[ck]


def build_space(mesh: TetMesh, order: int = 1) -> FemSpace:
    return FemSpace(mesh, order)


def assemble_stiffness(space: FemSpace, tau: float = 1.0) -> SparseSymOp:
    """curl-curl + tau div-div on the constrained space."""
    if tau <= 0:
        raise FemError("penalty weight tau must be positive")
    K = space._reduced("curl") + tau * space._reduced("div")
    return SparseSymOp(K.tocsr())


def assemble_mass(space: FemSpace) -> SparseSymOp:
    return SparseSymOp(space._reduced("mass"))


def assemble_h1(space: FemSpace) -> SparseSymOp:
    """Full H^1 inner product matrix (mass + grad-grad) on the same space."""
    return SparseSymOp((space._reduced("mass") + space._reduced("grad")).tocsr())


def assemble_divdiv(space: FemSpace) -> SparseSymOp:
    return SparseSymOp(space._reduced("div"))


def divergence_l2(space: FemSpace, u) -> float:
    """sqrt(u^T D u) with D the div-div matrix; accepts reduced or full DOFs."""
    u = np.asarray(u, dtype=float)
    if u.shape[0] == space.free_dof_count:
        D = space._reduced("div")
        return float(np.sqrt(max(0.0, u @ (D @ u))))
    D = space._full_matrices()["div"]
    return float(np.sqrt(max(0.0, u @ (D @ u))))


def energy_by_quadrature(space: FemSpace, u, degree_s: int = 2):
    """Independent per-element quadrature of |u|^2, |curl u|^2, |div u|^2,
    |grad u|^2 (Grundmann-Moller rule); verification-only route."""
    u_full = space.expand(u).reshape(-1, 3)
    bary, wts = grundmann_moller_tet(degree_s)
    vals, dlam = _basis_at(space.order, bary)  # (q, nloc), (q, nloc, 4)
    vols, G = space._geometry()
    dof = space.dofmap
    coef = u_full[dof]                          # (e, nloc, 3)
    out = {"l2": 0.0, "curl": 0.0, "div": 0.0, "grad": 0.0}
    ne = len(dof)
    chunk = max(1, int(2e6 / (len(bary) * dof.shape[1])))
    for start in range(0, ne, chunk):
        sl = slice(start, min(start + chunk, ne))
        grads = np.einsum("qkl,ela->eqka", dlam, G[sl])
        uval = np.einsum("qk,ekc->eqc", vals, coef[sl])
        du = np.einsum("eqka,ekc->eqca", grads, coef[sl])  # du[c,a] = d u_c/d x_a
        divu = np.einsum("eqcc->eq", du)
        curlu = np.stack([du[..., 2, 1] - du[..., 1, 2],
                          du[..., 0, 2] - du[..., 2, 0],
                          du[..., 1, 0] - du[..., 0, 1]], axis=-1)
        w = vols[sl][:, None] * wts[None, :]
        out["l2"] += float(np.sum(w * np.sum(uval**2, axis=-1)))
        out["curl"] += float(np.sum(w * np.sum(curlu**2, axis=-1)))
        out["div"] += float(np.sum(w * divu**2))
        out["grad"] += float(np.sum(w * np.sum(du**2, axis=(-1, -2))))
    return out
