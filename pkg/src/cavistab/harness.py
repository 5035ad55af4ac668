"""Orchestration: cube oracle benchmark, eps-sweeps, E-distances.

The cube benchmark compares the discrete penalized spectrum against the exact
separation-of-variables union spectrum (Maxwell branch plus gradient branch of
the Dirichlet Laplacian). Sweeps mesh each perturbed domain at a resolution
coupled to the oscillation scale (h_horizontal <= eps/8), pair eigenvalue
clusters with the unperturbed reference by ascending order, and measure
eigenfunction distances against extension-by-zero transplants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .atlas import PerturbationFamily, check_convergence_conditions
from .eigensolver import (
    Spectrum,
    classify_modes,
    cluster_eigenvalues,
    solve_gevp,
)
from .errors import InvertedElementError, PointLocationError
from .fem import (
    FemSpace,
    assemble_h1,
    assemble_mass,
    assemble_stiffness,
    build_space,
)
from .gaffney import discrete_gaffney_constant
from .mesh import mesh_box, policy_resolution, shear_fit
from .quadrature import gl_panels, tet_rule_degree2, uniform_panel_edges

__all__ = ["analytic_cube_spectrum", "cube_benchmark", "CubeBenchmarkResult",
           "sweep_epsilon", "ConvergenceReport", "e_distance",
           "e_distance_subspace", "MeshPolicy", "SolverConfig"]


# ---------------------------------------------------------------------------
# the cube oracle
# ---------------------------------------------------------------------------

@dataclass
class OracleCluster:
    lam: float
    mult: int
    maxwell_mult: int
    gradient_mult: int


def analytic_cube_spectrum(tau: float, side: float, m: int):
    """First m exact eigenvalue clusters of the penalized problem on the cube
    (0, side)^3: Maxwell values (pi/side)^2 (m^2+n^2+p^2) over ordered triples
    with at least two positive entries (multiplicity 2 when all positive, else
    1), merged with the gradient branch tau * (pi/side)^2 (m^2+n^2+p^2) over
    all-positive triples."""
    if side <= 0:
        raise ValueError("side must be positive")
    scale = (math.pi / side) ** 2
    smax = 16
    while True:
        K = int(math.isqrt(3 * smax)) + 1
        idx = np.arange(0, K + 1)
        T = np.stack(np.meshgrid(idx, idx, idx, indexing="ij"),
                     axis=-1).reshape(-1, 3)
        s = np.sum(T * T, axis=1)
        pos = np.sum(T > 0, axis=1)
        entries = []
        for sv in range(1, smax + 1):
            sel = s == sv
            mw = int(np.sum((pos == 3) & sel)) * 2 + int(np.sum((pos == 2) & sel))
            gr = int(np.sum((pos == 3) & sel))
            if mw:
                entries.append((scale * sv, "maxwell", mw))
            if gr:
                entries.append((tau * scale * sv, "gradient", gr))
        entries.sort(key=lambda e: e[0])
        # keep only values certainly complete within the enumeration window
        cap = scale * smax if tau >= 1 else tau * scale * smax
        entries = [e for e in entries if e[0] <= cap + 1e-12]
        clusters = []
        for lam, branch, mult in entries:
            if clusters and abs(lam - clusters[-1].lam) <= 1e-12 * max(lam, 1.0):
                c = clusters[-1]
                c.mult += mult
                if branch == "maxwell":
                    c.maxwell_mult += mult
                else:
                    c.gradient_mult += mult
            else:
                clusters.append(OracleCluster(
                    lam=lam, mult=mult,
                    maxwell_mult=mult if branch == "maxwell" else 0,
                    gradient_mult=mult if branch == "gradient" else 0))
        if len(clusters) >= m:
            return clusters[:m]
        smax *= 2


# ---------------------------------------------------------------------------
# cube benchmark
# ---------------------------------------------------------------------------

@dataclass
class CubeClusterRow:
    lam_exact: float
    lam_mean: float
    rel_err: float
    mult_exact: int
    mult_found: int
    maxwell_exact: int
    maxwell_found: int
    gradient_exact: int
    gradient_found: int

    @property
    def ok(self) -> bool:
        return (self.mult_exact == self.mult_found
                and self.maxwell_exact == self.maxwell_found
                and self.gradient_exact == self.gradient_found)


@dataclass
class CubeBenchmarkResult:
    tau: float
    order: int
    n_mesh: int
    rows: list
    spectrum: Spectrum

    @property
    def max_rel_err(self) -> float:
        return max(r.rel_err for r in self.rows)

    def passed(self, rel_tol: float = 0.02) -> bool:
        return all(r.ok for r in self.rows) and self.max_rel_err <= rel_tol

    def csv_rows(self):
        return [[r.lam_exact, r.lam_mean, r.rel_err, r.mult_exact, r.mult_found,
                 r.maxwell_found, r.gradient_found] for r in self.rows]


def benchmark_from_spectrum(spectrum: Spectrum, tau: float, side: float,
                            m_clusters: int, cluster_rtol: float = 0.03):
    oracle = analytic_cube_spectrum(tau, side, m_clusters)
    found = cluster_eigenvalues(spectrum.eigenvalues, rtol=cluster_rtol,
                                tags=spectrum.tags)
    rows = []
    for oc, fc in zip(oracle, found[:m_clusters]):
        rows.append(CubeClusterRow(
            lam_exact=oc.lam, lam_mean=fc.value,
            rel_err=abs(fc.value - oc.lam) / oc.lam,
            mult_exact=oc.mult, mult_found=fc.count,
            maxwell_exact=oc.maxwell_mult,
            maxwell_found=fc.tags.get("maxwell", 0),
            gradient_exact=oc.gradient_mult,
            gradient_found=fc.tags.get("gradient", 0)))
    return rows


def cube_space(n_mesh: int, order: int, side: float = math.pi) -> FemSpace:
    mesh = mesh_box(((0.0, side), (0.0, side)), 0.0, side,
                    (n_mesh, n_mesh, n_mesh))
    return build_space(mesh, order=order)


def cube_benchmark(tau: float = 1.0, n_mesh: int = 8, order: int = 2,
                   m: int = 6, side: float = math.pi, tol: float = 1e-8,
                   shift: float = -0.5, space: Optional[FemSpace] = None,
                   margin: int = 6) -> CubeBenchmarkResult:
    """Solve the cube and compare the first m clusters with the oracle."""
    oracle = analytic_cube_spectrum(tau, side, m)
    n_pairs = sum(c.mult for c in oracle) + margin
    if space is None:
        space = cube_space(n_mesh, order, side)
    A = assemble_stiffness(space, tau=tau)
    M = assemble_mass(space)
    s = solve_gevp(A, M, m=n_pairs, shift=shift, tol=tol, method="lanczos")
    s = classify_modes(s, space, tau=tau)
    rows = benchmark_from_spectrum(s, tau, side, m)
    return CubeBenchmarkResult(tau=tau, order=order, n_mesh=n_mesh, rows=rows,
                               spectrum=s)


# ---------------------------------------------------------------------------
# E-distances between fields on different meshes
# ---------------------------------------------------------------------------

def _quad_points_on_mesh(space: FemSpace):
    """Degree-2 quadrature nodes and weights over all elements of the mesh."""
    bary, wq = tet_rule_degree2()
    mesh = space.mesh
    v = mesh.vertices[mesh.tets]
    pts = np.einsum("qk,ekd->eqd", bary, v)
    vols = mesh.tet_volumes()
    w = vols[:, None] * wq[None, :]
    return pts.reshape(-1, 3), w.reshape(-1), bary


def _eval_own(space: FemSpace, U, bary):
    """Evaluate columns of U at the fixed barycentric points of every element.

    Returns (n_pts, 3, k)."""
    from .fem import _basis_at
    vals, _ = _basis_at(space.order, bary)     # (q, nloc)
    k = U.shape[1]
    out = []
    for i in range(k):
        coef = space.expand(U[:, i]).reshape(-1, 3)[space.dofmap]  # (e,nloc,3)
        out.append(np.einsum("qk,ekd->eqd", vals, coef).reshape(-1, 3))
    return np.stack(out, axis=-1)


def _eval_other(space: FemSpace, U, pts, fail_budget=1e-3):
    """Extension-by-zero evaluation of fields on another mesh at global pts."""
    mesh = space.mesh
    ids, bary, found = mesh.locate(pts)
    info = mesh.structured
    top = info.top_height(pts[:, :2])
    inside = (pts[:, 2] <= top + 1e-12) & (pts[:, 2] >= info.z_lo - 1e-12) \
        & (pts[:, 0] >= info.origin[0] - 1e-12) \
        & (pts[:, 0] <= info.origin[0] + info.lengths[0] + 1e-12) \
        & (pts[:, 1] >= info.origin[1] - 1e-12) \
        & (pts[:, 1] <= info.origin[1] + info.lengths[1] + 1e-12)
    failures = int(np.sum(inside & ~found))
    if failures > fail_budget * len(pts):
        raise PointLocationError(
            f"{failures} of {len(pts)} quadrature points failed to locate")
    k = U.shape[1]
    out = np.zeros((len(pts), 3, k))
    sel = found
    if np.any(sel):
        for i in range(k):
            full = space.expand(U[:, i])
            out[sel, :, i] = space.evaluate(full, ids[sel], bary[sel])
    return out


def e_distance_subspace(space_eps: FemSpace, U_eps, space_ref: FemSpace,
                        U_ref) -> float:
    """Subspace E-distance: min over orthogonal alignments Q of the L2 norm of
    U_eps - (E U_ref) Q over the perturbed domain (extension by zero)."""
    U_eps = np.atleast_2d(U_eps.T).T
    U_ref = np.atleast_2d(U_ref.T).T
    pts, w, bary = _quad_points_on_mesh(space_eps)
    A = _eval_own(space_eps, U_eps, bary)      # (N, 3, k)
    B = _eval_other(space_ref, U_ref, pts)     # (N, 3, k)
    Gaa = np.einsum("n,ndi,ndj->ij", w, A, A)
    Gbb = np.einsum("n,ndi,ndj->ij", w, B, B)
    C = np.einsum("n,ndi,ndj->ij", w, A, B)
    sing = np.linalg.svd(C, compute_uv=False)
    d2 = float(np.trace(Gaa) + np.trace(Gbb) - 2.0 * np.sum(sing))
    return math.sqrt(max(0.0, d2))


def e_distance(space_eps: FemSpace, u_eps, space_ref: FemSpace, u_ref) -> float:
    """Sign-aligned E-distance for a single pair of fields."""
    return e_distance_subspace(space_eps, u_eps[:, None] if u_eps.ndim == 1
                               else u_eps, space_ref,
                               u_ref[:, None] if u_ref.ndim == 1 else u_ref)


# ---------------------------------------------------------------------------
# the eps sweep
# ---------------------------------------------------------------------------

@dataclass
class MeshPolicy:
    """Resolution policy: horizontal cells resolve the oscillation
    (h <= eps / h_factor); vertical levels are graded toward the top so the
    topmost cell height is eps / z_grade_factor (the constraint-adjustment
    layer under a tilted top contributes a spurious energy proportional to the
    top cell height, so grading ties that error to eps)."""

    h_factor: float = 8.0   # h_horizontal <= eps / h_factor
    nz: int = 8             # vertical cells when grading is off
    order: int = 1
    z_grade_factor: Optional[float] = 6.0
    z_growth: float = 1.6

    def resolution(self, lengths, depth: float, eps: float):
        """(nx, ny, nz, z_levels or None) for the member at eps."""
        from .mesh import graded_z_levels

        nx, ny, _ = policy_resolution(lengths, eps, self.h_factor, self.nz)
        if self.z_grade_factor is None:
            return nx, ny, self.nz, None
        levels = graded_z_levels(-depth, 0.0, first=eps / self.z_grade_factor,
                                 growth=self.z_growth)
        return nx, ny, len(levels) - 1, levels


@dataclass
class SolverConfig:
    m: int = 8
    tol: float = 1e-8
    shift: float = -0.5
    tau: float = 1.0
    max_iter: int = 300
    seed: int = 0


@dataclass
class SweepRow:
    eps: float
    n_mesh: tuple
    eigenvalues: np.ndarray
    tags: list
    gaps: np.ndarray
    rel_gaps: np.ndarray
    e_distances: list
    gaffney: float
    volume_diff: float


@dataclass
class ConvergenceReport:
    eps_list: list
    rows: list
    reference_eigenvalues: np.ndarray
    reference_tags: list
    reference_clusters: list
    conditions: object
    gap_tol: float
    exploratory: bool = False

    @property
    def max_gap_sequence(self):
        return [float(np.max(r.gaps)) for r in self.rows]

    @property
    def gaps_decreasing(self) -> bool:
        s = self.max_gap_sequence
        return all(b < a for a, b in zip(s, s[1:]))

    @property
    def final_gap_ok(self) -> bool:
        return float(np.max(self.rows[-1].rel_gaps)) < self.gap_tol

    @property
    def e_distances_decreasing(self) -> bool:
        cols = zip(*(r.e_distances for r in self.rows))
        return all(all(b < a for a, b in zip(c, c[1:])) for c in cols)

    @property
    def gaffney_spread(self) -> float:
        vals = [r.gaffney for r in self.rows]
        return (max(vals) - min(vals)) / min(vals)

    @property
    def passed(self) -> bool:
        if self.exploratory:
            return False
        return self.gaps_decreasing and self.final_gap_ok \
            and self.e_distances_decreasing

    def csv_rows(self):
        out = []
        for r in self.rows:
            for n in range(len(r.eigenvalues)):
                out.append([r.eps, r.n_mesh[0], r.n_mesh[1], r.n_mesh[2], n,
                            float(r.eigenvalues[n]), r.tags[n],
                            float(self.reference_eigenvalues[n]),
                            float(r.gaps[n]), float(r.rel_gaps[n]),
                            r.gaffney, r.volume_diff])
        return out


def _volume_difference(fam: PerturbationFamily, eps: float, nq: int = 8) -> float:
    """|Omega_eps| - |Omega| = integral of (g_eps - g) over the top chart."""
    dom_e = fam.domain(eps)
    g_eps = dom_e.profiles[0]
    g0 = fam.base.profiles[0]
    Lx, Ly = fam.lengths
    hint = g_eps.resolution_hint or max(Lx, Ly)
    npan = max(2, int(math.ceil(max(Lx, Ly) / (hint / 2))))
    xs, wx = gl_panels(uniform_panel_edges(0.0, Lx, npan), nq)
    ys, wy = gl_panels(uniform_panel_edges(0.0, Ly, npan), nq)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    W = np.outer(wx, wy)
    pts = np.stack([X.ravel(), Y.ravel()], axis=-1)
    return float(np.sum(W.ravel() * (g_eps.value(pts) - g0.value(pts))))


def _solve_domain(fam, eps, resolution, policy, solver, n_pairs):
    Lx, Ly = fam.lengths
    depth = fam.depth
    nx, ny, nz, z_levels = resolution
    n_counts = (nx, ny, nz)
    box = mesh_box(((0.0, Lx), (0.0, Ly)), -depth, 0.0, n_counts, z_levels)
    profile = fam.domain(eps).profiles[0] if eps > 0 else fam.base.profiles[0]
    try:
        mesh = shear_fit(box, profile, -depth, 0.0) if eps > 0 else box
    except InvertedElementError:
        n_counts = (int(nx * 1.5) + 1, int(ny * 1.5) + 1, nz)
        box = mesh_box(((0.0, Lx), (0.0, Ly)), -depth, 0.0, n_counts, z_levels)
        mesh = shear_fit(box, profile, -depth, 0.0)
    space = build_space(mesh, order=policy.order)
    A = assemble_stiffness(space, tau=solver.tau)
    M = assemble_mass(space)
    s = solve_gevp(A, M, m=n_pairs, shift=solver.shift, tol=solver.tol,
                   max_iter=solver.max_iter, method="lanczos",
                   seed=solver.seed)
    s = classify_modes(s, space, tau=solver.tau)
    return space, s, n_counts


def sweep_epsilon(fam: PerturbationFamily, eps_list: Sequence[float],
                  policy: Optional[MeshPolicy] = None,
                  solver: Optional[SolverConfig] = None, m: int = 6,
                  gap_tol: float = 0.05, n_edist_clusters: int = 2,
                  cluster_rtol: float = 5e-3,
                  conditions_grid: int = 96) -> ConvergenceReport:
    """Full stability sweep: mesh, solve and classify each member, pair with
    the unperturbed reference (meshed at the finest policy resolution), and
    report gap and E-distance trends plus Gaffney probes."""
    policy = policy or MeshPolicy()
    solver = solver or SolverConfig()
    eps_list = sorted(eps_list, reverse=True)
    alpha = getattr(fam, "alpha", None)
    exploratory = alpha is not None and alpha <= 1.5
    conditions = check_convergence_conditions(fam, eps_list,
                                              grid_n=conditions_grid)

    n_pairs = max(m + 4, solver.m)
    res_fine = policy.resolution(fam.lengths, fam.depth, min(eps_list))
    ref_space, ref_spec, _ = _solve_domain(fam, 0.0, res_fine, policy, solver,
                                           n_pairs)
    ref_clusters = cluster_eigenvalues(ref_spec.eigenvalues[:m], cluster_rtol,
                                       tags=ref_spec.tags[:m])

    rows = []
    for eps in eps_list:
        res = policy.resolution(fam.lengths, fam.depth, eps)
        space, spec, n_counts = _solve_domain(fam, eps, res, policy,
                                              solver, n_pairs)
        lam = spec.eigenvalues[:m]
        ref = ref_spec.eigenvalues[:m]
        gaps = np.abs(lam - ref)
        rel = gaps / np.abs(ref)
        dists = []
        for cl in ref_clusters[:n_edist_clusters]:
            idx = cl.indices
            dists.append(e_distance_subspace(
                space, spec.eigenvectors[:, idx], ref_space,
                ref_spec.eigenvectors[:, idx]))
        H1 = assemble_h1(space)
        gaff = discrete_gaffney_constant(space, spec, H1)
        rows.append(SweepRow(eps=eps, n_mesh=tuple(n_counts),
                             eigenvalues=lam, tags=spec.tags[:m], gaps=gaps,
                             rel_gaps=rel, e_distances=dists, gaffney=gaff,
                             volume_diff=_volume_difference(fam, eps)))
    return ConvergenceReport(eps_list=list(eps_list), rows=rows,
                             reference_eigenvalues=ref_spec.eigenvalues[:m],
                             reference_tags=ref_spec.tags[:m],
                             reference_clusters=ref_clusters,
                             conditions=conditions, gap_tol=gap_tol,
                             exploratory=exploratory)
