"""Structured tetrahedral meshes of subgraph boxes.

A box grid is split into 6 tets per hex (Kuhn/Freudenthal pattern around the
main diagonal, globally consistent, hence conforming), then fitted to a
profile by a vertical shear that moves vertices only. Elements stay affine.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import InvertedElementError, MeshError, NonManifoldBoundaryError

__all__ = ["TetMesh", "StructuredInfo", "mesh_box", "shear_fit", "mesh_quality",
           "write_mesh_text", "read_mesh_text", "policy_resolution"]

TAG_TOP, TAG_BOTTOM, TAG_SIDE = "top", "bottom", "side"

# corner offsets of the 6 Kuhn tets, all sharing the (0,0,0)-(1,1,1) diagonal,
# each positively oriented
_KUHN = np.array([
    [(0, 0, 0), (1, 0, 0), (1, 1, 0), (1, 1, 1)],
    [(0, 0, 0), (1, 1, 0), (0, 1, 0), (1, 1, 1)],
    [(0, 0, 0), (0, 1, 0), (0, 1, 1), (1, 1, 1)],
    [(0, 0, 0), (0, 1, 1), (0, 0, 1), (1, 1, 1)],
    [(0, 0, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1)],
    [(0, 0, 0), (1, 0, 1), (1, 0, 0), (1, 1, 1)],
], dtype=np.int64)


@dataclass(frozen=True)
class StructuredInfo:
    """Grid metadata kept on structured meshes for closed-form point location."""

    origin: tuple          # (x0, y0)
    lengths: tuple         # (Lx, Ly)
    n: tuple               # (nx, ny, nz)
    z_lo: float
    z_ref: float           # pre-shear top
    profile: object = None  # ProfileFunction after shear_fit, else None
    z_unit: object = None   # normalized z levels in [0, 1]; None = uniform

    def top_height(self, xbar):
        if self.profile is None:
            return np.full(np.shape(xbar)[0], self.z_ref)
        return self.profile.value(xbar)

    def layer_of(self, t):
        """Cell layer index for normalized vertical coordinates t in [0, 1]."""
        nz = self.n[2]
        if self.z_unit is None:
            return np.clip((np.asarray(t) * nz).astype(int), 0, nz - 1)
        return np.clip(np.searchsorted(self.z_unit, t, side="right") - 1,
                       0, nz - 1)


@dataclass
class TetMesh:
    vertices: np.ndarray        # (nv, 3)
    tets: np.ndarray            # (nt, 4) int
    boundary_faces: np.ndarray  # (nb, 3) int, outward-oriented
    boundary_tags: np.ndarray   # (nb,) of {top, bottom, side}
    structured: Optional[StructuredInfo] = None

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_tets(self):
        return len(self.tets)

    def tet_volumes(self):
        v = self.vertices[self.tets]
        e = v[:, 1:] - v[:, :1]
        return np.linalg.det(e) / 6.0

    def volume(self):
        return float(np.sum(self.tet_volumes()))

    def boundary_normals(self):
        """Outward unit normals of the boundary faces (orientation-based)."""
        v = self.vertices[self.boundary_faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def boundary_face_areas(self):
        v = self.vertices[self.boundary_faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return 0.5 * np.linalg.norm(n, axis=1)

    def validate(self):
        vols = self.tet_volumes()
        if np.any(vols <= 0):
            raise InvertedElementError(
                f"{int(np.sum(vols <= 0))} tets with non-positive volume")
        edges = np.concatenate([self.boundary_faces[:, [0, 1]],
                                self.boundary_faces[:, [1, 2]],
                                self.boundary_faces[:, [2, 0]]])
        edges.sort(axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        if np.any(counts != 2):
            raise NonManifoldBoundaryError(
                "boundary is not a closed 2-manifold (edge sharing != 2)")
        # outward orientation: normal agrees with face-centroid minus any
        # interior point of the owning tet; cheap proxy via signed volume of
        # (face, mesh centroid) is not robust, so check against adjacent tets.
        face_key = {}
        for t, tet in enumerate(self.tets):
            for face in ((tet[1], tet[2], tet[3]), (tet[0], tet[3], tet[2]),
                         (tet[0], tet[1], tet[3]), (tet[0], tet[2], tet[1])):
                face_key[tuple(sorted(face))] = t
        fc = self.vertices[self.boundary_faces].mean(axis=1)
        normals = self.boundary_normals()
        owners = np.array([face_key[tuple(sorted(f))] for f in self.boundary_faces])
        tc = self.vertices[self.tets[owners]].mean(axis=1)
        if np.any(np.sum(normals * (fc - tc), axis=1) <= 0):
            raise MeshError("boundary face normals are not outward")
        return self

    def locate(self, points, tol=1e-10):
        """Locate points in a structured (possibly sheared) mesh.

        Returns (tet_ids, bary (N,4), found_mask). Points above the profile or
        outside the footprint get found=False.
        """
        if self.structured is None:
            raise MeshError("point location needs structured metadata")
        info = self.structured
        nx, ny, nz = info.n
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        N = len(pts)
        x0, y0 = info.origin
        hx, hy = info.lengths[0] / nx, info.lengths[1] / ny
        i = np.clip(((pts[:, 0] - x0) / hx).astype(int), 0, nx - 1)
        j = np.clip(((pts[:, 1] - y0) / hy).astype(int), 0, ny - 1)
        top = info.top_height(pts[:, :2])
        depth = top - info.z_lo
        inz = (pts[:, 2] >= info.z_lo - tol) & (pts[:, 2] <= top + tol)
        inxy = (pts[:, 0] >= x0 - tol) & (pts[:, 0] <= x0 + info.lengths[0] + tol) \
            & (pts[:, 1] >= y0 - tol) & (pts[:, 1] <= y0 + info.lengths[1] + tol)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(depth > 0, (pts[:, 2] - info.z_lo) / depth, 0.0)
        k = info.layer_of(t)

        tet_ids = np.full(N, -1, dtype=np.int64)
        bary = np.zeros((N, 4))
        unresolved = inz & inxy
        for dk in (0, -1, 1, -2, 2):
            kk = np.clip(k + dk, 0, nz - 1)
            cell = ((i * ny + j) * nz + kk) * 6
            for tloc in range(6):
                idx = np.nonzero(unresolved)[0]
                if len(idx) == 0:
                    break
                cand = cell[idx] + tloc
                tv = self.vertices[self.tets[cand]]
                M = np.swapaxes(tv[:, 1:] - tv[:, :1], 1, 2)
                rhs = pts[idx] - tv[:, 0]
                lam = np.linalg.solve(M, rhs[..., None])[..., 0]
                lam0 = 1.0 - lam.sum(axis=1)
                ok = (lam0 >= -tol) & np.all(lam >= -tol, axis=1)
                hit = idx[ok]
                tet_ids[hit] = cand[ok]
                bary[hit, 0] = lam0[ok]
                bary[hit, 1:] = lam[ok]
                unresolved[hit] = False
        found = tet_ids >= 0
        return tet_ids, bary, found


def _vertex_grid(W, z_lo, z_hi, n, z_levels=None):
    (x0, x1), (y0, y1) = W
    nx, ny, nz = n
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    zs = np.linspace(z_lo, z_hi, nz + 1) if z_levels is None \
        else np.asarray(z_levels, dtype=float)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=-1)


def graded_z_levels(z_lo, z_hi, first: float, growth: float = 1.6,
                    nz_coarse: int = 6):
    """Vertical levels refined toward the top boundary.

    The bulk is a fixed uniform grid of nz_coarse cells (identical for every
    refinement target, so comparisons across targets see the same deep mesh);
    only the topmost bulk cell is subdivided geometrically so that the top
    cell height equals `first`. Used to resolve the constraint-adjustment
    layer under oscillating tops.
    """
    depth = z_hi - z_lo
    H = depth / nz_coarse
    if not (0 < first < depth):
        raise MeshError("first layer height must lie in (0, depth)")
    coarse = z_lo + H * np.arange(nz_coarse)  # excludes the top cell interior
    if first >= H:
        return np.concatenate([coarse, [z_hi]])
    steps = [first]
    while sum(steps) < H - 1e-15 * depth:
        steps.append(min(steps[-1] * growth, H - sum(steps)))
    if len(steps) >= 2 and steps[-1] < 0.3 * steps[-2]:
        steps[-2] += steps[-1]
        steps.pop()
    steps[-1] = H - sum(steps[:-1])
    block = z_hi - np.concatenate([[0.0], np.cumsum(steps)])
    levels = np.concatenate([coarse, block[::-1][1:]])
    levels[0], levels[-1] = z_lo, z_hi
    return levels


def mesh_box(W, z_lo, z_hi, n, z_levels=None) -> TetMesh:
    """Structured box mesh: each grid hex split into 6 Kuhn tets.

    W = ((x0, x1), (y0, y1)); n = (nx, ny, nz) cells per axis (each >= 1,
    >= 2 recommended for nontrivial interiors). z_levels optionally replaces
    the uniform vertical spacing (length nz + 1, endpoints z_lo, z_hi).
    """
    nx, ny, nz = (int(v) for v in n)
    (x0, x1), (y0, y1) = W
    if not (x1 > x0 and y1 > y0 and z_hi > z_lo):
        raise MeshError("degenerate box")
    if min(nx, ny, nz) < 1:
        raise MeshError("need at least one cell per axis")
    if z_levels is not None:
        z_levels = np.asarray(z_levels, dtype=float)
        if len(z_levels) != nz + 1 or np.any(np.diff(z_levels) <= 0) \
                or z_levels[0] != z_lo or z_levels[-1] != z_hi:
            raise MeshError("z_levels must increase from z_lo to z_hi, nz+1 long")
    verts = _vertex_grid(W, z_lo, z_hi, (nx, ny, nz), z_levels)

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    I, J, K = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                          indexing="ij")
    I, J, K = I.ravel(), J.ravel(), K.ravel()
    # rows come out cell-major: tet (cell, tloc) sits at row 6*cell + tloc
    tets = np.empty((len(I) * 6, 4), dtype=np.int64)
    for t in range(6):
        for c in range(4):
            di, dj, dk = _KUHN[t, c]
            tets[t::6, c] = vid(I + di, J + dj, K + dk)

    faces = np.concatenate([
        tets[:, [1, 2, 3]], tets[:, [0, 3, 2]],
        tets[:, [0, 1, 3]], tets[:, [0, 2, 1]],
    ])
    key = np.sort(faces, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True,
                               return_counts=True)
    boundary = faces[counts[inv] == 1]

    kk = boundary % (nz + 1)
    tags = np.where(np.all(kk == nz, axis=1), TAG_TOP,
                    np.where(np.all(kk == 0, axis=1), TAG_BOTTOM, TAG_SIDE))
    z_unit = None if z_levels is None else (z_levels - z_lo) / (z_hi - z_lo)
    info = StructuredInfo(origin=(x0, y0), lengths=(x1 - x0, y1 - y0),
                          n=(nx, ny, nz), z_lo=z_lo, z_ref=z_hi, z_unit=z_unit)
    return TetMesh(vertices=verts, tets=tets, boundary_faces=boundary,
                   boundary_tags=tags, structured=info)


def shear_fit(mesh: TetMesh, g, z_lo: float, z_top_ref: float) -> TetMesh:
    """Fit the mesh's top to the graph of g by vertical shearing.

    z -> z_lo + (z - z_lo) * (g(xbar) - z_lo) / (z_top_ref - z_lo); top-layer
    vertices land on the graph exactly. Raises InvertedElementError when the
    sheared mesh has non-positive volumes (profile under-resolved: refine).
    """
    if mesh.structured is None:
        raise MeshError("shear_fit needs a structured box mesh")
    info = mesh.structured
    xb = mesh.vertices[:, :2]
    gv = g.value(xb)
    if np.any(gv <= z_lo + 1e-9 * (z_top_ref - z_lo)):
        raise MeshError("profile touches or dips below the mesh floor")
    scale = (gv - z_lo) / (z_top_ref - z_lo)
    znew = z_lo + (mesh.vertices[:, 2] - z_lo) * scale
    nz = info.n[2]
    on_top = np.isclose(mesh.vertices[:, 2], z_top_ref, rtol=0, atol=1e-12
                        * max(1.0, abs(z_top_ref - z_lo)))
    znew[on_top] = gv[on_top]
    verts = mesh.vertices.copy()
    verts[:, 2] = znew
    out = TetMesh(vertices=verts, tets=mesh.tets,
                  boundary_faces=mesh.boundary_faces,
                  boundary_tags=mesh.boundary_tags,
                  structured=replace(info, profile=g))
    vols = out.tet_volumes()
    if np.any(vols <= 0):
        raise InvertedElementError(
            f"shear inverted {int(np.sum(vols <= 0))} tets; refine the mesh")
    return out


@dataclass
class MeshQuality:
    min_signed_volume: float
    max_aspect_ratio: float
    h_max: float


def mesh_quality(mesh: TetMesh) -> MeshQuality:
    """Gate metrics checked before assembly."""
    v = mesh.vertices[mesh.tets]
    vols = mesh.tet_volumes()
    pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    edge_len = np.stack([np.linalg.norm(v[:, a] - v[:, b], axis=1)
                         for a, b in pairs], axis=1)
    lmax = edge_len.max(axis=1)
    # min altitude = 3V / max face area
    areas = []
    for f in ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)):
        n = np.cross(v[:, f[1]] - v[:, f[0]], v[:, f[2]] - v[:, f[0]])
        areas.append(0.5 * np.linalg.norm(n, axis=1))
    amax = np.max(np.stack(areas, axis=1), axis=1)
    with np.errstate(divide="ignore"):
        aspect = lmax * amax / (3.0 * np.abs(vols))
    return MeshQuality(min_signed_volume=float(vols.min()),
                       max_aspect_ratio=float(aspect.max()),
                       h_max=float(lmax.max()))


def policy_resolution(lengths, eps: float, h_factor: float = 8.0, nz: int = 8):
    """Mesh counts for an oscillation scale eps: h_horizontal <= eps / h_factor."""
    nx = max(2, int(np.ceil(lengths[0] * h_factor / eps)))
    ny = max(2, int(np.ceil(lengths[1] * h_factor / eps)))
    return nx, ny, nz


# -- text format (version 1): counts, then v/t/f lines ------------------------

def write_mesh_text(mesh: TetMesh, fh):
    close = False
    if isinstance(fh, (str, bytes)):
        fh = open(fh, "w")
        close = True
    try:
        fh.write("cavmesh 1\n")
        fh.write(f"{mesh.num_vertices} {mesh.num_tets} {len(mesh.boundary_faces)}\n")
        for p in mesh.vertices:
            fh.write(f"v {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
        for t in mesh.tets:
            fh.write(f"t {t[0]} {t[1]} {t[2]} {t[3]}\n")
        for f, tag in zip(mesh.boundary_faces, mesh.boundary_tags):
            fh.write(f"f {f[0]} {f[1]} {f[2]} {tag}\n")
    finally:
        if close:
            fh.close()


def read_mesh_text(fh) -> TetMesh:
    close = False
    if isinstance(fh, (str, bytes)):
        fh = open(fh)
        close = True
    try:
        header = fh.readline().split()
        if header[:2] != ["cavmesh", "1"]:
            raise MeshError("not a cavmesh v1 file")
        nv, nt, nb = (int(x) for x in fh.readline().split())
        verts = np.empty((nv, 3))
        tets = np.empty((nt, 4), dtype=np.int64)
        faces = np.empty((nb, 3), dtype=np.int64)
        tags = np.empty(nb, dtype=object)
        for a in range(nv):
            parts = fh.readline().split()
            verts[a] = [float(x) for x in parts[1:4]]
        for a in range(nt):
            parts = fh.readline().split()
            tets[a] = [int(x) for x in parts[1:5]]
        for a in range(nb):
            parts = fh.readline().split()
            faces[a] = [int(x) for x in parts[1:4]]
            tags[a] = parts[4]
        return TetMesh(vertices=verts, tets=tets, boundary_faces=faces,
                       boundary_tags=np.asarray(tags))
    finally:
        if close:
            fh.close()
