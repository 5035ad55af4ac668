"""Chart-wise covariant Piola transform between atlas domains.

Given two domains of the same atlas with profiles g (source) and gt (target),
each boundary chart carries the vertical map

    Phi(xb, x3) = (xb, x3 - h(xb, x3)),
    h = (gt - g) * ((x3 - gh) / k)^3  above gh := gt - k,  0 below,

which is the identity below gh and carries the target graph onto the source
graph. Pullbacks of vector fields are glued with a partition of unity
subordinate to the chart cover; below every gh the glued transform reproduces
the field exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .atlas import (
    Atlas,
    AtlasChart,
    AtlasDomain,
    PerturbationFamily,
    ProfileFunction,
    _bump1d,
    _bump1d_d1,
    _ProfileDifference,
)
from .errors import (
    DetNearZeroError,
    OutOfSubgraphError,
    PiolaError,
    TraceFlagMissingError,
)
from .quadrature import gauss_legendre

__all__ = [
    "PartitionOfUnity",
    "AnalyticVectorField",
    "PiolaMap",
    "piola_map_for_family",
    "h_map",
    "phi_psi_map",
    "piola_pullback",
    "pullback_curl",
    "pullback_div",
    "verify_piolamain",
    "x_norm",
    "make_box_test_fields",
]


# ---------------------------------------------------------------------------
# partition of unity
# ---------------------------------------------------------------------------

class PartitionOfUnity:
    """Normalized tensor-product bumps, one per chart.

    Along axes marked `covering` on the chart the bump factor is constant 1;
    along the others it is the smooth exp(-1/(1-t^2))-type bump scaled into
    the chart bounds minus a margin. psi_j = B_j / sum_k B_k.
    """

    def __init__(self, atlas: Atlas, margin_frac: float = 0.08):
        self.atlas = atlas
        self.centers = []
        self.halfwidths = []  # np.inf marks a covering axis
        for ch in atlas.charts:
            w = ch.widths()
            margin = np.minimum(atlas.rho / 2.0, margin_frac * w)
            c = 0.5 * (ch.bounds[:, 0] + ch.bounds[:, 1])
            h = 0.5 * w - margin
            hw = np.where(np.asarray(ch.covering, dtype=bool), np.inf, h)
            self.centers.append(c)
            self.halfwidths.append(hw)

    def bumps(self, pts):
        """Raw bump values and global-frame gradients, shapes (s, N), (s, N, 3)."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        s = self.atlas.s
        B = np.empty((s, len(pts)))
        G = np.zeros((s, len(pts), 3))
        for j, ch in enumerate(self.atlas.charts):
            q = pts @ ch.rotation.T
            val = np.ones(len(pts))
            grad_loc = np.zeros((len(pts), 3))
            factors = []
            dfactors = []
            for i in range(3):
                hw = self.halfwidths[j][i]
                if not np.isfinite(hw):
                    factors.append(np.ones(len(pts)))
                    dfactors.append(np.zeros(len(pts)))
                    continue
                t = (q[:, i] - self.centers[j][i]) / hw
                factors.append(_bump1d(t))
                dfactors.append(_bump1d_d1(t) / hw)
            val = factors[0] * factors[1] * factors[2]
            grad_loc[:, 0] = dfactors[0] * factors[1] * factors[2]
            grad_loc[:, 1] = factors[0] * dfactors[1] * factors[2]
            grad_loc[:, 2] = factors[0] * factors[1] * dfactors[2]
            B[j] = val
            G[j] = grad_loc @ ch.rotation
        return B, G

    def eval(self, pts):
        """psi_j values and gradients, shapes (s, N) and (s, N, 3)."""
        B, G = self.bumps(pts)
        S = B.sum(axis=0)
        if np.any(S <= 0):
            raise PiolaError("partition bumps do not cover all sample points")
        GS = G.sum(axis=0)
        psi = B / S
        grad = (G - psi[:, :, None] * GS[None, :, :]) / S[None, :, None]
        return psi, grad

    def values(self, pts):
        B, _ = self.bumps(pts)
        S = B.sum(axis=0)
        if np.any(S <= 0):
            raise PiolaError("partition bumps do not cover all sample points")
        return B / S


# ---------------------------------------------------------------------------
# analytic vector fields
# ---------------------------------------------------------------------------

@dataclass
class AnalyticVectorField:
    """Vector field with analytic (or finite-difference) derivative contracts.

    fn maps (..., 3) -> (..., 3). jac_fn returns (..., 3, 3) with
    jac[..., m, n] = d u_m / d x_n. Missing derivatives fall back to central
    differences of step `fd_step` (O(step^2) accurate).
    """

    fn: Callable
    jac_fn: Optional[Callable] = None
    curl_fn: Optional[Callable] = None
    div_fn: Optional[Callable] = None
    tangential_trace_zero: bool = False
    fd_step: float = 1e-6
    name: str = "field"

    def __call__(self, pts):
        return self.fn(np.asarray(pts, dtype=float))

    def jacobian(self, pts):
        pts = np.asarray(pts, dtype=float)
        if self.jac_fn is not None:
            return self.jac_fn(pts)
        J = np.empty(pts.shape[:-1] + (3, 3))
        for n in range(3):
            dx = np.zeros(3)
            dx[n] = self.fd_step
            J[..., :, n] = (self.fn(pts + dx) - self.fn(pts - dx)) / (2 * self.fd_step)
        return J

    def curl(self, pts):
        if self.curl_fn is not None:
            return self.curl_fn(np.asarray(pts, dtype=float))
        J = self.jacobian(pts)
        return np.stack([
            J[..., 2, 1] - J[..., 1, 2],
            J[..., 0, 2] - J[..., 2, 0],
            J[..., 1, 0] - J[..., 0, 1],
        ], axis=-1)

    def div(self, pts):
        if self.div_fn is not None:
            return self.div_fn(np.asarray(pts, dtype=float))
        J = self.jacobian(pts)
        return np.trace(J, axis1=-2, axis2=-1)

    def fd_check(self, pts, step=1e-5):
        """Max abs deviation between analytic and finite-difference derivatives."""
        probe = AnalyticVectorField(fn=self.fn, fd_step=step)
        out = {}
        if self.jac_fn is not None:
            out["jac"] = float(np.max(np.abs(self.jacobian(pts) - probe.jacobian(pts))))
        if self.curl_fn is not None:
            out["curl"] = float(np.max(np.abs(self.curl(pts) - probe.curl(pts))))
        if self.div_fn is not None:
            out["div"] = float(np.max(np.abs(self.div(pts) - probe.div(pts))))
        return out


# ---------------------------------------------------------------------------
# the map
# ---------------------------------------------------------------------------

@dataclass
class _ChartMapData:
    chart: AtlasChart
    g: ProfileFunction        # source profile
    gt: ProfileFunction       # target profile
    diff: _ProfileDifference  # gt - g
    is_identity: bool


class PiolaMap:
    """Atlas Piola transform data from `source` to `target` (both on one atlas).

    k must exceed max_j sup|gt_j - g_j| and keep gh_j = gt_j - k above the
    chart floor plus rho; with k = 6 kappa both hold for families satisfying
    the convergence conditions, and det D Psi stays within [1/2, 3/2].
    """

    def __init__(self, source: AtlasDomain, target: AtlasDomain, k: float,
                 partition: Optional[PartitionOfUnity] = None,
                 validate_grid: int = 48):
        if source.atlas is not target.atlas:
            raise PiolaError("source and target must share one atlas")
        self.source, self.target = source, target
        self.atlas = source.atlas
        self.k = float(k)
        self.partition = partition or PartitionOfUnity(self.atlas)
        self.charts = []
        for (j, chart, g), gt in zip(source.boundary_charts(), target.profiles):
            diff = _ProfileDifference(gt, g)
            self.charts.append(_ChartMapData(chart=chart, g=g, gt=gt, diff=diff,
                                             is_identity=diff.is_zero))
        self._validate(validate_grid)

    def _validate(self, grid_n: int):
        from .atlas import _chart_grid

        rho = self.atlas.rho
        max_diff = 0.0
        for cd in self.charts:
            if cd.is_identity:
                continue
            xb = _chart_grid(cd.chart, grid_n)
            d = cd.diff.value(xb)
            max_diff = max(max_diff, float(np.max(np.abs(d))))
            gh = cd.gt.value(xb) - self.k
            a3 = cd.chart.bounds[2, 0]
            if np.min(gh) <= a3 + rho:
                raise PiolaError(
                    "offset k pushes gh = gt - k below the chart floor margin")
        if max_diff > 0 and self.k <= max_diff:
            raise PiolaError(
                f"k={self.k:.6g} must exceed max profile difference {max_diff:.6g}")
        self.max_profile_diff = max_diff

    # -- local vertical map pieces, all vectorized over leading axes ---------
    def _strip_q(self, cd: _ChartMapData, xbar, x3, tol=1e-9):
        gt = cd.gt.value(xbar)
        a3 = cd.chart.bounds[2, 0]
        if np.any(x3 > gt + tol * (1 + self.k)) or np.any(x3 < a3 - tol):
            raise OutOfSubgraphError("point outside the target subgraph closure")
        q = (x3 - (gt - self.k)) / self.k
        return np.clip(q, 0.0, None), gt

    def h(self, chart_idx: int, xbar, x3):
        cd = self.charts[chart_idx]
        xbar = np.asarray(xbar, dtype=float)
        x3 = np.asarray(x3, dtype=float)
        if cd.is_identity:
            return np.zeros_like(x3)
        q, _ = self._strip_q(cd, xbar, x3)
        return cd.diff.value(xbar) * q**3

    def h_derivs(self, chart_idx: int, xbar, x3):
        """h, grad (h_x1, h_x2, h_x3) and local Hessian of h, shapes
        (...,), (..., 3), (..., 3, 3)."""
        cd = self.charts[chart_idx]
        xbar = np.asarray(xbar, dtype=float)
        x3 = np.asarray(x3, dtype=float)
        base = np.shape(x3)
        if cd.is_identity:
            return np.zeros(base), np.zeros(base + (3,)), np.zeros(base + (3, 3))
        q, _ = self._strip_q(cd, xbar, x3)
        k = self.k
        d = cd.diff.value(xbar)
        dg = cd.diff.gradient(xbar)
        dH = cd.diff.hessian(xbar)
        gtg = cd.gt.gradient(xbar)
        gtH = cd.gt.hessian(xbar)
        h = d * q**3
        grad = np.zeros(base + (3,))
        q2 = q * q
        grad[..., :2] = dg * q[..., None] ** 3 - 3.0 * (d * q2)[..., None] * gtg / k
        grad[..., 2] = 3.0 * d * q2 / k
        H = np.zeros(base + (3, 3))
        # xb-xb block
        outer_dg = dg[..., :, None] * gtg[..., None, :]
        H[..., :2, :2] = (
            dH * q[..., None, None] ** 3
            - 3.0 * q2[..., None, None] * (outer_dg + np.swapaxes(outer_dg, -1, -2)) / k
            - 3.0 * (d * q2)[..., None, None] * gtH / k
            + 6.0 * (d * q)[..., None, None]
              * gtg[..., :, None] * gtg[..., None, :] / k**2
        )
        # x3-xb
        mixed = 3.0 * dg * q2[..., None] / k - 6.0 * (d * q)[..., None] * gtg / k**2
        H[..., 2, :2] = mixed
        H[..., :2, 2] = mixed
        H[..., 2, 2] = 6.0 * d * q / k**2
        return h, grad, H

    def dphi_local(self, chart_idx: int, xbar, x3):
        """(h, DPhi, det) in the chart's local frame."""
        h, grad, _ = self.h_derivs(chart_idx, xbar, x3)
        base = np.shape(x3)
        J = np.zeros(base + (3, 3))
        J[..., 0, 0] = J[..., 1, 1] = 1.0
        J[..., 2, 0] = -grad[..., 0]
        J[..., 2, 1] = -grad[..., 1]
        J[..., 2, 2] = 1.0 - grad[..., 2]
        return h, J, J[..., 2, 2]

    def psi_map(self, chart_idx: int, pts):
        """Global map: image Psi(p), jacobian D Psi, det. pts (..., 3)."""
        cd = self.charts[chart_idx]
        pts = np.asarray(pts, dtype=float)
        R = cd.chart.rotation
        q = pts @ R.T
        h, J, det = self.dphi_local(chart_idx, q[..., :2], q[..., 2])
        img_loc = q.copy()
        img_loc[..., 2] -= h
        img = img_loc @ R
        jac = np.einsum("am,...ab,bi->...mi", R, J, R)
        return img, jac, det

    def psi_second_derivs(self, chart_idx: int, pts):
        """d^2 Psi^m / d x_i^2, shape (..., 3, 3) indexed [m, i]."""
        cd = self.charts[chart_idx]
        pts = np.asarray(pts, dtype=float)
        R = cd.chart.rotation
        q = pts @ R.T
        _, _, H = self.h_derivs(chart_idx, q[..., :2], q[..., 2])
        diag = np.einsum("bi,...bc,ci->...i", R, H, R)
        return np.einsum("m,...i->...mi", -R[2], diag)

    def h_local_laplacian(self, chart_idx: int, xbar, x3):
        _, _, H = self.h_derivs(chart_idx, xbar, x3)
        return np.trace(H, axis1=-2, axis2=-1)

    def det_range(self, grid_n: int = 48, nz: int = 16):
        """Sampled min/max of det D Psi over the perturbed strips."""
        from .atlas import _chart_grid

        lo, hi = np.inf, -np.inf
        for j, cd in enumerate(self.charts):
            if cd.is_identity:
                continue
            xb = _chart_grid(cd.chart, grid_n)
            gt = cd.gt.value(xb)
            t = np.linspace(0.0, 1.0, nz)
            x3 = (gt - self.k)[..., None] + self.k * t
            xbb = np.broadcast_to(xb[..., None, :], x3.shape + (2,))
            _, _, det = self.dphi_local(j, xbb.reshape(-1, 2), x3.reshape(-1))
            lo, hi = min(lo, float(det.min())), max(hi, float(det.max()))
        if not np.isfinite(lo):
            lo = hi = 1.0
        return lo, hi


def piola_map_for_family(fam: PerturbationFamily, eps: float,
                         partition: Optional[PartitionOfUnity] = None) -> PiolaMap:
    """Family transform with the canonical offset k = 6 kappa(eps)."""
    return PiolaMap(source=fam.base, target=fam.domain(eps),
                    k=6.0 * fam.kappa(eps), partition=partition)


# spec-level operation wrappers ------------------------------------------------

def h_map(chart_idx: int, xbar, x3, pmap: PiolaMap):
    return pmap.h(chart_idx, xbar, x3)


def phi_psi_map(chart_idx: int, p, pmap: PiolaMap):
    return pmap.psi_map(chart_idx, p)


def pullback_curl(u: AnalyticVectorField, pmap: PiolaMap, chart_idx: int, pts):
    """Curl of the single-chart covariant pullback of u, evaluated at pts."""
    img, jac, det = pmap.psi_map(chart_idx, pts)
    if np.any(np.abs(det) < 1e-8):
        raise DetNearZeroError("Piola map jacobian nearly singular")
    cu = u.curl(img)
    inv = np.linalg.inv(jac)
    return det[..., None] * np.einsum("...mi,...i->...m", inv, cu)


def pullback_div(u: AnalyticVectorField, pmap: PiolaMap, chart_idx: int, pts,
                 return_parts: bool = False):
    """Divergence of the single-chart pullback via the chain-rule split into
    first-derivative (A) and second-derivative (B) terms."""
    cd = pmap.charts[chart_idx]
    pts = np.asarray(pts, dtype=float)
    img, jac, det = pmap.psi_map(chart_idx, pts)
    if np.any(np.abs(det) < 1e-8):
        raise DetNearZeroError("Piola map jacobian nearly singular")
    Du = u.jacobian(img)
    G = np.einsum("...mi,...ni->...mn", jac, jac)
    termA = np.einsum("...mn,...nm->...", Du, G)
    R = cd.chart.rotation
    q = pts @ R.T
    lap = pmap.h_local_laplacian(chart_idx, q[..., :2], q[..., 2])
    uval = u(img)
    termB = -lap * np.einsum("m,...m->...", R[2], uval)
    if return_parts:
        return termA + termB, termA, termB
    return termA + termB


class PiolaField:
    """Lazily evaluated Atlas Piola pullback of an analytic field."""

    def __init__(self, phi: AnalyticVectorField, pmap: PiolaMap):
        if not phi.tangential_trace_zero:
            raise TraceFlagMissingError(
                "pullback is defined for tangential-trace-zero fields only")
        self.phi = phi
        self.pmap = pmap

    def triple(self, pts):
        """(value, curl, div) of the pullback in one pass over charts."""
        pmap, phi = self.pmap, self.phi
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        N = len(pts)
        value = np.zeros((N, 3))
        curl = np.zeros((N, 3))
        div = np.zeros(N)
        sp = pmap.atlas.s_prime
        psi_here, dpsi_here = pmap.partition.eval(pts)
        for j, ch in enumerate(pmap.atlas.charts):
            mask = ch.contains_cuboid(pts, tol=1e-12)
            if not np.any(mask):
                continue
            sub = pts[mask]
            if j < sp and not pmap.charts[j].is_identity:
                img, jac, det = pmap.psi_map(j, sub)
                psi_all, dpsi_all = pmap.partition.eval(img)
                psi, dpsi = psi_all[j], dpsi_all[j]
                val = phi(img)
                cut_val = psi[:, None] * val
                value[mask] += np.einsum("...mi,...m->...i", jac, cut_val)
                cj = psi[:, None] * phi.curl(img) + np.cross(dpsi, val)
                inv = np.linalg.inv(jac)
                curl[mask] += det[:, None] * np.einsum("...mi,...i->...m", inv, cj)
                Dj = psi[:, None, None] * phi.jacobian(img) \
                    + val[:, :, None] * dpsi[:, None, :]
                G = np.einsum("...mi,...ni->...mn", jac, jac)
                termA = np.einsum("...mn,...nm->...", Dj, G)
                R = pmap.charts[j].chart.rotation
                q = sub @ R.T
                lap = pmap.h_local_laplacian(j, q[..., :2], q[..., 2])
                termB = -lap * (val @ R[2])
                div[mask] += termA + termB
            else:
                psi, dpsi = psi_here[j][mask], dpsi_here[j][mask]
                val = phi(sub)
                value[mask] += psi[:, None] * val
                curl[mask] += psi[:, None] * phi.curl(sub) + np.cross(dpsi, val)
                div[mask] += psi * phi.div(sub) \
                    + np.einsum("...i,...i->...", dpsi, val)
        return value, curl, div

    def value(self, pts):
        pts = np.asarray(pts, dtype=float)
        return self.triple(pts)[0].reshape(pts.shape)

    def curl(self, pts):
        pts = np.asarray(pts, dtype=float)
        return self.triple(pts)[1].reshape(pts.shape)

    def div(self, pts):
        pts = np.asarray(pts, dtype=float)
        return self.triple(pts)[2].reshape(pts.shape[:-1])

    __call__ = value


def piola_pullback(phi: AnalyticVectorField, pmap: PiolaMap) -> PiolaField:
    return PiolaField(phi, pmap)


# ---------------------------------------------------------------------------
# quadrature over atlas subgraph domains
# ---------------------------------------------------------------------------

def _xy_panel_nodes(chart: AtlasChart, nq: int, hint: Optional[float],
                    min_panels: int = 2):
    (ax, bx), (ay, by) = chart.base_rect
    def panels(a, b):
        n = min_panels
        if hint:
            n = max(n, int(math.ceil((b - a) / (hint / 2.0))))
        edges = np.linspace(a, b, n + 1)
        x, w = gauss_legendre(nq)
        mids = 0.5 * (edges[:-1] + edges[1:])
        halfs = 0.5 * np.diff(edges)
        return (mids[:, None] + halfs[:, None] * x).ravel(), \
               (halfs[:, None] * np.full(nq, 1.0) * w).ravel()
    xs, wx = panels(ax, bx)
    ys, wy = panels(ay, by)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    W = np.outer(wx, wy)
    return np.stack([X.ravel(), Y.ravel()], axis=-1), W.ravel()


def subgraph_quadrature(dom: AtlasDomain, nq: int = 8, upper=None, z_splits=None):
    """Quadrature nodes/weights for integrals over `dom`, chart by chart:
    int_dom F = sum_j int_{V_j cap dom} psi_j F with psi applied by the caller.

    upper(j, xbar) may override the chart's profile as z-upper limit (used for
    intersections); z_splits(j, xbar) returns interior split heights.
    Returns a list of (chart_idx, pts_global (N,3), weights (N,)).
    """
    out = []
    for j, chart, g in dom.boundary_charts():
        hint = g.resolution_hint
        xb, wxy = _xy_panel_nodes(chart, nq, hint)
        lo = np.full(len(xb), chart.bounds[2, 0])
        hi = g.value(xb) if upper is None else upper(j, xb)
        splits = [] if z_splits is None else z_splits(j, xb)
        edges = [lo] + [np.clip(s, lo, hi) for s in splits] + [hi]
        t, wt = gauss_legendre(nq)
        for e0, e1 in zip(edges[:-1], edges[1:]):
            mid, half = 0.5 * (e0 + e1), 0.5 * (e1 - e0)
            z = mid[:, None] + half[:, None] * t[None, :]
            wz = half[:, None] * wt[None, :]
            loc = np.concatenate([
                np.broadcast_to(xb[:, None, :], z.shape + (2,)),
                z[..., None]], axis=-1).reshape(-1, 3)
            pts = loc @ chart.rotation
            w = (wxy[:, None] * wz).ravel()
            keep = w > 0
            out.append((j, pts[keep], w[keep]))
    return out


def x_norm(triple_fn, dom: AtlasDomain, partition: PartitionOfUnity,
           nq: int = 8, upper=None, z_splits=None):
    """X-norm of a field given by triple_fn(pts) -> (value, curl, div).

    Returns (norm, parts) with parts = squared L2 masses of value/curl/div.
    """
    parts = np.zeros(3)
    for j, pts, w in subgraph_quadrature(dom, nq, upper, z_splits):
        psi = partition.values(pts)[j]
        ww = w * psi
        val, curl, div = triple_fn(pts)
        parts[0] += float(np.sum(ww * np.sum(val * val, axis=-1)))
        parts[1] += float(np.sum(ww * np.sum(curl * curl, axis=-1)))
        parts[2] += float(np.sum(ww * div * div))
    return math.sqrt(float(np.sum(parts))), parts


@dataclass
class PiolaVerification:
    eps: Optional[float]
    norm_source: float
    norm_target: float
    overlap_distance: float
    min_det: float
    max_det: float
    identity_max_rel_error: float
    identity_nodes: int

    def csv_row(self):
        return [self.eps, self.norm_source, self.norm_target,
                self.overlap_distance, self.min_det, self.max_det]


def verify_piolamain(phi: AnalyticVectorField, pmap: PiolaMap,
                     quadrature_n: int = 8, eps: Optional[float] = None
                     ) -> PiolaVerification:
    """Quadrature check of the transform's norm and locality properties:
    X-norms on source and target, X-distance on the overlap, the sampled
    determinant range, and exactness of the identity region."""
    pb = piola_pullback(phi, pmap)
    part = pmap.partition

    def phi_triple(p):
        return phi(p), phi.curl(p), phi.div(p)

    norm_source, _ = x_norm(phi_triple, pmap.source, part, nq=quadrature_n)

    def strip_splits(j, xb):
        cd = pmap.charts[j]
        if cd.is_identity:
            return []
        return [cd.gt.value(xb) - pmap.k]

    norm_target, _ = x_norm(pb.triple, pmap.target, part, nq=quadrature_n,
                            z_splits=strip_splits)

    def overlap_upper(j, xb):
        return np.minimum(pmap.charts[j].g.value(xb), pmap.charts[j].gt.value(xb))

    def diff_triple(p):
        v, c, d = pb.triple(p)
        return v - phi(p).reshape(v.shape), c - phi.curl(p).reshape(c.shape), \
            d - phi.div(p).reshape(d.shape)

    overlap, _ = x_norm(diff_triple, pmap.target, part, nq=quadrature_n,
                        upper=overlap_upper, z_splits=strip_splits)

    # identity region: target quadrature nodes below gh in every chart
    id_err, id_nodes, scale = 0.0, 0, 0.0
    for j, pts, w in subgraph_quadrature(pmap.target, nq=quadrature_n,
                                         z_splits=strip_splits):
        below = np.ones(len(pts), dtype=bool)
        for cd in pmap.charts:
            if cd.is_identity:
                continue
            q = pts @ cd.chart.rotation.T
            in_cub = cd.chart.contains_cuboid(pts)
            gh = cd.gt.value(q[:, :2]) - pmap.k
            below &= ~in_cub | (q[:, 2] < gh - 1e-12 * (1 + pmap.k))
        if not np.any(below):
            continue
        sub = pts[below]
        pv = pb.value(sub)
        fv = phi(sub)
        id_err = max(id_err, float(np.max(np.abs(pv - fv))))
        scale = max(scale, float(np.max(np.abs(fv))))
        id_nodes += int(below.sum())
    rel = id_err / scale if scale > 0 else 0.0

    lo, hi = pmap.det_range()
    return PiolaVerification(eps=eps, norm_source=norm_source,
                             norm_target=norm_target, overlap_distance=overlap,
                             min_det=lo, max_det=hi,
                             identity_max_rel_error=rel, identity_nodes=id_nodes)


# ---------------------------------------------------------------------------
# analytic test fields on the model box
# ---------------------------------------------------------------------------

def make_box_test_fields(lengths=(0.6, 0.45), depth=0.5):
    """Three analytic fields in X_N of the box (0,Lx)x(0,Ly)x(-depth,0):
    a gradient field, a divergence-free field, and a mixed one."""
    Lx, Ly = lengths
    kx, ky, kz = math.pi / Lx, math.pi / Ly, math.pi / depth

    def trig(pts):
        x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
        return (np.sin(kx * x), np.cos(kx * x), np.sin(ky * y), np.cos(ky * y),
                np.sin(kz * (z + depth)), np.cos(kz * (z + depth)))

    def grad_fn(pts):
        sx, cx, sy, cy, sz, cz = trig(pts)
        return np.stack([kx * cx * sy * sz, ky * sx * cy * sz,
                         kz * sx * sy * cz], axis=-1)

    def grad_jac(pts):
        sx, cx, sy, cy, sz, cz = trig(pts)
        J = np.empty(pts.shape[:-1] + (3, 3))
        J[..., 0, 0] = -kx * kx * sx * sy * sz
        J[..., 0, 1] = kx * ky * cx * cy * sz
        J[..., 0, 2] = kx * kz * cx * sy * cz
        J[..., 1, 0] = J[..., 0, 1]
        J[..., 1, 1] = -ky * ky * sx * sy * sz
        J[..., 1, 2] = ky * kz * sx * cy * cz
        J[..., 2, 0] = J[..., 0, 2]
        J[..., 2, 1] = J[..., 1, 2]
        J[..., 2, 2] = -kz * kz * sx * sy * sz
        return J

    f1 = AnalyticVectorField(
        fn=grad_fn, jac_fn=grad_jac,
        curl_fn=lambda p: np.zeros(p.shape),
        div_fn=lambda p: -(kx**2 + ky**2 + kz**2) * np.sin(kx * p[..., 0])
            * np.sin(ky * p[..., 1]) * np.sin(kz * (p[..., 2] + depth)),
        tangential_trace_zero=True, name="gradient")

    def sol_fn(pts):
        sx, cx, sy, cy, _, _ = trig(pts)
        out = np.zeros(pts.shape)
        out[..., 2] = sx * sy
        return out

    def sol_jac(pts):
        sx, cx, sy, cy, _, _ = trig(pts)
        J = np.zeros(pts.shape[:-1] + (3, 3))
        J[..., 2, 0] = kx * cx * sy
        J[..., 2, 1] = ky * sx * cy
        return J

    f2 = AnalyticVectorField(
        fn=sol_fn, jac_fn=sol_jac,
        div_fn=lambda p: np.zeros(p.shape[:-1]),
        tangential_trace_zero=True, name="solenoidal")

    A = (1.0, 0.5, -0.75)

    def mix_fn(pts):
        sx, cx, sy, cy, sz, cz = trig(pts)
        return np.stack([A[0] * cx * sy * sz, A[1] * sx * cy * sz,
                         A[2] * sx * sy * cz], axis=-1)

    def mix_jac(pts):
        sx, cx, sy, cy, sz, cz = trig(pts)
        J = np.empty(pts.shape[:-1] + (3, 3))
        J[..., 0, 0] = -A[0] * kx * sx * sy * sz
        J[..., 0, 1] = A[0] * ky * cx * cy * sz
        J[..., 0, 2] = A[0] * kz * cx * sy * cz
        J[..., 1, 0] = A[1] * kx * cx * cy * sz
        J[..., 1, 1] = -A[1] * ky * sx * sy * sz
        J[..., 1, 2] = A[1] * kz * sx * cy * cz
        J[..., 2, 0] = A[2] * kx * cx * sy * cz
        J[..., 2, 1] = A[2] * ky * sx * cy * cz
        J[..., 2, 2] = -A[2] * kz * sx * sy * sz
        return J

    f3 = AnalyticVectorField(fn=mix_fn, jac_fn=mix_jac,
                             tangential_trace_zero=True, name="mixed")
    return [f1, f2, f3]
