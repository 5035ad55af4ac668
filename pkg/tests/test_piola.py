import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cavistab.atlas import (
    Atlas,
    AtlasChart,
    AtlasDomain,
    ProfileFunction,
    oscillating_box_family,
)
from cavistab.errors import OutOfSubgraphError, PiolaError, TraceFlagMissingError
from cavistab.piola import (
    AnalyticVectorField,
    PartitionOfUnity,
    PiolaMap,
    h_map,
    make_box_test_fields,
    phi_psi_map,
    piola_map_for_family,
    piola_pullback,
    pullback_curl,
    pullback_div,
    verify_piolamain,
)


def column_domain(g, xy=(1.0, 1.0), z=(-1.0, 0.3), rho=0.05):
    """Single-chart subgraph domain: the chart column covers everything."""
    chart = AtlasChart(rotation=np.eye(3),
                       bounds=np.array([(0, xy[0]), (0, xy[1]), z]),
                       touches_boundary=True, covering=(True, True, False))
    atlas = Atlas(rho=rho, charts=(chart,))
    return AtlasDomain(atlas=atlas, profiles=(g,))


def offset_pair(c=0.02, k=None):
    g0 = ProfileFunction.constant(0.0)
    g1 = ProfileFunction.constant(c)
    atlas_dom0 = column_domain(g0)
    dom1 = AtlasDomain(atlas=atlas_dom0.atlas, profiles=(g1,))
    if k is None:
        k = 6.0 * c
    return PiolaMap(source=atlas_dom0, target=dom1, k=k)


def poly_field():
    def fn(p):
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        return np.stack([x * x + 2 * y * z, y * y - x * z, z * z + x * y], axis=-1)

    def jac(p):
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        J = np.empty(p.shape[:-1] + (3, 3))
        J[..., 0, 0], J[..., 0, 1], J[..., 0, 2] = 2 * x, 2 * z, 2 * y
        J[..., 1, 0], J[..., 1, 1], J[..., 1, 2] = -z, 2 * y, -x
        J[..., 2, 0], J[..., 2, 1], J[..., 2, 2] = y, x, 2 * z
        return J

    return AnalyticVectorField(fn=fn, jac_fn=jac, tangential_trace_zero=True)


class TestHMap:
    def test_zero_at_ghat(self):
        pm = offset_pair(c=0.02)
        xb = np.array([[0.3, 0.4]])
        ghat = 0.02 - pm.k
        assert_allclose(h_map(0, xb, np.array([ghat]), pm), [0.0], atol=1e-15)

    def test_top_maps_onto_base(self):
        pm = offset_pair(c=0.02)
        xb = np.array([[0.3, 0.4]])
        # at x3 = gt the cubic factor is 1, so h = gt - g
        assert_allclose(h_map(0, xb, np.array([0.02]), pm), [0.02], rtol=1e-13)

    def test_midpoint_eighth(self):
        pm = offset_pair(c=0.02)
        xb = np.array([[0.5, 0.5]])
        mid = 0.02 - pm.k / 2
        assert_allclose(h_map(0, xb, np.array([mid]), pm), [0.02 / 8], rtol=1e-13)

    def test_outside_subgraph_raises(self):
        pm = offset_pair(c=0.02)
        with pytest.raises(OutOfSubgraphError):
            pm.h(0, np.array([[0.5, 0.5]]), np.array([0.25]))

    def test_c1_matching_across_ghat(self):
        fam = oscillating_box_family(alpha=2.0)
        pm = piola_map_for_family(fam, 0.1)
        xb = np.array([[0.31, 0.22]])
        ghat = pm.charts[0].gt.value(xb) - pm.k
        for delta in (1e-7, 1e-9):
            below = pm.h_derivs(0, xb, ghat - delta)
            above = pm.h_derivs(0, xb, ghat + delta)
            assert np.max(np.abs(above[1] - below[1])) < 1e-12


class TestPhiPsiMap:
    def test_identity_below_ghat(self):
        pm = offset_pair(c=0.02)
        pts = np.array([[0.2, 0.7, -0.5], [0.9, 0.1, -0.2]])
        img, jac, det = phi_psi_map(0, pts, pm)
        assert_allclose(img, pts, atol=0)
        assert_allclose(jac, np.broadcast_to(np.eye(3), (2, 3, 3)), atol=0)
        assert_allclose(det, [1.0, 1.0], atol=0)

    def test_constant_offset_det_half_at_top(self):
        c = 0.02
        pm = offset_pair(c=c)  # k = 6c
        pts = np.array([[0.4, 0.6, c]])
        _, _, det = phi_psi_map(0, pts, pm)
        assert_allclose(det, [0.5], rtol=1e-13)

    def test_det_formula_constant_offset(self):
        c, k = 0.02, 0.1
        pm = offset_pair(c=c, k=k)
        x3 = np.array([c - 0.3 * k])
        _, _, det = phi_psi_map(0, np.array([[0.5, 0.5, 0]])[:, :2][None][0]
                                if False else np.array([[0.5, 0.5, x3[0]]]), pm)
        ghat = c - k
        expect = 1.0 - 3 * c * (x3[0] - ghat) ** 2 / k**3
        assert_allclose(det, [expect], rtol=1e-12)

    def test_fd_jacobian_oracle(self):
        fam = oscillating_box_family(alpha=2.0)
        pm = piola_map_for_family(fam, 0.1)
        rng = np.random.default_rng(4)
        gt = pm.charts[0].gt
        xb = np.column_stack([rng.uniform(0.1, 0.5, 100), rng.uniform(0.1, 0.4, 100)])
        gv = gt.value(xb)
        z = gv - rng.uniform(0.0, 1.0, 100) * 0.8 * pm.k
        pts = np.column_stack([xb, z])
        _, jac, _ = pm.psi_map(0, pts)
        errs = []
        for step in (1e-4, 5e-5):
            fd = np.empty_like(jac)
            for i in range(3):
                dp = np.zeros(3)
                dp[i] = step
                fd[..., :, i] = (pm.psi_map(0, pts + dp)[0]
                                 - pm.psi_map(0, pts - dp)[0]) / (2 * step)
            errs.append(np.max(np.abs(fd - jac)))
        assert errs[0] < 1e-5
        # O(step^2): halving the step shrinks the error ~4x
        assert errs[1] < errs[0] / 2.5

    def test_det_bounds_family(self):
        fam = oscillating_box_family(alpha=2.0)
        for eps in (0.2, 0.1, 0.05):
            pm = piola_map_for_family(fam, eps)
            lo, hi = pm.det_range()
            assert 0.5 - 1e-9 <= lo <= hi <= 1.5 + 1e-9

    def test_k_too_small_rejected(self):
        with pytest.raises(PiolaError):
            offset_pair(c=0.02, k=0.01)


class TestPartition:
    def test_sums_to_one_and_bounded(self):
        fam = oscillating_box_family()
        pou = PartitionOfUnity(fam.base.atlas)
        rng = np.random.default_rng(9)
        pts = np.column_stack([
            rng.uniform(0.0, 0.6, 3000),
            rng.uniform(0.0, 0.45, 3000),
            rng.uniform(-0.5, 0.02, 3000),
        ])
        psi, _ = pou.eval(pts)
        assert np.all(psi >= 0) and np.all(psi <= 1 + 1e-15)
        assert np.max(np.abs(psi.sum(axis=0) - 1.0)) < 1e-12

    def test_support_inside_charts(self):
        fam = oscillating_box_family()
        atlas = fam.base.atlas
        pou = PartitionOfUnity(atlas)
        rng = np.random.default_rng(10)
        pts = np.column_stack([
            rng.uniform(0.0, 0.6, 5000),
            rng.uniform(0.0, 0.45, 5000),
            rng.uniform(-0.5, 0.02, 5000),
        ])
        psi, _ = pou.eval(pts)
        for j, ch in enumerate(atlas.charts):
            q = pts @ ch.rotation.T
            outside = ~np.all((q > ch.bounds[:, 0]) & (q < ch.bounds[:, 1]), axis=-1)
            if np.any(outside):
                assert np.max(psi[j][outside]) < 1e-14

    def test_gradient_fd(self):
        fam = oscillating_box_family()
        pou = PartitionOfUnity(fam.base.atlas)
        pts = np.array([[0.3, 0.2, -0.3], [0.5, 0.4, -0.45], [0.1, 0.1, -0.05]])
        _, grad = pou.eval(pts)
        step = 1e-6
        for i in range(3):
            dp = np.zeros(3)
            dp[i] = step
            fd = (pou.eval(pts + dp)[0] - pou.eval(pts - dp)[0]) / (2 * step)
            assert np.max(np.abs(grad[:, :, i] - fd)) < 1e-6


class TestPullback:
    def test_identity_when_profiles_equal(self):
        dom = column_domain(ProfileFunction.constant(0.0))
        pm = PiolaMap(source=dom, target=dom, k=0.1)
        phi = poly_field()
        pb = piola_pullback(phi, pm)
        pts = np.array([[0.3, 0.3, -0.4], [0.8, 0.2, -0.05]])
        assert np.max(np.abs(pb.value(pts) - phi(pts))) < 1e-14

    def test_flag_required(self):
        dom = column_domain(ProfileFunction.constant(0.0))
        pm = PiolaMap(source=dom, target=dom, k=0.1)
        bare = AnalyticVectorField(fn=lambda p: p)
        with pytest.raises(TraceFlagMissingError):
            piola_pullback(bare, pm)

    def test_identity_region_family(self):
        fam = oscillating_box_family(alpha=2.0)
        pm = piola_map_for_family(fam, 0.1)
        phi = make_box_test_fields(fam.lengths, fam.depth)[2]
        pb = piola_pullback(phi, pm)
        rng = np.random.default_rng(13)
        pts = np.column_stack([
            rng.uniform(0.05, 0.55, 500),
            rng.uniform(0.05, 0.40, 500),
            rng.uniform(-0.45, -0.30, 500),  # safely below ghat
        ])
        err = np.max(np.abs(pb.value(pts) - phi(pts)))
        assert err < 1e-13 * max(1.0, np.max(np.abs(phi(pts))))

    def test_tangential_trace_preserved_on_perturbed_top(self):
        fam = oscillating_box_family(alpha=2.0)
        eps = 0.1
        pm = piola_map_for_family(fam, eps)
        g_eps = pm.charts[0].gt
        rng = np.random.default_rng(14)
        xb = np.column_stack([rng.uniform(0.05, 0.55, 400),
                              rng.uniform(0.05, 0.40, 400)])
        gv = g_eps.value(xb)
        pts = np.column_stack([xb, gv])
        grad = g_eps.gradient(xb)
        normal = np.column_stack([-grad, np.ones(len(xb))])
        normal /= np.linalg.norm(normal, axis=1, keepdims=True)
        for phi in make_box_test_fields(fam.lengths, fam.depth):
            pb = piola_pullback(phi, pm)
            vals = pb.value(pts)
            assert np.max(np.abs(np.cross(normal, vals))) < 1e-8

    def test_pullback_curl_identity_chart(self):
        dom = column_domain(ProfileFunction.constant(0.0))
        pm = PiolaMap(source=dom, target=dom, k=0.1)
        phi = poly_field()
        pts = np.array([[0.3, 0.5, -0.5]])
        assert_allclose(pullback_curl(phi, pm, 0, pts), phi.curl(pts), atol=1e-14)
        assert_allclose(pullback_div(phi, pm, 0, pts), phi.div(pts), atol=1e-14)

    def test_constant_field_curl_zero(self):
        pm = offset_pair(c=0.02)
        const = AnalyticVectorField(fn=lambda p: np.broadcast_to([1.0, -2.0, 0.5],
                                                                 p.shape).copy(),
                                    jac_fn=lambda p: np.zeros(p.shape[:-1] + (3, 3)),
                                    tangential_trace_zero=True)
        pts = np.array([[0.5, 0.5, 0.01]])
        # curl of the pullback of a constant field under the shear map:
        # w = DPsi^T c has curl = det DPsi^{-1} (curl c o Psi) = 0
        assert_allclose(pullback_curl(const, pm, 0, pts), np.zeros((1, 3)),
                        atol=1e-14)

    def test_transformed_curl_matches_fd(self):
        fam = oscillating_box_family(alpha=2.0)
        pm = piola_map_for_family(fam, 0.1)
        phi = poly_field()
        rng = np.random.default_rng(15)
        gt = pm.charts[0].gt
        xb = np.column_stack([rng.uniform(0.2, 0.4, 50), rng.uniform(0.15, 0.3, 50)])
        z = gt.value(xb) - rng.uniform(0.1, 0.9, 50) * 0.8 * pm.k
        pts = np.column_stack([xb, z])

        def w(p):
            img, jac, _ = pm.psi_map(0, p)
            return np.einsum("...mi,...m->...i", jac, phi(img))

        def fd_curl(p, s):
            J = np.empty(p.shape[:-1] + (3, 3))
            for i in range(3):
                dp = np.zeros(3)
                dp[i] = s
                J[..., :, i] = (w(p + dp) - w(p - dp)) / (2 * s)
            return np.stack([J[..., 2, 1] - J[..., 1, 2],
                             J[..., 0, 2] - J[..., 2, 0],
                             J[..., 1, 0] - J[..., 0, 1]], axis=-1)

        ana = pullback_curl(phi, pm, 0, pts)
        e1 = np.max(np.abs(fd_curl(pts, 1e-4) - ana))
        e2 = np.max(np.abs(fd_curl(pts, 5e-5) - ana))
        assert e1 < 1e-4 and e2 < e1 / 2.0

    def test_div_type_a_plus_b_matches_fd(self):
        fam = oscillating_box_family(alpha=2.0)
        pm = piola_map_for_family(fam, 0.1)
        phi = poly_field()
        gt = pm.charts[0].gt
        rng = np.random.default_rng(16)
        xb = np.column_stack([rng.uniform(0.2, 0.4, 40), rng.uniform(0.15, 0.3, 40)])
        z = gt.value(xb) - rng.uniform(0.1, 0.9, 40) * 0.8 * pm.k
        pts = np.column_stack([xb, z])

        def w(p):
            img, jac, _ = pm.psi_map(0, p)
            return np.einsum("...mi,...m->...i", jac, phi(img))

        div_ab, termA, termB = pullback_div(phi, pm, 0, pts, return_parts=True)
        assert np.max(np.abs(termB)) > 0  # B terms genuinely active

        def fd_div(s):
            fd = np.zeros(len(pts))
            for i in range(3):
                dp = np.zeros(3)
                dp[i] = s
                fd += (w(pts + dp)[:, i] - w(pts - dp)[:, i]) / (2 * s)
            return fd

        # Richardson-extrapolated central differences (O(s^4))
        s = 1e-4
        fd = (4.0 * fd_div(s / 2) - fd_div(s)) / 3.0
        assert np.max(np.abs(fd - div_ab)) < 1e-8 * max(1, np.max(np.abs(div_ab)))


class TestDerivativeEstimates:
    def setup_method(self):
        self.fam = oscillating_box_family(alpha=2.0)

    def _strip_samples(self, pm, n=400, seed=21):
        rng = np.random.default_rng(seed)
        gt = pm.charts[0].gt
        xb = np.column_stack([rng.uniform(0.05, 0.55, n),
                              rng.uniform(0.05, 0.40, n)])
        z = gt.value(xb) - rng.uniform(0.0, 1.0, n) * 0.98 * pm.k
        return xb, z

    def test_leibniz_derivative_bound(self):
        # sup |D^a h| <= 100 * sum_{g<=a} sup|D^g (gt-g)| / kappa^{|a|-|g|}
        for eps in (0.2, 0.1, 0.05):
            pm = piola_map_for_family(self.fam, eps)
            kappa = self.fam.kappa(eps)
            cd = pm.charts[0]
            xb, z = self._strip_samples(pm)
            _, grad, hess = pm.h_derivs(0, xb, z)
            grid = np.stack(np.meshgrid(np.linspace(0.01, 0.59, 120),
                                        np.linspace(0.01, 0.44, 120),
                                        indexing="ij"), axis=-1)
            d0 = float(np.max(np.abs(cd.diff.value(grid))))
            d1 = float(np.max(np.abs(cd.diff.gradient(grid))))
            d2 = float(np.max(np.abs(cd.diff.hessian(grid))))
            bound1 = d0 / kappa + d1
            bound2 = d0 / kappa**2 + d1 / kappa + d2
            assert np.max(np.abs(grad)) <= 100.0 * bound1
            assert np.max(np.abs(hess)) <= 100.0 * bound2

    def test_second_derivative_decay(self):
        eps_list = [0.2, 0.1, 0.05, 0.025]
        scaled = []
        for eps in eps_list:
            pm = piola_map_for_family(self.fam, eps)
            xb, z = self._strip_samples(pm)
            pts = np.column_stack([xb, z])
            dd = pm.psi_second_derivs(0, pts)
            scaled.append(float(np.max(np.abs(dd))) * self.fam.kappa(eps) ** 0.5)
        assert all(b < a for a, b in zip(scaled, scaled[1:]))


class TestVerify:
    def test_trivial_family(self):
        dom = column_domain(ProfileFunction.constant(0.0))
        pm = PiolaMap(source=dom, target=dom, k=0.1)
        phi = poly_field()
        rep = verify_piolamain(phi, pm, quadrature_n=6)
        assert_allclose(rep.norm_target, rep.norm_source, rtol=1e-12)
        assert rep.overlap_distance < 1e-12 * rep.norm_source
        assert rep.identity_max_rel_error < 1e-12
        assert rep.identity_nodes > 0

    def test_field_fd_self_check(self):
        for phi in make_box_test_fields():
            pts = np.array([[0.3, 0.2, -0.3], [0.5, 0.1, -0.45]])
            errs = phi.fd_check(pts)
            for v in errs.values():
                assert v < 1e-6
