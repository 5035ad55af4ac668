import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cavistab.atlas import (
    Atlas,
    AtlasChart,
    AtlasDomain,
    ProfileFunction,
    chart_local_coords,
    check_atlas_class,
    check_convergence_conditions,
    domain_contains,
    oscillating_box_family,
    profile_eval,
    rotation_about_axis,
)
from cavistab.errors import (
    AtlasValidationError,
    HessianUndefinedError,
    PointOutsideChartError,
)


def box_chart(bounds, boundary=True):
    return AtlasChart(rotation=np.eye(3), bounds=np.asarray(bounds, float),
                      touches_boundary=boundary)


def box_domain(g=None, xy=(1.0, 1.0), z=(-1.0, 1.0), rho=0.05):
    chart = box_chart([(0, xy[0]), (0, xy[1]), z])
    atlas = Atlas(rho=rho, charts=(chart,))
    if g is None:
        g = ProfileFunction.constant(0.0)
    return AtlasDomain(atlas=atlas, profiles=(g,))


class TestChartCoords:
    def test_identity_rotation(self):
        chart = box_chart([(0, 1), (0, 1), (-1, 1)])
        xbar, x3 = chart_local_coords(chart, np.array([0.3, 0.4, 0.1]))
        assert_allclose(xbar, [0.3, 0.4])
        assert_allclose(x3, 0.1)

    def test_rotation_90_about_z(self):
        R = rotation_about_axis([0, 0, 1], math.pi / 2)
        chart = AtlasChart(rotation=R, bounds=np.array([(-2, 2)] * 3),
                           touches_boundary=True)
        p = np.array([1.0, 0.0, 0.0])
        xbar, x3 = chart_local_coords(chart, p)
        # local = R @ p; norm preserved
        assert_allclose(np.r_[xbar, x3], R @ p, atol=1e-15)
        assert_allclose(np.hypot(xbar[0], xbar[1]), 1.0, atol=1e-14)

    def test_round_trip_random_rotation(self):
        rng = np.random.default_rng(7)
        A = rng.standard_normal((3, 3))
        Q, _ = np.linalg.qr(A)
        if np.linalg.det(Q) < 0:
            Q[:, 0] *= -1
        chart = AtlasChart(rotation=Q.T, bounds=np.array([(-5, 5)] * 3),
                           touches_boundary=True)
        pts = rng.uniform(-1, 1, size=(50, 3))
        xbar, x3 = chart_local_coords(chart, pts)
        back = chart.to_global(np.concatenate([xbar, x3[..., None]], axis=-1))
        assert np.max(np.abs(back - pts)) < 1e-12

    def test_outside_chart_raises(self):
        chart = box_chart([(0, 1), (0, 1), (0, 1)])
        with pytest.raises(PointOutsideChartError):
            chart_local_coords(chart, np.array([2.0, 0.5, 0.5]))

    def test_rotation_isometry_property(self):
        rng = np.random.default_rng(3)
        for axis, angle in [((1, 0, 0), 0.3), ((1, 2, 3), 1.1), ((0, 1, 0), -2.0)]:
            R = rotation_about_axis(axis, angle)
            pts = rng.standard_normal((1000, 3))
            assert np.max(np.abs(np.linalg.norm(pts @ R.T, axis=1)
                                 - np.linalg.norm(pts, axis=1))) < 1e-12

    def test_non_orthogonal_rotation_rejected(self):
        with pytest.raises(AtlasValidationError):
            AtlasChart(rotation=np.eye(3) * 1.5,
                       bounds=np.array([(0, 1)] * 3), touches_boundary=True)


class TestProfiles:
    def test_constant_zero(self):
        g = ProfileFunction.constant(0.0)
        v, grad, hess = profile_eval(g, np.array([0.2, -0.3]))
        assert v == 0.0
        assert_allclose(grad, [0, 0])
        assert_allclose(hess, np.zeros((2, 2)))

    def test_oscillatory_at_origin(self):
        g = ProfileFunction.oscillatory(alpha=2.0, eps=0.1)
        v, grad, _ = profile_eval(g, np.array([0.0, 0.0]))
        assert_allclose(v, 0.01, rtol=1e-14)
        assert_allclose(grad, [0.0, 0.0], atol=1e-14)

    def test_oscillatory_gradient_formula(self):
        # grad g = eps^{a-1} (grad b)(x/eps) psi + eps^a b(x/eps) grad psi
        g = ProfileFunction.oscillatory(alpha=2.0, eps=0.1, psi_kind="bump",
                                        psi_center=(0.3, 0.2),
                                        psi_halfwidth=(0.4, 0.35))
        xb = np.array([[0.27, 0.13], [0.41, 0.08]])
        step = 1e-6
        for k in range(2):
            dx = np.zeros(2)
            dx[k] = step
            fd = (g.value(xb + dx) - g.value(xb - dx)) / (2 * step)
            assert_allclose(g.gradient(xb)[:, k], fd, rtol=1e-7, atol=1e-10)

    def test_oscillatory_hessian_fd(self):
        g = ProfileFunction.oscillatory(alpha=2.0, eps=0.1, psi_kind="bump",
                                        psi_center=(0.3, 0.2),
                                        psi_halfwidth=(0.4, 0.35))
        xb = np.array([0.27, 0.13])
        step = 1e-5
        H = g.hessian(xb)
        for k in range(2):
            dx = np.zeros(2)
            dx[k] = step
            fd = (g.gradient(xb + dx) - g.gradient(xb - dx)) / (2 * step)
            assert_allclose(H[:, k], fd, rtol=1e-6, atol=1e-8)

    def test_log_counterexample_value(self):
        g = ProfileFunction.log_counterexample()
        v = g.value(np.array([math.exp(-2.0), 0.0]))
        assert_allclose(v, -math.exp(-2.0) / 2.0, rtol=1e-14)

    def test_log_hessian_undefined_at_origin(self):
        g = ProfileFunction.log_counterexample()
        with pytest.raises(HessianUndefinedError):
            g.hessian(np.array([0.0, 0.0]))

    def test_hoelder_gradient_is_sharp_hoelder(self):
        g = ProfileFunction.hoelder_power(beta=0.75, amplitude=1.0)
        x = np.array([[0.2, 0.0]])
        origin = np.array([[0.0, 0.0]])
        lhs = np.linalg.norm(g.gradient(x) - g.gradient(origin))
        assert_allclose(lhs, 1.75 * 0.2**0.75, rtol=1e-12)

    def test_tabulated_constant_continuation(self):
        vals = np.array([[1.0, 2.0], [3.0, 4.0]])
        g = ProfileFunction.tabulated(x0=0, y0=0, dx=1, dy=1, values=vals)
        assert_allclose(g.value(np.array([10.0, 10.0])), 4.0)


class TestDomainContains:
    def test_box_inside_outside(self):
        dom = box_domain()
        assert domain_contains(dom, np.array([0.5, 0.5, -0.5]))
        assert not domain_contains(dom, np.array([0.5, 0.5, 0.5]))

    def test_oscillatory_just_below_profile(self):
        g = ProfileFunction.oscillatory(alpha=2.0, eps=0.1)
        dom = box_domain(g=g, rho=0.04)
        xb = np.array([0.37, 0.81])
        gv = g.value(xb)
        below = np.array([xb[0], xb[1], gv - 1e-6])
        above = np.array([xb[0], xb[1], gv + 1e-6])
        assert domain_contains(dom, below)
        assert not domain_contains(dom, above)

    def test_overlap_consistency_model_family(self):
        # wherever two boundary charts both apply, their subgraph claims agree
        fam = oscillating_box_family()
        dom = fam.domain(0.1)
        rng = np.random.default_rng(11)
        pts = np.column_stack([
            rng.uniform(-0.05, 0.65, 2000),
            rng.uniform(-0.05, 0.50, 2000),
            rng.uniform(-0.55, 0.05, 2000),
        ])
        sp = dom.atlas.s_prime
        applies, claims = [], []
        for j, chart, g in dom.boundary_charts():
            q = pts @ chart.rotation.T
            in_cub = np.all((q > chart.bounds[:, 0]) & (q < chart.bounds[:, 1]),
                            axis=-1)
            gv = g.value(q[:, :2])
            applies.append(in_cub & (np.abs(q[:, 2] - gv) > 1e-9))
            claims.append(q[:, 2] < gv)
        checked = 0
        for j in range(sp):
            for k in range(j + 1, sp):
                both = applies[j] & applies[k]
                checked += int(both.sum())
                assert np.array_equal(claims[j][both], claims[k][both])
        assert checked > 100  # overlaps actually sampled


class TestAtlasClass:
    def test_zero_profile(self):
        dom = box_domain()
        assert check_atlas_class(dom, 1, 1.0, grid_n=32) == 0.0

    def test_constant_profile(self):
        dom = box_domain(g=ProfileFunction.constant(0.4), rho=0.05)
        assert_allclose(check_atlas_class(dom, 1, 1.0, grid_n=32), 0.4, rtol=1e-12)

    def test_scaling_in_amplitude(self):
        kwargs = dict(alpha=2.0, eps=0.1)
        g1 = ProfileFunction.oscillatory(b_amp=1.0, **kwargs)
        g3 = ProfileFunction.oscillatory(b_amp=3.0, **kwargs)
        d1 = box_domain(g=g1, rho=0.02)
        d3 = box_domain(g=g3, rho=0.02)
        m1 = check_atlas_class(d1, 1, 1.0, grid_n=64)
        m3 = check_atlas_class(d3, 1, 1.0, grid_n=64)
        assert_allclose(m3, 3.0 * m1, rtol=1e-10)

    def test_oscillatory_against_dense_oracle(self):
        g = ProfileFunction.oscillatory(alpha=2.0, eps=0.1)
        dom = box_domain(g=g, rho=0.02)
        coarse = check_atlas_class(dom, 1, 1.0, grid_n=96)
        dense = check_atlas_class(dom, 1, 1.0, grid_n=256)
        assert abs(dense - coarse) / dense < 0.05


class TestConvergenceConditions:
    def test_identical_family_all_zero(self):
        fam = oscillating_box_family()
        fam_trivial_perturbed = lambda eps: fam.base
        from cavistab.atlas import PerturbationFamily
        triv = PerturbationFamily(base=fam.base, perturbed=fam_trivial_perturbed,
                                  kappa=fam.kappa)
        rep = check_convergence_conditions(triv, [0.2, 0.1], grid_n=16)
        for row in rep.rows:
            assert row.ratios == (0.0, 0.0, 0.0)
        assert rep.all_decreasing

    def test_alpha2_ratios_decrease(self):
        fam = oscillating_box_family(alpha=2.0)
        rep = check_convergence_conditions(fam, [0.2, 0.1, 0.05, 0.025], grid_n=96)
        assert rep.all_decreasing
        for row in rep.rows:
            assert row.kappa_dominates

    def test_alpha2_order0_rate(self):
        # kappa = eps^{7/6}: ratio for |beta|=0 behaves like eps^{1/4}
        fam = oscillating_box_family(alpha=2.0)
        rep = check_convergence_conditions(fam, [0.2, 0.1], grid_n=96)
        r = [row.ratios[0] for row in rep.rows]
        observed = r[1] / r[0]
        assert abs(observed - 0.5**0.25) < 0.1

    def test_alpha_below_threshold_flagged(self):
        fam = oscillating_box_family(alpha=1.2, kappa_exponent=7.0 / 6.0)
        rep = check_convergence_conditions(fam, [0.2, 0.1, 0.05], grid_n=96)
        assert not rep.decreasing[2]


class TestModelFamilyValidity:
    def test_members_validate(self):
        fam = oscillating_box_family()
        fam.base.validate(grid_n=24)
        fam.domain(0.2).validate(grid_n=24)
        fam.domain(0.05).validate(grid_n=24)

    def test_family_shares_atlas(self):
        fam = oscillating_box_family()
        assert fam.domain(0.1).atlas is fam.base.atlas

    def test_volume_of_base_by_contains(self):
        fam = oscillating_box_family()
        rng = np.random.default_rng(5)
        pts = np.column_stack([
            rng.uniform(-0.1, 0.7, 4000),
            rng.uniform(-0.1, 0.55, 4000),
            rng.uniform(-0.6, 0.1, 4000),
        ])
        frac = np.mean(domain_contains(fam.base, pts))
        box_vol = 0.8 * 0.65 * 0.7
        assert abs(frac * box_vol - 0.6 * 0.45 * 0.5) < 0.02
