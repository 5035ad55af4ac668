import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cavistab.atlas import ProfileFunction
from cavistab.errors import QuadratureNonConvergentError
from cavistab.gaffney import (
    ModulusOfContinuity,
    d32_seminorm,
    dini_integral,
    mazya_criterion,
    scaling_law_check,
)


class TestDini:
    @pytest.mark.parametrize("beta", [0.6, 0.75, 0.9])
    def test_closed_form_power(self, beta):
        om = ModulusOfContinuity.power(K=1.0, beta=beta, cap=1.0)
        res = dini_integral(om, t_min=1e-3, t_max=1e8)
        assert not res.divergent
        assert_allclose(res.value, 1.0 / (2 * beta - 1) + 1.0, rtol=1e-6)

    def test_capped_power_075_value(self):
        # spec's worked value: 1/(2*0.75-1) + 1 = 3
        om = ModulusOfContinuity.power(K=1.0, beta=0.75, cap=1.0)
        res = dini_integral(om, t_min=1e-3, t_max=1e8)
        assert_allclose(res.value, 3.0, rtol=1e-6)

    def test_sqrt_divergent(self):
        om = ModulusOfContinuity.power(K=1.0, beta=0.5, cap=1.0)
        assert dini_integral(om, t_min=1e-3, t_max=1e8).divergent

    def test_log_counterexample_divergent(self):
        om = ModulusOfContinuity.log_reciprocal()
        assert dini_integral(om, t_min=1e-3, t_max=10.0).divergent

    def test_lipschitz_capped_closed_form(self):
        # min(ct, 1): integral = c^2*(1/c) + c = 2c
        for c in (0.5, 2.0):
            om = ModulusOfContinuity.lipschitz_capped(c=c, cap=1.0)
            res = dini_integral(om, t_min=1e-4, t_max=1e8)
            assert_allclose(res.value, 2.0 * c, rtol=1e-6)

    def test_profile_modulus_catalog(self):
        g = ProfileFunction.hoelder_power(beta=0.75, amplitude=1.0)
        om = g.gradient_modulus()
        res = dini_integral(om, t_min=1e-3, t_max=1e8)
        assert not res.divergent
        g2 = ProfileFunction.log_counterexample()
        assert dini_integral(g2.gradient_modulus(), t_min=1e-3,
                             t_max=10.0).divergent


class TestScalingLaw:
    @pytest.mark.parametrize("alpha", [1.6, 2.0, 2.5])
    def test_slope_matches_prediction(self, alpha):
        om = ModulusOfContinuity.lipschitz_capped(c=1.0, cap=1.0)
        res = scaling_law_check(alpha, om, [0.2, 0.1, 0.05, 0.025])
        assert res.slope_error < 0.05

    def test_alpha2_halving_ratio(self):
        om = ModulusOfContinuity.lipschitz_capped(c=1.0, cap=1.0)
        res = scaling_law_check(2.0, om, [0.2, 0.1])
        ratio = res.values[1] / res.values[0]
        assert abs(ratio - 0.5) < 0.015  # 2^{-(2a-3)} = 1/2

    def test_alpha_15_flat(self):
        om = ModulusOfContinuity.lipschitz_capped(c=1.0, cap=1.0)
        res = scaling_law_check(1.5, om, [0.2, 0.1, 0.05])
        vmax, vmin = max(res.values), min(res.values)
        assert (vmax - vmin) / vmin < 0.03

    def test_alpha_below_grows(self):
        om = ModulusOfContinuity.lipschitz_capped(c=1.0, cap=1.0)
        res = scaling_law_check(1.2, om, [0.2, 0.1, 0.05])
        assert res.values[0] < res.values[1] < res.values[2]
        assert abs(res.slope - (-0.6)) < 0.05


class TestD32:
    def test_affine_profile_zero(self):
        g = ProfileFunction.constant(0.3)
        val = d32_seminorm(g, (0.1, 0.2), rho=0.2, E_spec=("disk", 0.1))
        assert val == 0.0

    def test_homogeneity_in_amplitude(self):
        g1 = ProfileFunction.oscillatory(alpha=2.0, eps=0.2, b_amp=1.0)
        g3 = ProfileFunction.oscillatory(alpha=2.0, eps=0.2, b_amp=3.0)
        v1 = d32_seminorm(g1, (0.05, 0.02), rho=0.05, quad_n=10)
        v3 = d32_seminorm(g3, (0.05, 0.02), rho=0.05, quad_n=10)
        assert_allclose(v3, 3.0 * v1, rtol=1e-10)

    def test_monotone_in_rho(self):
        g = ProfileFunction.oscillatory(alpha=2.0, eps=0.2)
        vals = [d32_seminorm(g, (0.03, 0.01), rho=r, E_spec=("disk", 0.02),
                             quad_n=10) for r in (0.05, 0.1, 0.2)]
        assert vals[0] <= vals[1] <= vals[2]

    def test_hoelder_bound_direction(self):
        # computed seminorm stays below the modulus-driven closed-form bound
        beta = 0.75
        g = ProfileFunction.hoelder_power(beta=beta, amplitude=1.0,
                                          center=(0.013, -0.007))
        rho = 0.1
        E = ("disk", 0.05)
        val = d32_seminorm(g, (0.0, 0.0), rho=rho, E_spec=E, quad_n=14)
        K = 1.0 * (1 + beta) * 2 ** (1 - beta)
        dini_rho = K**2 * rho ** (2 * beta - 1) / (2 * beta - 1)
        bound = math.sqrt(2 * math.pi * math.pi * 0.05**2 * dini_rho)
        assert 0 < val <= bound

    def test_oscillatory_refinement_stable(self):
        g = ProfileFunction.oscillatory(alpha=2.0, eps=0.1)
        v1 = d32_seminorm(g, (0.0, 0.0), rho=0.05, quad_n=12)
        v2 = d32_seminorm(g, (0.0, 0.0), rho=0.05, quad_n=18)
        assert abs(v2 - v1) / v2 < 0.02


class TestMazyaCriterion:
    def test_flat_profile_all_zero(self):
        g = ProfileFunction.constant(0.0)
        reports = mazya_criterion(g, delta=0.1, rho_list=[0.2, 0.1])
        for r in reports:
            assert r.d32_term == 0.0
            assert r.grad_sup == 0.0
            assert r.total <= 0.1

    def test_oscillatory_components_decrease_with_rho(self):
        g = ProfileFunction.oscillatory(alpha=2.0, eps=0.2)
        reports = mazya_criterion(g, delta=0.1, rho_list=[0.2, 0.1, 0.05],
                                  quad_n=10)
        totals = [r.total for r in reports]
        assert totals[2] <= totals[1] <= totals[0] * 1.05

    def test_log_counterexample_flagged(self):
        g = ProfileFunction.log_counterexample()
        reports = mazya_criterion(g, delta=0.1, rho_list=[0.1], N=2,
                                  quad_n=10)
        r = reports[0]
        assert r.dini_divergent
        assert r.flagged or r.d32_term > 0  # refinement-instability signal
