"""Unit tests for within-study likelihoods, the joint density and the residual deviance."""

import math

import numpy as np
import pytest
from scipy import stats

from schema.models import EndpointMode, ModelSpec, SharingStructure
from services.likelihoods import (
    density_terms,
    log_joint,
    loglik_bivariate,
    loglik_univariate,
    residual_deviance,
)
from tests.fixtures.evidence import conjugate_toy, evidence, record, two_by_two


class TestWithinStudy:
    def test_standard_normal_at_mode(self):
        assert loglik_univariate(0.0, 1.0, 0.0) == pytest.approx(-0.9189, abs=1e-4)

    def test_direct_evaluation(self):
        assert loglik_univariate(0.5, 0.5, 0.0) == pytest.approx(-0.7258, abs=1e-4)

    @pytest.mark.parametrize("shift", [-3.0, 0.7, 12.5])
    def test_location_invariance(self, shift):
        assert loglik_univariate(0.2 + shift, 0.3, -0.1 + shift) == pytest.approx(loglik_univariate(0.2, 0.3, -0.1))

    def test_non_positive_se(self):
        with pytest.raises(ValueError):
            loglik_univariate(0.0, 0.0, 0.0)

    def test_bivariate_at_origin(self):
        assert loglik_bivariate(0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0) == pytest.approx(-math.log(2 * math.pi), abs=1e-4)

    def test_bivariate_factorises_without_correlation(self):
        joint = loglik_bivariate(-0.4, -0.3, 0.1, 0.15, 0.0, -0.35, -0.2)
        separate = loglik_univariate(-0.4, 0.1, -0.35) + loglik_univariate(-0.3, 0.15, -0.2)
        assert joint == pytest.approx(separate)

    def test_bivariate_rejects_degenerate_correlation(self):
        with pytest.raises(ValueError, match="rho"):
            loglik_bivariate(0.1, 0.1, 1.0, 1.0, 1.0 - 1e-13, 0.0, 0.0)
        with pytest.raises(ValueError):
            loglik_bivariate(0.1, 0.1, 1.0, 1.0, -1.0, 0.0, 0.0)

    def test_bivariate_missing_os_is_marginal(self):
        assert loglik_bivariate(-0.4, None, 0.1, None, 0.9, -0.3, 5.0) == pytest.approx(
            loglik_univariate(-0.4, 0.1, -0.3)
        )


class TestJointDensity:
    def test_single_study_ip_assembly(self):
        spec = ModelSpec(endpoint_mode=EndpointMode.UNIVARIATE_OS, sharing=SharingStructure.IP)
        values = {"delta": np.array([-0.3]), "tau": np.array([0.5]), "d": np.array([-0.3])}
        expected = (
            stats.norm.logpdf(-0.3, -0.3, 0.1)
            + stats.norm.logpdf(-0.3, -0.3, 0.5)
            + stats.norm.logpdf(-0.3, 0.0, 10.0)
            + stats.halfnorm.logpdf(0.5, scale=0.5)
        )
        assert log_joint(spec, conjugate_toy(), values) == pytest.approx(expected, rel=1e-12)

    def test_terms_add_up(self):
        spec = ModelSpec(endpoint_mode=EndpointMode.UNIVARIATE_OS, sharing=SharingStructure.RP)
        values = {
            "delta": np.array([-0.3, -0.2, -0.1, -0.2]),
            "tau": np.array([0.2, 0.3]),
            "d": np.array([-0.25, -0.15]),
            "m_d": np.array([-0.2]),
            "tau_d": np.array([0.1]),
        }
        report = density_terms(spec, two_by_two(), values)
        assert report.total == pytest.approx(sum(report.study_loglik) + sum(report.hierarchical.values()) + report.log_prior)
        assert report.hierarchical["indication"] == pytest.approx(np.sum(stats.norm.logpdf([-0.25, -0.15], -0.2, 0.1)))

    def test_out_of_support_is_minus_infinity(self):
        spec = ModelSpec(endpoint_mode=EndpointMode.UNIVARIATE_OS)
        values = {"delta": np.array([-0.3]), "tau": np.array([-0.5]), "d": np.array([-0.3])}
        assert log_joint(spec, conjugate_toy(), values) == -np.inf

    def test_mcip_joined_indication_ignores_independent_component(self):
        spec = ModelSpec(endpoint_mode=EndpointMode.UNIVARIATE_OS, sharing=SharingStructure.MCIP)
        values = {
            "delta": np.array([-0.3, -0.2, -0.1, -0.2]),
            "tau": np.array([0.2, 0.3]),
            "theta": np.array([-0.2]),
            "d_ind": np.array([0.0, 0.0]),
            "c": np.array([1.0, 1.0]),
            "p": np.array([0.6, 0.4]),
        }
        moved = {**values, "d_ind": np.array([1.5, -2.0])}
        own_prior = np.sum(stats.norm.logpdf([1.5, -2.0], 0, 10)) - np.sum(stats.norm.logpdf([0.0, 0.0], 0, 10))

        difference = log_joint(spec, two_by_two(), moved) - log_joint(spec, two_by_two(), values)
        assert difference == pytest.approx(own_prior, abs=1e-10)

    def test_bivariate_joint_is_finite_with_missing_os(self):
        data = evidence(record("S1", "CRC", -0.4, 0.1, -0.3, 0.15), record("S2", "CRC", -0.2, 0.1))
        spec = ModelSpec(endpoint_mode=EndpointMode.BIVARIATE)
        values = {
            "delta1": np.array([-0.4, -0.2]),
            "delta2": np.array([-0.3, 7.0]),
            "rho_w": np.array([0.3]),
            "lambda0": np.array([0.0]),
            "lambda1": np.array([0.8]),
            "psi": np.array([0.2]),
        }
        assert np.isfinite(log_joint(spec, data, values))


class TestResidualDeviance:
    def test_saturated_fit_is_zero(self):
        spec = ModelSpec(endpoint_mode=EndpointMode.UNIVARIATE_OS)
        values = {"delta": np.array([-0.3]), "tau": np.array([0.5]), "d": np.array([0.0])}
        assert residual_deviance(spec, conjugate_toy(), values) == 0.0

    def test_single_study(self):
        data = evidence(record("S1", "CRC", lhr_os=0.3, se_os=0.1))
        spec = ModelSpec(endpoint_mode=EndpointMode.UNIVARIATE_OS)
        values = {"delta": np.array([0.0]), "tau": np.array([0.5]), "d": np.array([0.0])}
        assert residual_deviance(spec, data, values) == pytest.approx(9.0)

    def test_bivariate_without_correlation_is_sum_of_univariate_terms(self):
        data = evidence(record("S1", "CRC", -0.4, 0.1, -0.3, 0.15))
        spec = ModelSpec(endpoint_mode=EndpointMode.BIVARIATE)
        values = {
            "delta1": np.array([-0.2]),
            "delta2": np.array([0.0]),
            "rho_w": np.array([0.0]),
            "lambda0": np.array([0.0]),
            "lambda1": np.array([1.0]),
            "psi": np.array([0.1]),
        }
        expected = (0.2 / 0.1) ** 2 + (0.3 / 0.15) ** 2
        assert residual_deviance(spec, data, values) == pytest.approx(expected)
