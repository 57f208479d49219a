"""Within-study likelihoods, hierarchical densities, joint log posterior and residual deviance."""

import logging
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np
from scipy import stats

from schema.models import EvidenceSet, ModelSpec
from schema.results import DensityTermReport
from services.model_spec import (
    ModelData,
    build_model_data,
    check_values,
    effective_values,
    families,
    layout_for_data,
    log_prior,
)

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_2 = float(np.log(2.0))
RHO_LIMIT = 1.0 - 1e-12
VARIANCE_FLOOR = 1e-300

Evidence = Union[EvidenceSet, ModelData]


def normal_logpdf(x, mean, var) -> np.ndarray:
    """Elementwise log N(x; mean, var); variances below the floor give -inf."""
    x, mean, var = np.broadcast_arrays(np.asarray(x, float), np.asarray(mean, float), np.asarray(var, float))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)
    return np.where(var < VARIANCE_FLOOR, -np.inf, out)


def halfnormal_logpdf(x, var) -> np.ndarray:
    """Elementwise log density of |N(0, var)|."""
    x = np.asarray(x, float)
    return np.where(x < 0, -np.inf, LOG_2 + normal_logpdf(x, 0.0, var))


def loglik_univariate(y: float, se: float, delta: float) -> float:
    """Log N(y; delta, se^2)."""
    if se <= 0:
        raise ValueError("standard error must be positive")
    return float(stats.norm.logpdf(y, loc=delta, scale=se))


def loglik_bivariate(
    y1: float,
    y2: Optional[float],
    se1: float,
    se2: Optional[float],
    rho: float,
    delta1: float,
    delta2: float,
) -> float:
    """Bivariate normal log likelihood of a (PFS, OS) pair.

    With OS absent the marginal density of the PFS estimate is returned and
    ``rho`` is not used.
    """
    if (y2 is None) != (se2 is None):
        raise ValueError("OS estimate and its standard error must be given together")
    if y2 is None:
        return loglik_univariate(y1, se1, delta1)
    if abs(rho) >= RHO_LIMIT:
        raise ValueError(f"within-study correlation must satisfy |rho| < 1, got {rho}")
    covariance = [[se1**2, se1 * se2 * rho], [se1 * se2 * rho, se2**2]]
    return float(stats.multivariate_normal.logpdf([y1, y2], mean=[delta1, delta2], cov=covariance))


def _as_data(spec: ModelSpec, evidence: Evidence) -> ModelData:
    if isinstance(evidence, ModelData):
        return evidence
    return build_model_data(spec, evidence)


def effective_parameters(spec: ModelSpec, data: ModelData, values: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Indication-level parameters entering the likelihood, keyed by family."""
    return {
        family.key: effective_values(family, values, data.n_indications) for family in families(spec)
    }


def rho_per_study(data: ModelData, values: Mapping[str, np.ndarray]) -> np.ndarray:
    """Within-study correlation per study; zero where OS is not reported."""
    rho = np.zeros(data.n_studies)
    if "rho_w" in values:
        rho[data.dual_index] = values["rho_w"]
    return rho


def study_means(
    spec: ModelSpec,
    data: ModelData,
    values: Mapping[str, np.ndarray],
    effective: Optional[Mapping[str, np.ndarray]] = None,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Means of the within-study likelihood (the deviance focus)."""
    if spec.endpoint_mode.is_bivariate:
        return values["delta1"], values["delta2"]
    if "delta" in values:
        return values["delta"], None
    effective = effective or effective_parameters(spec, data, values)
    return effective["d"][data.indication], None


def _bivariate_pieces(data: ModelData, mean1, mean2, rho) -> Tuple[np.ndarray, np.ndarray]:
    """Per-study log likelihood and Mahalanobis residual of the surrogacy model."""
    z1 = (data.y - mean1) / data.se
    loglik = -0.5 * (LOG_2PI + z1**2) - np.log(data.se)
    residual = z1**2

    dual = data.dual_index
    if dual.size:
        r = rho[..., dual]
        one_minus = 1.0 - r**2
        z1d = z1[..., dual]
        z2d = (data.y2[dual] - mean2[..., dual]) / data.se2[dual]
        with np.errstate(divide="ignore", invalid="ignore"):
            quad = (z1d**2 - 2.0 * r * z1d * z2d + z2d**2) / one_minus
            dual_loglik = (
                -LOG_2PI
                - np.log(data.se[dual])
                - np.log(data.se2[dual])
                - 0.5 * np.log(one_minus)
                - 0.5 * quad
            )
        invalid = np.abs(r) >= RHO_LIMIT
        loglik[..., dual] = np.where(invalid, -np.inf, dual_loglik)
        residual[..., dual] = np.where(invalid, np.inf, quad)
    return loglik, residual


def study_loglik(
    spec: ModelSpec,
    data: ModelData,
    values: Mapping[str, np.ndarray],
    effective: Optional[Mapping[str, np.ndarray]] = None,
) -> np.ndarray:
    """Per-study within-study log likelihood contributions."""
    mean1, mean2 = study_means(spec, data, values, effective)
    if spec.endpoint_mode.is_bivariate:
        return _bivariate_pieces(data, mean1, mean2, rho_per_study(data, values))[0]
    return normal_logpdf(data.y, mean1, data.se**2)


def study_residuals(
    spec: ModelSpec,
    data: ModelData,
    values: Mapping[str, np.ndarray],
    effective: Optional[Mapping[str, np.ndarray]] = None,
) -> np.ndarray:
    """Per-study residual deviance against the saturated model."""
    mean1, mean2 = study_means(spec, data, values, effective)
    if spec.endpoint_mode.is_bivariate:
        return _bivariate_pieces(data, mean1, mean2, rho_per_study(data, values))[1]
    return ((data.y - mean1) / data.se) ** 2


def deviance_trace(spec: ModelSpec, data: ModelData, draws: Mapping[str, np.ndarray]) -> np.ndarray:
    """Residual deviance of every stored draw.

    ``draws[name]`` has shape ``(n_draws, dim)`` and must hold ``d_eff`` when
    the model has no study-level effects.
    """
    if spec.endpoint_mode.is_bivariate:
        mean1, mean2 = draws["delta1"], draws["delta2"]
        rho = np.zeros_like(mean1)
        if "rho_w" in draws:
            rho[:, data.dual_index] = draws["rho_w"]
        return np.sum(_bivariate_pieces(data, mean1, mean2, rho)[1], axis=1)
    mean = draws["delta"] if "delta" in draws else draws["d_eff"][:, data.indication]
    return np.sum(((data.y - mean) / data.se) ** 2, axis=1)


def hierarchical_terms(
    spec: ModelSpec,
    data: ModelData,
    values: Mapping[str, np.ndarray],
    effective: Optional[Mapping[str, np.ndarray]] = None,
) -> Dict[str, float]:
    """Log densities of the between-study, between-indication and mixture levels."""
    effective = effective or effective_parameters(spec, data, values)
    ind = data.indication
    terms = {"study": 0.0, "indication": 0.0, "mixture": 0.0}

    if spec.endpoint_mode.is_bivariate:
        mean = effective["lambda0"][ind] + effective["lambda1"][ind] * values["delta1"]
        terms["study"] = float(np.sum(normal_logpdf(values["delta2"], mean, effective["psi"][ind] ** 2)))
    elif "delta" in values:
        terms["study"] = float(
            np.sum(normal_logpdf(values["delta"], effective["d"][ind], values["tau"][ind] ** 2))
        )

    seen = set()
    for family in families(spec):
        if family.structure.is_exchangeable:
            shared = values[family.key]
            if family.is_scale:
                terms["indication"] += float(np.sum(halfnormal_logpdf(shared, values[family.hyper_scale][0])))
            else:
                terms["indication"] += float(
                    np.sum(
                        normal_logpdf(
                            shared,
                            values[family.hyper_mean][0],
                            values[family.hyper_scale][0] ** 2,
                        )
                    )
                )
        if family.structure.is_mixture and family.indicator not in seen:
            seen.add(family.indicator)
            c, p = values[family.indicator], values[family.probability]
            with np.errstate(divide="ignore"):
                terms["mixture"] += float(np.sum(np.where(c == 1, np.log(p), np.log1p(-p))))
    return terms


def density_terms(spec: ModelSpec, evidence: Evidence, values: Mapping[str, np.ndarray]) -> DensityTermReport:
    """Joint log posterior together with its additive parts."""
    data = _as_data(spec, evidence)
    layout = layout_for_data(spec, data)
    check_values(layout, values)
    prior = log_prior(layout, values, spec)
    if not np.isfinite(prior):
        return DensityTermReport(
            study_loglik=[float("nan")] * data.n_studies,
            hierarchical={},
            log_prior=prior,
            total=-np.inf,
        )

    effective = effective_parameters(spec, data, values)
    loglik = study_loglik(spec, data, values, effective)
    hierarchy = hierarchical_terms(spec, data, values, effective)
    total = float(np.sum(loglik)) + sum(hierarchy.values()) + prior
    if np.isnan(total):
        total = -np.inf
    return DensityTermReport(
        study_loglik=[float(v) for v in loglik],
        hierarchical=hierarchy,
        log_prior=prior,
        total=total,
    )


def log_joint(spec: ModelSpec, evidence: Evidence, values: Mapping[str, np.ndarray]) -> float:
    """Unnormalised joint log posterior; -inf outside the support."""
    return density_terms(spec, evidence, values).total


def residual_deviance(spec: ModelSpec, evidence: Evidence, values: Mapping[str, np.ndarray]) -> float:
    """Saturated-model residual deviance of the within-study likelihood."""
    data = _as_data(spec, evidence)
    check_values(layout_for_data(spec, data), values)
    return float(np.sum(study_residuals(spec, data, values)))
