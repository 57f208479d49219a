"""Indication-level and new-indication predictions, OS from PFS, and leave-one-out validation."""

import contextvars
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config.config import settings
from schema.errors import ModelSpecError, PredictionError
from schema.models import EndpointMode, EvidenceSet, ModelSpec, SamplerConfig, SharingStructure, TrialRecord
from schema.results import CrossValResult, CrossValRow, OsPrediction, PfsEstimate, PosteriorDraws, PredictionMode
from services.evidence import bivariate_view
from services.sampler import run
from utils.file_utils import derive_seed

logger = logging.getLogger(__name__)

Z_95 = 1.959963984540054
PREDICTION_STREAM = 7


def _prediction_rng(seed: int, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(derive_seed(seed, PREDICTION_STREAM, *keys))))


def _indication_index(posterior: PosteriorDraws, label: str) -> int:
    try:
        return posterior.labels.index(label)
    except ValueError:
        raise PredictionError(f"fit has no parameter draws for indication '{label}'") from None


def pfs_estimates(uni: PosteriorDraws) -> Dict[str, PfsEstimate]:
    """Normal approximation (posterior mean, sd) of each indication's PFS effect."""
    if uni.spec.endpoint_mode is not EndpointMode.UNIVARIATE_PFS:
        raise PredictionError("PFS estimates need a univariate PFS fit")
    draws = uni.pooled("d_eff")
    means, sds = draws.mean(axis=0), draws.std(axis=0, ddof=1)
    return {
        label: PfsEstimate(
            indication=label,
            mean=float(means[j]),
            sd=float(max(sds[j], np.finfo(float).tiny)),
            source_sharing=uni.spec.sharing,
        )
        for j, label in enumerate(uni.labels)
    }


def predict_os(
    biv: PosteriorDraws,
    pfs: PfsEstimate,
    include_psi: bool = False,
    mode: PredictionMode = PredictionMode.MATCHED,
    seed: Optional[int] = None,
) -> OsPrediction:
    """OS effect draws ``lambda0 + lambda1 * d_PFS`` with d_PFS ~ N(pfs.mean, pfs.sd^2).

    With ``include_psi`` each draw also gets N(0, psi^2) noise.
    """
    needed = ["lambda0_eff", "lambda1_eff"] + (["psi_eff"] if include_psi else [])
    missing = [name for name in needed if name not in biv]
    if missing:
        raise PredictionError(f"fit has no draws for {', '.join(missing)}")
    j = _indication_index(biv, pfs.indication)
    # fresh stream per call: draws depend only on this indication's inputs
    rng = _prediction_rng(biv.seed if seed is None else seed, "os")

    lambda0 = biv.pooled("lambda0_eff")[:, j]
    lambda1 = biv.pooled("lambda1_eff")[:, j]
    d_pfs = rng.normal(pfs.mean, pfs.sd, size=lambda0.size)
    d_os = lambda0 + lambda1 * d_pfs
    if include_psi:
        d_os = d_os + rng.normal(0.0, 1.0, size=lambda0.size) * biv.pooled("psi_eff")[:, j]
    return OsPrediction(
        indication=pfs.indication,
        draws=d_os,
        mode=mode,
        includes_conditional_variance=include_psi,
        sharing=biv.spec.sharing,
        pfs=pfs,
    )


def surrogacy_spec(base: ModelSpec, sharing: SharingStructure) -> ModelSpec:
    return base.model_copy(
        update={"endpoint_mode": EndpointMode.BIVARIATE, "sharing": sharing, "common_effect_within_indication": False}
    )


def _pfs_spec(base: ModelSpec, sharing: SharingStructure) -> ModelSpec:
    return ModelSpec(
        endpoint_mode=EndpointMode.UNIVARIATE_PFS,
        sharing=sharing,
        priors=base.priors,
        p_new=base.p_new,
    )


def os_predictions(
    spec: ModelSpec,
    evidence: EvidenceSet,
    config: SamplerConfig,
    mode: PredictionMode = PredictionMode.MATCHED,
    include_psi: bool = False,
) -> Tuple[Dict[str, OsPrediction], PosteriorDraws, PosteriorDraws]:
    """Fit the PFS and surrogacy models and predict OS for every indication.

    In ``Matched`` mode the PFS model uses the same sharing as the surrogacy
    model; in ``IP-PFS`` mode it is the independent-parameters model.
    """
    surrogacy = surrogacy_spec(spec, spec.sharing)
    pfs_sharing = spec.sharing if mode is PredictionMode.MATCHED else SharingStructure.IP
    logger.info(
        f"OS prediction ({mode.value}): PFS model {pfs_sharing.value}, surrogacy model {spec.sharing.value}, "
        f"include_psi={include_psi}"
    )
    uni = run(_pfs_spec(spec, pfs_sharing), bivariate_view(evidence), config)
    biv = run(surrogacy, evidence, config)
    estimates = pfs_estimates(uni)
    predictions = {
        label: predict_os(biv, estimates[label], include_psi=include_psi, mode=mode)
        for label in biv.labels
    }
    return predictions, uni, biv


def matched_pipeline(
    spec_sharing: SharingStructure,
    evidence: EvidenceSet,
    config: SamplerConfig,
    include_psi: bool = False,
    base: Optional[ModelSpec] = None,
) -> Dict[str, OsPrediction]:
    """OS predictions with the same sharing structure for PFS and surrogacy."""
    base = (base or ModelSpec()).model_copy(update={"sharing": spec_sharing})
    return os_predictions(base, evidence, config, PredictionMode.MATCHED, include_psi)[0]


def ip_pfs_pipeline(
    spec_sharing: SharingStructure,
    evidence: EvidenceSet,
    config: SamplerConfig,
    include_psi: bool = False,
    base: Optional[ModelSpec] = None,
) -> Dict[str, OsPrediction]:
    """OS predictions with IP PFS estimates entered into ``spec_sharing``'s surrogacy model."""
    base = (base or ModelSpec()).model_copy(update={"sharing": spec_sharing})
    return os_predictions(base, evidence, config, PredictionMode.IP_PFS, include_psi)[0]


def predict_new_indication(uni: PosteriorDraws, p_new: Optional[float] = None, seed: Optional[int] = None) -> np.ndarray:
    """Predictive draws of the effect in an indication not yet observed.

    CP returns the common effect's draws. MCIP and RP/MRIP draw from the
    sharing component with probability ``p_new`` and from the vague prior otherwise.
    """
    spec = uni.spec
    if spec.endpoint_mode.is_bivariate:
        raise PredictionError("new-indication prediction needs a univariate fit")
    sharing = spec.sharing
    if sharing is SharingStructure.IP:
        raise PredictionError("no cross-indication estimand under IP")
    if sharing is SharingStructure.CP:
        return uni.pooled("theta")[:, 0].copy()

    p_new = spec.p_new if p_new is None else p_new
    if not 0.0 <= p_new <= 1.0:
        raise PredictionError(f"p_new must lie in [0, 1], got {p_new}")
    rng = _prediction_rng(uni.seed if seed is None else seed, "new_indication")
    if sharing is SharingStructure.MCIP:
        shared = uni.pooled("theta")[:, 0]
    else:
        m_d, tau_d = uni.pooled("m_d")[:, 0], uni.pooled("tau_d")[:, 0]
        shared = m_d + tau_d * rng.standard_normal(m_d.size)
    joins = rng.uniform(size=shared.size) < p_new
    vague = rng.normal(0.0, spec.priors.effect_normal_sd, size=shared.size)
    return np.where(joins, shared, vague)


def _mask_os(evidence: EvidenceSet, study_id: str) -> EvidenceSet:
    records: List[TrialRecord] = [
        record.model_copy(update={"lhr_os": None, "se_os": None, "os_report_date": None})
        if record.study_id == study_id
        else record
        for record in evidence.records
    ]
    return EvidenceSet.from_records(records)


def _masked_prediction(spec: ModelSpec, evidence: EvidenceSet, config: SamplerConfig, record: TrialRecord) -> CrossValRow:
    masked_config = config.model_copy(update={"seed": derive_seed(config.seed, "crossval", record.study_id)})
    posterior = run(spec, _mask_os(evidence, record.study_id), masked_config, executor="thread")
    index = posterior.layout.study_ids.index(record.study_id)
    draws = posterior.pooled("delta2")[:, index]

    mean = float(draws.mean())
    var = float(draws.var(ddof=1))
    sd = float(np.sqrt(var + record.se_os**2))
    lo, hi = mean - Z_95 * sd, mean + Z_95 * sd
    return CrossValRow(
        study_id=record.study_id,
        indication=record.indication,
        predicted_mean=mean,
        predicted_sd=float(np.sqrt(var)),
        lo95=lo,
        hi95=hi,
        observed=record.lhr_os,
        se_os=record.se_os,
        residual=(record.lhr_os - mean) / sd,
        inside=bool(lo <= record.lhr_os <= hi),
    )


def loo_crossval(
    spec: ModelSpec,
    evidence: EvidenceSet,
    config: SamplerConfig,
    indications: Optional[Sequence[str]] = None,
) -> CrossValResult:
    """Mask each dual-endpoint study's OS in turn, refit, and score the prediction.

    Indications with fewer than two dual-endpoint studies are skipped.
    """
    if not spec.endpoint_mode.is_bivariate:
        raise ModelSpecError("cross-validation needs the bivariate surrogacy model")
    view = bivariate_view(evidence)
    targets: List[TrialRecord] = []
    skipped: List[str] = []
    for label in view.labels:
        if indications is not None and label not in indications:
            continue
        dual = [record for record in view.records_for(label) if record.has_both]
        if len(dual) < 2:
            logger.warning(f"Skipping indication {label}: {len(dual)} dual-endpoint studies (need >= 2)")
            skipped.append(label)
            continue
        targets.extend(dual)

    workers = settings.replication_workers or min(len(targets), os.cpu_count() or 1) or 1
    logger.info(f"Cross-validating {len(targets)} masked studies on {workers} workers")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(contextvars.copy_context().run, _masked_prediction, spec, view, config, record)
            for record in targets
        ]
        rows = [future.result() for future in futures]

    result = CrossValResult(rows=rows, skipped=skipped)
    if rows:
        logger.info(f"Cross-validation coverage {result.coverage:.3f} over {len(rows)} studies")
    return result
