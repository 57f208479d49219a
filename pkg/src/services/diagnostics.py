"""Convergence diagnostics, posterior summaries and DIC-based model comparison."""

import logging
from typing import Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from schema.errors import InputError
from schema.models import EvidenceSet, SharingStructure, Support
from schema.results import ConvergenceReport, ConvergenceRow, FitStats, PosteriorDraws, SummaryRow
from services.likelihoods import study_residuals
from services.model_spec import ModelData, build_model_data, component_labels

logger = logging.getLogger(__name__)

RHAT_THRESHOLD = 1.05
ESS_THRESHOLD = 400.0
DIC_MARGIN = 3.0
DEFAULT_QUANTILES = (0.025, 0.5, 0.975)
DEFAULT_COMPLEXITY_ORDER = (
    SharingStructure.CP,
    SharingStructure.MCIP,
    SharingStructure.RP,
    SharingStructure.MRIP,
    SharingStructure.IP,
)


def _as_chains(chains) -> np.ndarray:
    array = np.asarray(chains, dtype=float)
    if array.ndim != 2:
        raise ValueError("chains must be a sequence of equal-length sequences")
    return array


def rhat(chains: Sequence[Sequence[float]]) -> float:
    """Gelman-Rubin potential scale reduction factor (classic, non-split)."""
    x = _as_chains(chains)
    m, n = x.shape
    if m < 2:
        raise ValueError("rhat needs at least 2 chains")
    if n < 4:
        raise ValueError("rhat needs chains of length >= 4")

    within = float(np.mean(np.var(x, axis=1, ddof=1)))
    between_over_n = float(np.var(np.mean(x, axis=1), ddof=1))
    if within == 0.0:
        return 1.0 if between_over_n == 0.0 else float("inf")
    pooled = (n - 1) / n * within + between_over_n
    return float(np.sqrt(pooled / within))


def split_rhat(chains: Sequence[Sequence[float]]) -> float:
    """R-hat after splitting every chain into halves (odd middle draw dropped)."""
    x = _as_chains(chains)
    half = x.shape[1] // 2
    return rhat(np.concatenate([x[:, :half], x[:, -half:]], axis=0))


def _autocorrelation(x: np.ndarray) -> np.ndarray:
    n = x.size
    centred = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    spectrum = np.fft.rfft(centred, size)
    acov = np.fft.irfft(spectrum * np.conj(spectrum), size)[:n] / n
    return acov / acov[0]


def ess(draws: Sequence[float]) -> float:
    """Effective sample size with Geyer's initial monotone positive sequence.

    Capped at the number of draws; a constant sequence has ESS ``n``.
    """
    x = np.asarray(draws, dtype=float).ravel()
    n = x.size
    if n < 8:
        raise ValueError("ess needs at least 8 draws")
    if np.ptp(x) == 0.0:
        logger.warning(f"Zero-variance sequence of {n} draws; ESS set to {n}")
        return float(n)

    rho = _autocorrelation(x)
    n_pairs = n // 2
    pairs = rho[: 2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    positive = np.flatnonzero(pairs <= 0.0)
    if positive.size:
        pairs = pairs[: positive[0]]
    pairs = np.minimum.accumulate(pairs)
    tau = -1.0 + 2.0 * float(np.sum(pairs))
    if tau <= 0.0:
        return float(n)
    return float(min(n / tau, n))


def dic(deviance_trace: Sequence[float], deviance_at_posterior_mean: float, n_obs: int = 0) -> FitStats:
    """Dbar, pD and DIC from a deviance trace and the plug-in deviance."""
    trace = np.asarray(deviance_trace, dtype=float)
    if trace.size == 0:
        raise ValueError("empty deviance trace")
    dbar = float(trace.mean())
    pd = dbar - float(deviance_at_posterior_mean)
    if pd < 0:
        logger.warning(f"Negative effective number of parameters (pD = {pd:.4g}); posterior may be pathological")
    return FitStats(dbar=dbar, pd=pd, dic=dbar + pd, mean_residual_deviance=dbar, n_obs=n_obs)


def select_model(
    dics: Mapping[SharingStructure, FitStats],
    complexity_order: Optional[Sequence[SharingStructure]] = None,
) -> SharingStructure:
    """Lowest DIC, unless others lie within 3 units: then the one with the lowest pD.

    Remaining ties go to the earliest structure in ``complexity_order``.
    """
    if not dics:
        raise ValueError("no fitted models to select from")
    order = list(complexity_order or DEFAULT_COMPLEXITY_ORDER)
    rank = {structure: order.index(structure) if structure in order else len(order) for structure in dics}

    best = min(fit.dic for fit in dics.values())
    candidates = [structure for structure, fit in dics.items() if fit.dic - best <= DIC_MARGIN]
    return min(candidates, key=lambda structure: (dics[structure].pd, rank[structure]))


def summarize_posterior(
    draws: Iterable[float],
    quantiles: Sequence[float] = DEFAULT_QUANTILES,
    quantity: str = "",
    label: str = "all",
    group: str = "",
) -> SummaryRow:
    """Mean, sd and type-7 quantiles of a draw sequence."""
    x = np.asarray(list(draws) if not isinstance(draws, np.ndarray) else draws, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("no draws to summarize")
    values = np.quantile(x, list(quantiles), method="linear")
    return SummaryRow(
        quantity=quantity,
        label=label,
        group=group,
        mean=float(x.mean()),
        sd=float(x.std(ddof=1)) if x.size > 1 else 0.0,
        quantiles={float(q): float(v) for q, v in zip(quantiles, values)},
    )


def monitored_names(posterior: PosteriorDraws) -> List[str]:
    """Blocks whose components enter the convergence report (indicators excluded)."""
    return [block.name for block in posterior.layout.blocks if block.support is not Support.BINARY]


def convergence_report(posterior: PosteriorDraws, split: bool = False) -> ConvergenceReport:
    """R-hat and multi-chain ESS of every monitored scalar and of the deviance."""
    n_chains = len(posterior.chains)
    use_split = split or n_chains < 2
    if use_split and not split:
        logger.info("Single chain: reporting split R-hat")
    statistic = split_rhat if use_split else rhat

    def row(quantity: str, label: str, matrix: np.ndarray) -> ConvergenceRow:
        value_rhat = statistic(matrix) if matrix.shape[1] >= (8 if use_split else 4) else float("nan")
        value_ess = float(sum(ess(chain) for chain in matrix)) if matrix.shape[1] >= 8 else float(matrix.size)
        flag = bool(value_rhat > RHAT_THRESHOLD or value_ess < ESS_THRESHOLD)
        return ConvergenceRow(quantity=quantity, label=label, rhat=value_rhat, ess=value_ess, flag=flag)

    rows = []
    for name in monitored_names(posterior):
        for index, label in enumerate(component_labels(posterior.layout, name)):
            rows.append(row(name, label, posterior.component(name, index)))
    rows.append(row("deviance", "all", np.stack([chain.deviance for chain in posterior.chains])))

    report = ConvergenceReport(rows=rows)
    if report.any_flagged:
        logger.warning(
            f"{len(report.flagged)} of {len(rows)} monitored quantities flagged "
            f"(R-hat > {RHAT_THRESHOLD} or ESS < {ESS_THRESHOLD:.0f})"
        )
    return report


def deviance_at_posterior_mean(posterior: PosteriorDraws, data: ModelData) -> float:
    """Residual deviance at the posterior mean of the likelihood's direct parents."""
    spec = posterior.spec
    means = {
        name: posterior.posterior_mean(name)
        for name in ("delta", "delta1", "delta2", "rho_w")
        if name in posterior
    }
    effective = None
    if not spec.endpoint_mode.is_bivariate and "delta" not in means:
        effective = {"d": posterior.posterior_mean("d_eff")}
    return float(np.sum(study_residuals(spec, data, means, effective)))


def fit_stats(posterior: PosteriorDraws, evidence: Union[EvidenceSet, ModelData]) -> FitStats:
    """DIC summary of a fit."""
    data = evidence if isinstance(evidence, ModelData) else build_model_data(posterior.spec, evidence)
    return dic(posterior.deviance, deviance_at_posterior_mean(posterior, data), n_obs=data.n_obs)


def require_draws(posterior: PosteriorDraws, *names: str) -> None:
    missing = [name for name in names if name not in posterior]
    if missing:
        raise InputError(f"fit has no draws for {', '.join(missing)}")
