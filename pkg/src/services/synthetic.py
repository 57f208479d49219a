"""Synthetic multi-indication evidence and independent posterior oracles.

The oracles are deliberately small: closed-form normal-normal conjugacy and
tensor-product Simpson quadrature over at most three free scalars, with study
effects, independent mixture components and mixture probabilities integrated
out analytically.
"""

import contextvars
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import timedelta
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import simpson

from config.config import settings
from schema.errors import InputError, ModelSpecError
from schema.models import EffectMode, EvidenceSet, ModelSpec, SamplerConfig, ScenarioSpec, SharingStructure, TrialRecord
from schema.results import PosteriorDraws, TruthRecord
from services.likelihoods import LOG_2PI, halfnormal_logpdf, normal_logpdf
from services.model_spec import ModelData, build_model_data
from services.sampler import run
from utils.file_utils import derive_seed

logger = logging.getLogger(__name__)

MAX_FREE_SCALARS = 3
BOUNDARY_MASS_LIMIT = 1e-6
BOUNDARY_FRACTION = 0.02
BOX_WIDTH = 8.0
MIN_REPLICATIONS = 50


def _scenario_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


# ---------------------------------------------------------------------------- generator


def generate(scenario: ScenarioSpec) -> Tuple[EvidenceSet, TruthRecord]:
    """Draw true effects per the scenario, then observed (PFS, OS) estimates."""
    rng = _scenario_rng(scenario.seed)
    labels = scenario.indication_labels
    n_ind = scenario.n_indications

    if scenario.effect_mode is EffectMode.COMMON:
        pfs_effects = np.full(n_ind, scenario.mean_effect)
    else:
        pfs_effects = rng.normal(scenario.mean_effect, scenario.tau_between, n_ind)
        if scenario.effect_mode is EffectMode.ONE_EXTREME:
            pfs_effects[-1] = scenario.mean_effect + scenario.extreme_offset

    lambda0 = np.array(scenario.per_indication("lambda0"), dtype=float)
    lambda1 = np.array(scenario.per_indication("lambda1"), dtype=float)
    psi = np.array(scenario.per_indication("psi"), dtype=float)
    os_effects = lambda0 + lambda1 * pfs_effects

    low, high = scenario.se_range
    rho = scenario.rho_within
    records: List[TrialRecord] = []
    study_pfs: Dict[str, float] = {}
    study_os: Dict[str, float] = {}
    report_date = scenario.start_date
    for j, label in enumerate(labels):
        for i in range(scenario.per_indication("trials_per_indication")[j]):
            study_id = f"{label}-S{i + 1}"
            delta1 = pfs_effects[j] + scenario.tau_within * rng.standard_normal()
            delta2 = lambda0[j] + lambda1[j] * delta1 + psi[j] * rng.standard_normal()
            se1, se2 = rng.uniform(low, high, 2)
            z1, z2 = rng.standard_normal(2)
            y1 = delta1 + se1 * z1
            y2 = delta2 + se2 * (rho * z1 + np.sqrt(1.0 - rho**2) * z2)
            os_missing = rng.uniform() < scenario.missing_os_fraction

            study_pfs[study_id] = float(delta1)
            study_os[study_id] = float(delta2)
            report_date = report_date + timedelta(days=30)
            records.append(
                TrialRecord(
                    study_id=study_id,
                    indication=label,
                    lhr_pfs=float(y1),
                    se_pfs=float(se1),
                    pfs_report_date=report_date,
                    lhr_os=None if os_missing else float(y2),
                    se_os=None if os_missing else float(se2),
                    os_report_date=None if os_missing else report_date + timedelta(days=365),
                )
            )

    truth = TruthRecord(
        indication_labels=list(labels),
        pfs_effects=pfs_effects.tolist(),
        os_effects=os_effects.tolist(),
        lambda0=lambda0.tolist(),
        lambda1=lambda1.tolist(),
        psi=psi.tolist(),
        study_pfs_effects=study_pfs,
        study_os_effects=study_os,
        seed=scenario.seed,
    )
    logger.info(
        f"Generated {len(records)} synthetic studies over {n_ind} indications "
        f"({scenario.effect_mode.value}, seed {scenario.seed})"
    )
    return EvidenceSet.from_records(records), truth


# ---------------------------------------------------------------------------- conjugate oracle


def conjugate_posterior(y: float, se: float, prior_mean: float, prior_sd: float) -> Tuple[float, float]:
    """Normal-normal posterior (mean, sd) of a location given one estimate."""
    if prior_sd == 0:
        return float(prior_mean), 0.0
    if not np.isfinite(se):
        return float(prior_mean), float(prior_sd)
    precision = 1.0 / se**2 + 1.0 / prior_sd**2
    mean = (y / se**2 + prior_mean / prior_sd**2) / precision
    return float(mean), float(np.sqrt(1.0 / precision))


# ---------------------------------------------------------------------------- quadrature oracle


def _marginal_block(y: np.ndarray, variances: Sequence, mean, between_var) -> np.ndarray:
    """log N(y; mean * 1, diag(variances) + between_var * 11^T), vectorised over grids."""
    s0 = sum(1.0 / v for v in variances)
    s1 = sum((yi - mean) / v for yi, v in zip(y, variances))
    s2 = sum((yi - mean) ** 2 / v for yi, v in zip(y, variances))
    factor = 1.0 + between_var * s0
    log_det = sum(np.log(v) for v in variances) + np.log(factor)
    quad = s2 - between_var * s1**2 / factor
    return -0.5 * (len(y) * LOG_2PI + log_det + quad)


@dataclass(frozen=True)
class GridPosterior:
    """Quadrature summary of a small model's posterior over its free scalars."""

    names: Tuple[str, ...]
    mean: Dict[str, float]
    sd: Dict[str, float]
    log_evidence: float
    join_probability: Dict[str, float]
    boundary_mass: Dict[str, float]
    nodes: int
    log_density: Callable[[Mapping[str, np.ndarray]], np.ndarray] = field(repr=False)


class _GridModel:
    """Unnormalised log posterior over the free scalars of a univariate model."""

    def __init__(self, spec: ModelSpec, data: ModelData):
        if spec.endpoint_mode.is_bivariate:
            raise ModelSpecError("quadrature oracle supports univariate models only")
        self.spec = spec
        self.sharing = spec.sharing
        self.priors = spec.priors
        self.common_effect = spec.common_effect_within_indication
        self.labels = list(data.labels)
        self.groups = [
            (data.y[data.indication == j], data.se[data.indication == j] ** 2) for j in range(data.n_indications)
        ]
        a, b = self.priors.mixture_beta
        self.log_join = float(np.log(a / (a + b)))
        self.log_apart = float(np.log(b / (a + b)))

        names: List[str] = []
        if self.sharing is SharingStructure.IP:
            names += [f"d[{label}]" for label in self.labels]
        elif self.sharing.has_common:
            names.append("theta")
        else:
            names += ["m_d", "tau_d"]
        if not self.common_effect:
            names += [f"tau[{label}]" for label in self.labels]
        if len(names) > MAX_FREE_SCALARS:
            raise ModelSpecError(
                f"quadrature oracle needs <= {MAX_FREE_SCALARS} free scalars, model has {len(names)}: {names}"
            )
        self.names = tuple(names)

    def is_scale(self, name: str) -> bool:
        return name.startswith("tau")

    def evaluate(self, point: Mapping[str, np.ndarray]) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        """Log density and per-indication posterior join probabilities at grid points."""
        s2 = self.priors.effect_normal_sd**2
        tau_prior = self.priors.tau_halfnormal_scale**2
        total = 0.0
        join: Dict[str, np.ndarray] = {}

        for label, (y, se2) in zip(self.labels, self.groups):
            tau2 = 0.0 if self.common_effect else point[f"tau[{label}]"] ** 2
            variances = [v + tau2 for v in se2]

            if self.sharing is SharingStructure.IP:
                d = point[f"d[{label}]"]
                total = total + _marginal_block(y, variances, d, 0.0) + normal_logpdf(d, 0.0, s2)
            elif self.sharing is SharingStructure.CP:
                total = total + _marginal_block(y, variances, point["theta"], 0.0)
            elif self.sharing is SharingStructure.RP:
                total = total + _marginal_block(y, variances, point["m_d"], point["tau_d"] ** 2)
            else:
                if self.sharing is SharingStructure.MCIP:
                    shared = _marginal_block(y, variances, point["theta"], 0.0)
                else:
                    shared = _marginal_block(y, variances, point["m_d"], point["tau_d"] ** 2)
                joined = self.log_join + shared
                apart = self.log_apart + _marginal_block(y, variances, 0.0, s2)
                both = np.logaddexp(joined, apart)
                join[label] = np.exp(joined - both)
                total = total + both

            if not self.common_effect:
                total = total + halfnormal_logpdf(point[f"tau[{label}]"], tau_prior)

        if self.sharing.has_common:
            total = total + normal_logpdf(point["theta"], 0.0, s2)
        if self.sharing.is_exchangeable:
            total = total + normal_logpdf(point["m_d"], 0.0, s2) + halfnormal_logpdf(point["tau_d"], tau_prior)
        return np.asarray(total, dtype=float), join

    def axis(self, name: str, nodes: int, bounds: Optional[Tuple[float, float]]) -> np.ndarray:
        if bounds is not None:
            return np.linspace(bounds[0], bounds[1], nodes)
        if self.is_scale(name):
            return np.linspace(0.0, BOX_WIDTH * self.priors.tau_halfnormal_scale, nodes)

        if name.startswith("d["):
            y, se2 = self.groups[self.labels.index(name[2:-1])]
        else:
            y = np.concatenate([g[0] for g in self.groups])
            se2 = np.concatenate([g[1] for g in self.groups])
        spread = float(np.sqrt(np.max(se2)))
        if not self.common_effect or self.sharing.is_exchangeable:
            spread += BOX_WIDTH * self.priors.tau_halfnormal_scale / 2.0
        dense = np.linspace(np.min(y) - BOX_WIDTH * spread, np.max(y) + BOX_WIDTH * spread, nodes)
        prior_sd = self.priors.effect_normal_sd
        wide = np.linspace(-BOX_WIDTH * prior_sd, BOX_WIDTH * prior_sd, nodes)
        wide = wide[(wide < dense[0]) | (wide > dense[-1])]
        return np.union1d(dense, wide)


def _simpson_nd(values: np.ndarray, axes: Sequence[np.ndarray]) -> float:
    result = values
    for x in reversed(axes):
        result = simpson(result, x=x, axis=-1)
    return float(result)


def grid_posterior(
    spec: ModelSpec,
    evidence,
    nodes: Optional[int] = None,
    bounds: Optional[Mapping[str, Tuple[float, float]]] = None,
) -> GridPosterior:
    """Posterior moments and normalising constant by tensor-product Simpson quadrature.

    Supports univariate models with at most three free scalars after study
    effects, independent mixture components and mixture probabilities are
    integrated out. The first axis is processed slab by slab.
    """
    nodes = nodes or settings.grid_nodes
    if nodes < 401:
        raise InputError("quadrature needs at least 401 nodes per axis")
    if nodes % 2 == 0:
        nodes += 1
    data = evidence if isinstance(evidence, ModelData) else build_model_data(spec, evidence)
    model = _GridModel(spec, data)
    bounds = dict(bounds or {})
    axes = [model.axis(name, nodes, bounds.get(name)) for name in model.names]
    outer, inner = axes[0], axes[1:]

    slab_log_max = np.empty(outer.size)
    slab_mass = np.empty(outer.size)
    inner_marginals = [np.empty((outer.size, x.size)) for x in inner]
    join_mass: Dict[str, np.ndarray] = {}
    mesh = np.meshgrid(*inner, indexing="ij") if inner else []

    for k, x0 in enumerate(outer):
        point = {model.names[0]: np.asarray(x0)}
        point.update({name: grid for name, grid in zip(model.names[1:], mesh)})
        log_f, join = model.evaluate(point)
        log_f = np.broadcast_to(log_f, tuple(x.size for x in inner))
        peak = float(np.max(log_f)) if log_f.size else float(log_f)
        slab_log_max[k] = peak
        if not np.isfinite(peak):
            slab_mass[k] = 0.0
            for marginal in inner_marginals:
                marginal[k] = 0.0
            for label in join:
                join_mass.setdefault(label, np.zeros(outer.size))[k] = 0.0
            continue
        weights = np.exp(log_f - peak)
        slab_mass[k] = _simpson_nd(weights, inner)
        for i, marginal in enumerate(inner_marginals):
            others = [x for n, x in enumerate(inner) if n != i]
            reduced = np.moveaxis(weights, i, -1)
            for x in reversed(others):
                reduced = simpson(reduced, x=x, axis=-2 if reduced.ndim > 1 else -1)
            marginal[k] = reduced
        for label, probability in join.items():
            joint = np.broadcast_to(probability, weights.shape) * weights
            join_mass.setdefault(label, np.zeros(outer.size))[k] = _simpson_nd(joint, inner)

    top = float(np.max(slab_log_max))
    if not np.isfinite(top):
        raise ModelSpecError("log density is -inf on the whole integration box")
    scale = np.exp(slab_log_max - top)
    scale[~np.isfinite(slab_log_max)] = 0.0
    total = float(simpson(slab_mass * scale, x=outer))
    log_evidence = top + float(np.log(total))

    marginals = {model.names[0]: slab_mass * scale / total}
    for name, marginal in zip(model.names[1:], inner_marginals):
        marginals[name] = simpson(marginal * scale[:, None], x=outer, axis=0) / total

    mean, sd, boundary = {}, {}, {}
    for name, x in zip(model.names, axes):
        density = marginals[name]
        mean[name] = float(simpson(x * density, x=x))
        sd[name] = float(np.sqrt(max(simpson((x - mean[name]) ** 2 * density, x=x), 0.0)))
        width = x[-1] - x[0]
        upper = x >= x[-1] - BOUNDARY_FRACTION * width
        mass = float(simpson(density[upper], x=x[upper]))
        if not model.is_scale(name):
            lower = x <= x[0] + BOUNDARY_FRACTION * width
            mass += float(simpson(density[lower], x=x[lower]))
        boundary[name] = mass
        if mass > BOUNDARY_MASS_LIMIT:
            raise ModelSpecError(f"integration box too small for '{name}': boundary mass {mass:.3g}")

    join_probability = {
        label: float(simpson(values * scale, x=outer) / total) for label, values in join_mass.items()
    }
    logger.info(f"Quadrature over {model.names} with {[x.size for x in axes]} nodes: log Z = {log_evidence:.6f}")
    return GridPosterior(
        names=model.names,
        mean=mean,
        sd=sd,
        log_evidence=log_evidence,
        join_probability=join_probability,
        boundary_mass=boundary,
        nodes=nodes,
        log_density=lambda point: model.evaluate(point)[0],
    )


# ---------------------------------------------------------------------------- calibration


def _estimands(spec: ModelSpec, posterior: PosteriorDraws, truth: TruthRecord) -> List[Dict]:
    if spec.endpoint_mode.is_bivariate:
        targets = {
            "lambda0_eff": dict(zip(truth.indication_labels, truth.lambda0)),
            "lambda1_eff": dict(zip(truth.indication_labels, truth.lambda1)),
        }
    else:
        targets = {"d_eff": truth.effects(spec.endpoint_mode.endpoint.value)}

    mixtures = [name for name in posterior.names if name == "c" or name.startswith("c_")]
    rows = []
    for name, truths in targets.items():
        draws = posterior.pooled(name)
        for j, label in enumerate(posterior.labels):
            lo, hi = np.quantile(draws[:, j], [0.025, 0.975], method="linear")
            mean = float(draws[:, j].mean())
            row = {
                "estimand": name,
                "label": label,
                "truth": truths[label],
                "mean": mean,
                "error": mean - truths[label],
                "covered": bool(lo <= truths[label] <= hi),
                "width": float(hi - lo),
                "mixture_probability": float("nan"),
            }
            if mixtures:
                row["mixture_probability"] = float(posterior.pooled(mixtures[0])[:, j].mean())
            rows.append(row)
    return rows


def _replicate(scenario: ScenarioSpec, spec: ModelSpec, config: SamplerConfig, replication: int) -> List[Dict]:
    seeded = scenario.model_copy(update={"seed": derive_seed(scenario.seed, "replication", replication)})
    evidence, truth = generate(seeded)
    fit_config = config.model_copy(update={"seed": derive_seed(config.seed, "replication", replication)})
    posterior = run(spec, evidence, fit_config, executor="thread")
    rows = _estimands(spec, posterior, truth)
    for row in rows:
        row["replication"] = replication
    return rows


def calibration_replications(
    scenario: ScenarioSpec,
    spec: ModelSpec,
    replications: int,
    config: SamplerConfig,
) -> pd.DataFrame:
    """One row per (replication, estimand, indication) with error, coverage and width."""
    if replications < 1:
        raise InputError("replications must be positive")
    workers = settings.replication_workers or min(replications, os.cpu_count() or 1)
    logger.info(f"Calibrating {spec.sharing.value} over {replications} replications on {workers} workers")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(contextvars.copy_context().run, _replicate, scenario, spec, config, r)
            for r in range(replications)
        ]
        rows = [row for future in futures for row in future.result()]
    return pd.DataFrame(rows)


def calibration_run(
    scenario: ScenarioSpec,
    spec: ModelSpec,
    replications: int,
    config: SamplerConfig,
) -> pd.DataFrame:
    """Bias, RMSE, 95% CrI coverage and mean width per estimand and indication."""
    if replications < MIN_REPLICATIONS:
        raise InputError(f"calibration needs at least {MIN_REPLICATIONS} replications, got {replications}")
    long = calibration_replications(scenario, spec, replications, config)
    grouped = long.groupby(["estimand", "label"], sort=False)
    table = grouped.agg(
        bias=("error", "mean"),
        rmse=("error", lambda e: float(np.sqrt(np.mean(np.square(e))))),
        coverage=("covered", "mean"),
        mean_width=("width", "mean"),
        mixture_probability=("mixture_probability", "median"),
        replications=("replication", "nunique"),
    ).reset_index()
    return table
