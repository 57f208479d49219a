"""Metropolis-within-Gibbs state and sweeps of a single chain."""

import logging
import time
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np
from scipy.special import expit, logit

from schema.models import ModelSpec, ParameterLayout, SamplerConfig, Support, UpdateStrategy
from schema.results import ChainDraws
from services.likelihoods import LOG_2PI, RHO_LIMIT, deviance_trace, halfnormal_logpdf, normal_logpdf
from services.model_spec import Family, ModelData, effective_draws, effective_values, families

logger = logging.getLogger(__name__)

INITIAL_PROPOSAL_SCALE = 0.5


def adapt_step(current_scale, recent_acceptance, target: float, window_count: int = 1):
    """Robbins-Monro update of a random-walk proposal scale.

    ``scale * exp(kappa * (acceptance - target))`` with ``kappa = 1/sqrt(window_count)``.
    Works elementwise on arrays of per-component scales.
    """
    kappa = 1.0 / np.sqrt(max(window_count, 1))
    return current_scale * np.exp(kappa * (np.asarray(recent_acceptance) - target))


def _scale_loglik(n: np.ndarray, ss: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Sum over studies of log N(r; 0, sigma^2) given counts and sums of squares."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -n * (0.5 * LOG_2PI + np.log(sigma)) - ss / (2.0 * sigma**2)
    return np.where(sigma > 0, out, -np.inf)


class ChainSampler:
    """Chain-private parameter values, proposal scales and acceptance counters."""

    def __init__(
        self,
        spec: ModelSpec,
        data: ModelData,
        layout: ParameterLayout,
        config: SamplerConfig,
        chain_index: int,
        values: Mapping[str, np.ndarray],
        rng: np.random.Generator,
    ):
        self.spec = spec
        self.data = data
        self.layout = layout
        self.config = config
        self.chain_index = chain_index
        self.rng = rng
        self.values: Dict[str, np.ndarray] = {name: np.array(v, dtype=float) for name, v in values.items()}
        self.families = families(spec)
        self.priors = spec.priors
        self.created_at = time.time()
        self.sweeps = 0

        self._roles: Dict[str, Tuple[Optional[Family], str]] = {}
        for family in self.families:
            self._roles[family.key] = (family, "key")
            self._roles[family.common] = (family, "common")
            self._roles[family.independent] = (family, "independent")
            if family.hyper_mean is not None:
                self._roles[family.hyper_mean] = (family, "hyper_mean")
            self._roles[family.hyper_scale] = (family, "hyper_scale")

        self.random_walk_blocks = [b.name for b in layout.blocks if b.update is UpdateStrategy.RANDOM_WALK]
        self.scales = {name: np.full(layout.block(name).dim, INITIAL_PROPOSAL_SCALE) for name in self.random_walk_blocks}
        self._accepted = {name: np.zeros(layout.block(name).dim) for name in self.random_walk_blocks}
        self._proposed = 0
        self._window_accepted = {name: np.zeros(layout.block(name).dim) for name in self.random_walk_blocks}
        self._window_sweeps = 0
        self._windows = 0

        # indicators governing one location family are drawn with its independent component collapsed
        self._collapsed: Dict[str, Family] = {}
        for family in self.families:
            governed = [f for f in self.families if f.structure.is_mixture and f.indicator == family.indicator]
            if governed == [family] and not family.is_scale:
                self._collapsed[family.indicator] = family

        self._updates: Dict[str, Callable[[], None]] = {
            block.name: self._updater(block.name, block.update) for block in layout.blocks
        }

    # ------------------------------------------------------------------ helpers

    @property
    def n_indications(self) -> int:
        return self.data.n_indications

    def _effective(self, family: Family) -> np.ndarray:
        return effective_values(family, self.values, self.n_indications)

    def _family(self, key: str) -> Family:
        return next(family for family in self.families if family.key == key)

    def _weights(self, family: Family, role: str) -> np.ndarray:
        """Per-indication weight of the likelihood reaching a block."""
        if not family.structure.is_mixture:
            return np.ones(self.n_indications)
        c = self.values[family.indicator]
        return 1.0 - c if role == "independent" else c

    def _sum(self, values: np.ndarray) -> np.ndarray:
        return self.data.per_indication_sum(values)

    def _regression_residual(self) -> np.ndarray:
        ind = self.data.indication
        lambda0 = self._effective(self._family("lambda0"))[ind]
        lambda1 = self._effective(self._family("lambda1"))[ind]
        return self.values["delta2"] - lambda0 - lambda1 * self.values["delta1"]

    def location_statistics(self, family: Family) -> Tuple[np.ndarray, np.ndarray]:
        """Per-indication (A_j, B_j) with likelihood proportional to exp(-A theta^2/2 + B theta)."""
        data, v, ind = self.data, self.values, self.data.indication
        if family.key == "d":
            if "delta" in v:
                w = 1.0 / v["tau"][ind] ** 2
                return self._sum(w), self._sum(w * v["delta"])
            w = 1.0 / data.se**2
            return self._sum(w), self._sum(w * data.y)

        psi = self._effective(self._family("psi"))[ind]
        w = 1.0 / psi**2
        delta1, delta2 = v["delta1"], v["delta2"]
        if family.key == "lambda0":
            lambda1 = self._effective(self._family("lambda1"))[ind]
            return self._sum(w), self._sum(w * (delta2 - lambda1 * delta1))
        lambda0 = self._effective(self._family("lambda0"))[ind]
        return self._sum(w * delta1**2), self._sum(w * delta1 * (delta2 - lambda0))

    def _scale_statistics(self, family_key: str) -> Tuple[np.ndarray, np.ndarray]:
        """Per-indication study counts and residual sums of squares for tau or psi."""
        counts = self.data.counts.astype(float)
        if family_key == "tau":
            d = self._effective(self._family("d"))[self.data.indication]
            return counts, self._sum((self.values["delta"] - d) ** 2)
        return counts, self._sum(self._regression_residual() ** 2)

    # ------------------------------------------------------------------ conjugate normal blocks

    def full_conditional(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        """Mean and variance of a conjugate-normal block's full conditional."""
        data, v, ind = self.data, self.values, self.data.indication
        s2 = self.priors.effect_normal_sd**2

        if name == "delta":
            d = self._effective(self._family("d"))[ind]
            tau2 = v["tau"][ind] ** 2
            precision = 1.0 / data.se**2 + 1.0 / tau2
            return (data.y / data.se**2 + d / tau2) / precision, 1.0 / precision

        if name in ("delta1", "delta2"):
            return self._effect_conditional(name)

        family, role = self._roles[name]
        if role == "hyper_mean":
            var_between = v[family.hyper_scale][0] ** 2
            precision = 1.0 / s2 + self.n_indications / var_between
            mean = np.sum(v[family.key]) / var_between / precision
            return np.array([mean]), np.array([1.0 / precision])

        a, b = self.location_statistics(family)
        w = self._weights(family, role)
        if role == "common":
            precision = 1.0 / s2 + np.sum(w * a)
            return np.array([np.sum(w * b) / precision]), np.array([1.0 / precision])
        if role == "key" and family.structure.is_exchangeable:
            m, var_between = v[family.hyper_mean][0], v[family.hyper_scale][0] ** 2
            precision = 1.0 / var_between + w * a
            return (m / var_between + w * b) / precision, 1.0 / precision
        precision = 1.0 / s2 + w * a
        return w * b / precision, 1.0 / precision

    def _effect_conditional(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        data, v, ind = self.data, self.values, self.data.indication
        lambda0 = self._effective(self._family("lambda0"))[ind]
        lambda1 = self._effective(self._family("lambda1"))[ind]
        psi2 = self._effective(self._family("psi"))[ind] ** 2
        has_os = data.has_os
        rho = np.zeros(data.n_studies)
        rho[data.dual_index] = v["rho_w"]
        y2 = np.where(has_os, data.y2, 0.0)
        se2 = np.where(has_os, data.se2, 1.0)

        if name == "delta1":
            observed = data.y - np.where(has_os, rho * data.se / se2 * (y2 - v["delta2"]), 0.0)
            obs_var = data.se**2 * (1.0 - rho**2)
            precision = 1.0 / obs_var + 1.0 / self.priors.effect_normal_sd**2 + lambda1**2 / psi2
            mean = (observed / obs_var + lambda1 * (v["delta2"] - lambda0) / psi2) / precision
            return mean, 1.0 / precision

        observed = y2 - rho * se2 / data.se * (data.y - v["delta1"])
        obs_precision = np.where(has_os, 1.0 / (se2**2 * (1.0 - rho**2)), 0.0)
        regression_mean = lambda0 + lambda1 * v["delta1"]
        precision = obs_precision + 1.0 / psi2
        mean = (obs_precision * observed + regression_mean / psi2) / precision
        return mean, 1.0 / precision

    def _draw_normal(self, name: str) -> None:
        mean, var = self.full_conditional(name)
        self.values[name] = mean + np.sqrt(var) * self.rng.standard_normal(np.shape(mean))

    # ------------------------------------------------------------------ mixture blocks

    def _indication_loglik(self, effective: Mapping[str, np.ndarray]) -> np.ndarray:
        """Per-indication log density of the level that reads the indication parameters."""
        data, v, ind = self.data, self.values, self.data.indication
        if self.spec.endpoint_mode.is_bivariate:
            mean = effective["lambda0"][ind] + effective["lambda1"][ind] * v["delta1"]
            return self._sum(normal_logpdf(v["delta2"], mean, effective["psi"][ind] ** 2))
        if "delta" in v:
            return self._sum(normal_logpdf(v["delta"], effective["d"][ind], v["tau"][ind] ** 2))
        return self._sum(normal_logpdf(data.y, effective["d"][ind], data.se**2))

    def indicator_log_odds(self, name: str) -> np.ndarray:
        """log G1 - log G0 per indication for a mixture indicator block."""
        governed = [f for f in self.families if f.structure.is_mixture and f.indicator == name]
        joined = {f.key: self._effective(f) for f in self.families}
        apart = dict(joined)
        for family in governed:
            shared = self.values[family.shared]
            joined[family.key] = np.broadcast_to(shared, (self.n_indications,))
            apart[family.key] = self.values[family.independent]
        return self._indication_loglik(joined) - self._indication_loglik(apart)

    def collapsed_log_odds(self, family: Family) -> np.ndarray:
        """log G1 - log G0 per indication with the independent component integrated out.

        The indication-level density is ``exp(-A t^2/2 + B t)`` in the location
        ``t`` up to a factor free of ``t``, and the independent component has a
        N(0, s^2) prior, so the c = 0 marginal is Gaussian in closed form.
        """
        a, b = self.location_statistics(family)
        s2 = self.priors.effect_normal_sd**2
        shared = np.broadcast_to(self.values[family.shared], (self.n_indications,))
        precision = a + 1.0 / s2
        return -0.5 * a * shared**2 + b * shared + 0.5 * np.log1p(a * s2) - b**2 / (2.0 * precision)

    def _draw_indicator(self, name: str) -> None:
        probability = self.values[self._probability_for(name)]
        family = self._collapsed.get(name)
        log_odds = self.indicator_log_odds(name) if family is None else self.collapsed_log_odds(family)
        with np.errstate(divide="ignore", over="ignore"):
            p_join = expit(logit(probability) + log_odds)
        self.values[name] = (self.rng.uniform(size=self.n_indications) < p_join).astype(float)
        if family is not None:
            self._draw_normal(family.independent)

    def _probability_for(self, indicator: str) -> str:
        return next(f.probability for f in self.families if f.indicator == indicator)

    def _draw_probability(self, name: str) -> None:
        indicator = next(f.indicator for f in self.families if f.probability == name)
        a, b = self.priors.mixture_beta
        c = self.values[indicator]
        self.values[name] = self.rng.beta(a + c, b + 1.0 - c)

    # ------------------------------------------------------------------ random-walk blocks

    def _random_walk(self, name: str, target: Callable[[np.ndarray], np.ndarray], support: Support) -> None:
        current = self.values[name]
        step = self.scales[name] * self.rng.standard_normal(current.shape)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if support is Support.CORRELATION:
                u = np.arctanh(current)
                proposal = np.tanh(u + step)
                log_jacobian = np.log1p(-proposal**2) - np.log1p(-current**2)
            else:
                u = np.log(current)
                proposal = np.exp(u + step)
                log_jacobian = step
            log_ratio = target(proposal) - target(current) + log_jacobian
        accept = np.log(self.rng.uniform(size=current.shape)) < log_ratio
        self.values[name] = np.where(accept, proposal, current)
        self._accepted[name] += accept
        self._window_accepted[name] += accept

    def scale_target(self, name: str) -> Callable[[np.ndarray], np.ndarray]:
        """Per-component log full conditional of a positive random-walk block."""
        v = self.values
        tau_prior = self.priors.tau_halfnormal_scale**2
        psi_prior = self.priors.psi_halfnormal_scale**2

        if name == "tau":
            n, ss = self._scale_statistics("tau")
            return lambda x: _scale_loglik(n, ss, x) + halfnormal_logpdf(x, tau_prior)

        family, role = self._roles[name]
        if role == "hyper_scale":
            shared = v[family.key]
            if family.is_scale:
                shape, rate = self.priors.h_gamma_shape, self.priors.h_gamma_rate
                return lambda x: np.array(
                    [np.sum(halfnormal_logpdf(shared, x[0])) + (shape - 1.0) * np.log(x[0]) - rate * x[0]]
                )
            m = v[family.hyper_mean][0]
            prior_var = (self.priors.tau_halfnormal_scale if family.key == "d" else self.priors.xi_halfnormal_scale) ** 2
            return lambda x: np.array(
                [np.sum(normal_logpdf(shared, m, x[0] ** 2)) + halfnormal_logpdf(x[0], prior_var)]
            )

        n, ss = self._scale_statistics("psi")
        w = self._weights(family, role)
        if role == "common":
            return lambda x: np.array(
                [np.sum(w * _scale_loglik(n, ss, x[0])) + halfnormal_logpdf(x[0], psi_prior)]
            )
        if role == "key" and family.structure.is_exchangeable:
            h = v[family.hyper_scale][0]
            return lambda x: w * _scale_loglik(n, ss, x) + halfnormal_logpdf(x, h)
        return lambda x: w * _scale_loglik(n, ss, x) + halfnormal_logpdf(x, psi_prior)

    def rho_target(self) -> Callable[[np.ndarray], np.ndarray]:
        data, v = self.data, self.values
        dual = data.dual_index
        z1 = (data.y[dual] - v["delta1"][dual]) / data.se[dual]
        z2 = (data.y2[dual] - v["delta2"][dual]) / data.se2[dual]
        lower, upper = self.priors.rho_uniform_bounds

        def target(rho: np.ndarray) -> np.ndarray:
            one_minus = 1.0 - rho**2
            with np.errstate(divide="ignore", invalid="ignore"):
                out = -0.5 * np.log(one_minus) - (z1**2 - 2.0 * rho * z1 * z2 + z2**2) / (2.0 * one_minus)
            valid = (np.abs(rho) < RHO_LIMIT) & (rho >= lower) & (rho <= upper)
            return np.where(valid, out, -np.inf)

        return target

    # ------------------------------------------------------------------ sweep

    def _updater(self, name: str, update: UpdateStrategy) -> Callable[[], None]:
        if update is UpdateStrategy.CONJUGATE_NORMAL:
            return lambda: self._draw_normal(name)
        if update is UpdateStrategy.CONJUGATE_BERNOULLI:
            return lambda: self._draw_indicator(name)
        if update is UpdateStrategy.CONJUGATE_BETA:
            return lambda: self._draw_probability(name)
        if name == "rho_w":
            return lambda: self._random_walk(name, self.rho_target(), Support.CORRELATION)
        return lambda: self._random_walk(name, self.scale_target(name), Support.POSITIVE)

    def sweep(self) -> None:
        """Update every block once, in layout order."""
        for block in self.layout.blocks:
            self._updates[block.name]()
        self.sweeps += 1
        self._proposed += 1
        self._window_sweeps += 1

    def _adapt(self) -> None:
        self._windows += 1
        for name in self.random_walk_blocks:
            rate = self._window_accepted[name] / self._window_sweeps
            self.scales[name] = adapt_step(
                self.scales[name], rate, self.config.adapt_target_acceptance, self._windows
            )
            self._window_accepted[name][:] = 0
        self._window_sweeps = 0

    def _reset_acceptance(self) -> None:
        for name in self.random_walk_blocks:
            self._accepted[name][:] = 0
        self._proposed = 0

    def acceptance_rates(self) -> Dict[str, float]:
        if not self._proposed:
            return {name: float("nan") for name in self.random_walk_blocks}
        return {name: float(np.mean(self._accepted[name]) / self._proposed) for name in self.random_walk_blocks}

    def derived_draws(self, storage: Dict[str, np.ndarray]) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
        """Effective indication-level draws and the deviance trace of stored block draws."""
        effective = {
            family.effective: effective_draws(family, storage, self.n_indications) for family in self.families
        }
        deviance = deviance_trace(self.spec, self.data, {**storage, **effective})
        return effective, deviance

    def run(self) -> ChainDraws:
        """Burn in with adaptation, then record thinned draws."""
        config = self.config
        n_keep = config.n_retained
        storage = {block.name: np.empty((n_keep, block.dim)) for block in self.layout.blocks}
        names = self.layout.names

        logger.info(
            f"Chain {self.chain_index}: {config.burn_in} burn-in + {config.samples_per_chain} sweeps "
            f"(thin {config.thin}) over {len(self.layout.blocks)} blocks"
        )
        for _ in range(config.burn_in):
            self.sweep()
            if self._window_sweeps == config.adapt_window:
                self._adapt()
        if config.burn_in:
            scales = {name: np.round(scale, 4).tolist() for name, scale in self.scales.items()}
            logger.debug(f"Chain {self.chain_index}: adapted proposal scales {scales}")

        self._reset_acceptance()
        kept = 0
        for iteration in range(1, config.samples_per_chain + 1):
            self.sweep()
            if iteration % config.thin:
                continue
            for name in names:
                storage[name][kept] = self.values[name]
            kept += 1

        effective, deviance = self.derived_draws(storage)
        storage.update(effective)

        acceptance = self.acceptance_rates()
        logger.info(
            f"Chain {self.chain_index} finished in {time.time() - self.created_at:.1f}s; "
            f"acceptance {({name: round(rate, 3) for name, rate in acceptance.items()})}"
        )
        return ChainDraws(
            chain_index=self.chain_index,
            values=storage,
            deviance=deviance,
            acceptance=acceptance,
            proposal_scales={name: scale.tolist() for name, scale in self.scales.items()},
        )
