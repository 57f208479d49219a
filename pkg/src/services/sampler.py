"""Multi-chain Metropolis-within-Gibbs fitting."""

import contextvars
import logging
import multiprocessing
import time
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from typing import Dict, Optional, Union

import numpy as np
from pydantic import ValidationError

from config.config import settings
from config.logger_config import run_id_ctx_var, setup_logger
from schema.errors import InputError, SamplerError
from schema.models import EvidenceSet, ModelSpec, ParameterLayout, SamplerConfig, Support, UpdateStrategy
from schema.results import ChainDraws, PosteriorDraws
from services.chain import ChainSampler, adapt_step
from services.likelihoods import density_terms
from services.model_spec import ModelData, build_model_data, in_support, layout_for_data, require_dual_studies

logger = logging.getLogger(__name__)

MAX_INIT_ATTEMPTS = 100
SAMPLING_STREAM = 0

__all__ = ["adapt_step", "chain_rng", "initial_values", "run", "sampler_config"]


def chain_rng(seed: int, chain_index: int, stream: int = SAMPLING_STREAM) -> np.random.Generator:
    """Counter-based generator of one chain, independent of the number of chains."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(seed, spawn_key=(chain_index, stream)))
    )


def sampler_config(**fields) -> SamplerConfig:
    """Build a SamplerConfig, reporting invalid fields as input errors."""
    try:
        return SamplerConfig(**fields)
    except ValidationError as e:
        raise InputError(f"invalid sampler configuration: {e.errors()[0]['msg']}") from None


def initial_values(
    layout: ParameterLayout,
    data: ModelData,
    chain_index: int,
    seed: int,
    attempt: int = 0,
) -> Dict[str, np.ndarray]:
    """Over-dispersed starting values of one chain.

    Study effects start at the observed estimates (0 where OS is missing),
    location blocks at N(0, 1) scaled by ``1 + chain_index``, scale blocks at
    ``|N(0, 0.5^2)| + 0.1``, indicators at 1, probabilities at 0.5 and
    correlations at 0.
    """
    rng = chain_rng(seed, chain_index, stream=1 + attempt)
    values: Dict[str, np.ndarray] = {}
    for block in layout.blocks:
        if block.name in ("delta", "delta1"):
            values[block.name] = data.y.copy()
        elif block.name == "delta2":
            values[block.name] = np.where(data.has_os, data.y2, 0.0)
        elif block.support is Support.REAL:
            values[block.name] = rng.normal(0.0, 1.0, block.dim) * (1 + chain_index)
        elif block.support is Support.POSITIVE:
            values[block.name] = np.abs(rng.normal(0.0, 0.5, block.dim)) + 0.1
        elif block.support is Support.CORRELATION:
            values[block.name] = np.zeros(block.dim)
        elif block.support is Support.BINARY:
            values[block.name] = np.ones(block.dim)
        else:
            values[block.name] = np.full(block.dim, 0.5)
    return values


def _offending_block(spec: ModelSpec, data: ModelData, layout: ParameterLayout, values) -> str:
    for block in layout.blocks:
        if not in_support(block, values[block.name]):
            return block.name
    report = density_terms(spec, data, values)
    if not np.all(np.isfinite(report.study_loglik)):
        return layout.blocks[0].name
    for level, value in report.hierarchical.items():
        if not np.isfinite(value):
            return level
    return layout.blocks[-1].name


def _start_chain(
    spec: ModelSpec, data: ModelData, layout: ParameterLayout, config: SamplerConfig, chain_index: int
) -> ChainSampler:
    values = None
    for attempt in range(MAX_INIT_ATTEMPTS):
        values = initial_values(layout, data, chain_index, config.seed, attempt)
        if np.isfinite(density_terms(spec, data, values).total):
            if attempt:
                logger.info(f"Chain {chain_index}: finite starting point after {attempt + 1} attempts")
            break
    else:
        raise SamplerError(
            f"non-finite log joint at initialisation after {MAX_INIT_ATTEMPTS} attempts",
            block=_offending_block(spec, data, layout, values),
        )
    return ChainSampler(
        spec, data, layout, config, chain_index, values, chain_rng(config.seed, chain_index)
    )


def _run_chain(
    spec: ModelSpec, data: ModelData, layout: ParameterLayout, config: SamplerConfig, chain_index: int
) -> ChainDraws:
    return _start_chain(spec, data, layout, config, chain_index).run()


def _init_chain_worker(run_id: str, log_level: str, log_dir: str, log_to_file: bool) -> None:
    """Give a chain worker process the parent's logging setup and run id."""
    settings.log_level = log_level
    setup_logger(log_dir=log_dir, to_file=log_to_file)
    run_id_ctx_var.set(run_id)


def _chain_pool(executor: str, workers: int) -> Executor:
    if executor == "process" and workers > 1:
        root_level = logging.getLevelName(logging.getLogger().getEffectiveLevel())
        return ProcessPoolExecutor(
            max_workers=workers,
            mp_context=multiprocessing.get_context("spawn"),
            initializer=_init_chain_worker,
            initargs=(run_id_ctx_var.get(), root_level, settings.log_dir, settings.log_to_file),
        )
    return ThreadPoolExecutor(max_workers=workers)


def run(
    spec: ModelSpec,
    evidence: Union[EvidenceSet, ModelData],
    config: SamplerConfig,
    executor: Optional[str] = None,
) -> PosteriorDraws:
    """Fit a model with ``config.n_chains`` independent chains.

    Chains run concurrently, in worker processes or threads (``executor``,
    default ``settings.chain_executor``); each owns a generator derived from
    ``(config.seed, chain_index)``, so results do not depend on scheduling.
    """
    data = evidence if isinstance(evidence, ModelData) else build_model_data(spec, evidence)
    require_dual_studies(spec, data)
    layout = layout_for_data(spec, data)
    executor = executor or settings.chain_executor
    workers = min(settings.chain_workers or config.n_chains, config.n_chains)
    if executor == "process" and workers < 2:
        executor = "thread"
    conjugate = sum(block.update is not UpdateStrategy.RANDOM_WALK for block in layout.blocks)
    logger.info(
        f"Fitting {spec.endpoint_mode.value} {spec.sharing.value} model: {data.n_studies} studies, "
        f"{data.n_indications} indications, {len(layout.blocks)} blocks ({conjugate} conjugate), "
        f"{config.n_chains} chains on {workers} {executor} workers, seed {config.seed}"
    )

    start = time.time()
    with _chain_pool(executor, workers) as pool:
        if executor == "process":
            futures = [
                pool.submit(_run_chain, spec, data, layout, config, index) for index in range(config.n_chains)
            ]
        else:
            futures = [
                pool.submit(contextvars.copy_context().run, _run_chain, spec, data, layout, config, index)
                for index in range(config.n_chains)
            ]
        chains = [future.result() for future in futures]

    logger.info(f"Sampling finished in {time.time() - start:.1f}s")
    return PosteriorDraws(spec=spec, config=config, layout=layout, chains=chains)
