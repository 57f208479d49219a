"""Result models: posterior draws, fit statistics, summaries, predictions."""

from enum import Enum
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from schema.models import ModelSpec, ParameterLayout, SamplerConfig, SharingStructure


class ChainDraws(BaseModel):
    """Retained draws of one chain."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    chain_index: int
    values: Dict[str, np.ndarray]
    deviance: np.ndarray
    acceptance: Dict[str, float] = Field(default_factory=dict)
    proposal_scales: Dict[str, List[float]] = Field(default_factory=dict)


class PosteriorDraws(BaseModel):
    """Per-chain draw matrices plus the spec and config that produced them.

    ``values[name]`` has shape ``(n_retained, dim)``; the names are the layout
    blocks plus derived ``*_eff`` indication-level parameters.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    spec: ModelSpec
    config: SamplerConfig
    layout: ParameterLayout
    chains: List[ChainDraws]

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def names(self) -> List[str]:
        return list(self.chains[0].values)

    @property
    def labels(self) -> List[str]:
        return list(self.layout.labels)

    def __contains__(self, name: object) -> bool:
        return name in self.chains[0].values

    def pooled(self, name: str) -> np.ndarray:
        """Draws of a block with chains concatenated, shape (total, dim)."""
        if name not in self:
            raise KeyError(name)
        return np.concatenate([chain.values[name] for chain in self.chains], axis=0)

    def component(self, name: str, index: int = 0) -> np.ndarray:
        """One scalar component as a (n_chains, n_retained) matrix."""
        return np.stack([chain.values[name][:, index] for chain in self.chains])

    def posterior_mean(self, name: str) -> np.ndarray:
        return self.pooled(name).mean(axis=0)

    @property
    def deviance(self) -> np.ndarray:
        return np.concatenate([chain.deviance for chain in self.chains])

    @property
    def acceptance(self) -> Dict[str, float]:
        """Random-walk acceptance rate per block, averaged over chains."""
        blocks = self.chains[0].acceptance
        return {
            name: float(np.mean([chain.acceptance[name] for chain in self.chains]))
            for name in blocks
        }


class DensityTermReport(BaseModel):
    """Additive decomposition of the joint log posterior."""

    study_loglik: List[float]
    hierarchical: Dict[str, float] = Field(default_factory=dict)
    log_prior: float
    total: float


class FitStats(BaseModel):
    """Posterior mean deviance, effective parameters and DIC."""

    dbar: float
    pd: float
    dic: float
    mean_residual_deviance: float
    n_obs: int = 0

    @model_validator(mode="after")
    def _additive(self) -> "FitStats":
        if not np.isclose(self.dic, self.dbar + self.pd, rtol=1e-12, atol=1e-9):
            raise ValueError("dic must equal dbar + pd")
        return self


class ConvergenceRow(BaseModel):
    """Convergence diagnostics of one monitored scalar."""

    quantity: str
    label: str
    rhat: float
    ess: float
    flag: bool


class ConvergenceReport(BaseModel):
    rows: List[ConvergenceRow] = Field(default_factory=list)

    @property
    def flagged(self) -> List[ConvergenceRow]:
        return [row for row in self.rows if row.flag]

    @property
    def any_flagged(self) -> bool:
        return bool(self.flagged)


class SummaryRow(BaseModel):
    """Posterior summary of one reported quantity."""

    quantity: str
    label: str = "all"
    group: str = ""
    mean: float
    sd: float
    quantiles: Dict[float, float]

    @property
    def median(self) -> float:
        return self.quantiles[0.5]

    @property
    def lo95(self) -> float:
        return self.quantiles[0.025]

    @property
    def hi95(self) -> float:
        return self.quantiles[0.975]


class PredictionMode(str, Enum):
    """Source of the PFS estimate entered into the surrogate relationship."""
    IP_PFS = "IP-PFS"
    MATCHED = "Matched"


class PfsEstimate(BaseModel):
    """Normal approximation of an indication-level PFS effect."""

    indication: str
    mean: float
    sd: float = Field(..., gt=0)
    source_sharing: SharingStructure


class OsPrediction(BaseModel):
    """Predicted OS effect draws for one indication."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    indication: str
    draws: np.ndarray
    mode: PredictionMode
    includes_conditional_variance: bool = False
    sharing: Optional[SharingStructure] = None
    pfs: Optional[PfsEstimate] = None


class CrossValRow(BaseModel):
    """Leave-one-out prediction of a masked OS estimate."""

    study_id: str
    indication: str
    predicted_mean: float
    predicted_sd: float
    lo95: float
    hi95: float
    observed: float
    se_os: float
    residual: float
    inside: bool


class CrossValResult(BaseModel):
    rows: List[CrossValRow] = Field(default_factory=list)
    skipped: List[str] = Field(default_factory=list)

    @property
    def coverage(self) -> Optional[float]:
        if not self.rows:
            return None
        return float(np.mean([row.inside for row in self.rows]))


class RunManifest(BaseModel):
    """Everything needed to reproduce a run."""

    command: str
    tool_version: str
    config: str
    data_checksum: str
    seed: int
    started_at: str
    wall_clock_seconds: float
    acceptance: Dict[str, float] = Field(default_factory=dict)
    convergence_flags: List[str] = Field(default_factory=list)
    status: str = "ok"


class TruthRecord(BaseModel):
    """True parameter values behind a synthetic evidence set."""

    indication_labels: List[str]
    pfs_effects: List[float]
    os_effects: List[float]
    lambda0: List[float]
    lambda1: List[float]
    psi: List[float]
    study_pfs_effects: Dict[str, float] = Field(default_factory=dict)
    study_os_effects: Dict[str, float] = Field(default_factory=dict)
    seed: int

    def effects(self, endpoint: str) -> Dict[str, float]:
        """Indication-level true effects for ``pfs`` or ``os``."""
        values = self.pfs_effects if endpoint == "pfs" else self.os_effects
        return dict(zip(self.indication_labels, values))
