"""Data models for the meta-analysis toolkit."""

from datetime import date
from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Endpoint(str, Enum):
    """Time-to-event endpoint of a trial estimate."""
    PFS = "pfs"
    OS = "os"


class EndpointMode(str, Enum):
    """Which estimates a model synthesises."""
    UNIVARIATE_PFS = "univariate-pfs"
    UNIVARIATE_OS = "univariate-os"
    BIVARIATE = "bivariate-surrogacy"

    @property
    def endpoint(self) -> Optional[Endpoint]:
        return {
            EndpointMode.UNIVARIATE_PFS: Endpoint.PFS,
            EndpointMode.UNIVARIATE_OS: Endpoint.OS,
        }.get(self)

    @property
    def is_bivariate(self) -> bool:
        return self is EndpointMode.BIVARIATE


class SharingStructure(str, Enum):
    """Between-indication sharing structure."""
    IP = "IP"
    CP = "CP"
    MCIP = "MCIP"
    RP = "RP"
    MRIP = "MRIP"

    @property
    def is_mixture(self) -> bool:
        return self in (SharingStructure.MCIP, SharingStructure.MRIP)

    @property
    def is_exchangeable(self) -> bool:
        return self in (SharingStructure.RP, SharingStructure.MRIP)

    @property
    def has_common(self) -> bool:
        return self in (SharingStructure.CP, SharingStructure.MCIP)


class Support(str, Enum):
    """Support of a parameter block."""
    REAL = "real"
    POSITIVE = "positive"
    UNIT = "(0,1)"
    CORRELATION = "(-1,1)"
    BINARY = "binary"


class UpdateStrategy(str, Enum):
    """How the sampler updates a parameter block."""
    CONJUGATE_NORMAL = "conjugate-normal"
    CONJUGATE_BERNOULLI = "conjugate-bernoulli"
    CONJUGATE_BETA = "conjugate-beta"
    RANDOM_WALK = "random-walk-on-transformed-scale"


class TrialRecord(BaseModel):
    """One randomised comparison and its log hazard ratio estimates."""
    model_config = ConfigDict(frozen=True)

    study_id: str = Field(..., min_length=1)
    indication: str = Field(..., min_length=1)
    lhr_pfs: Optional[float] = None
    se_pfs: Optional[float] = None
    pfs_report_date: Optional[date] = None
    lhr_os: Optional[float] = None
    se_os: Optional[float] = None
    os_report_date: Optional[date] = None

    @model_validator(mode="after")
    def _check_endpoints(self) -> "TrialRecord":
        if self.lhr_pfs is None and self.lhr_os is None:
            raise ValueError("no endpoint data")
        for estimate, se in ((self.lhr_pfs, self.se_pfs), (self.lhr_os, self.se_os)):
            if estimate is not None and se is None:
                raise ValueError("missing standard error")
            if se is not None and se <= 0:
                raise ValueError("non-positive standard error")
            if estimate is None and se is not None:
                raise ValueError("standard error without estimate")
        return self

    @property
    def has_pfs(self) -> bool:
        return self.lhr_pfs is not None

    @property
    def has_os(self) -> bool:
        return self.lhr_os is not None

    @property
    def has_both(self) -> bool:
        return self.has_pfs and self.has_os

    def estimate(self, endpoint: Endpoint) -> Tuple[Optional[float], Optional[float]]:
        """Return (log HR, standard error) for an endpoint."""
        if endpoint is Endpoint.PFS:
            return self.lhr_pfs, self.se_pfs
        return self.lhr_os, self.se_os


class EvidenceSet(BaseModel):
    """Ordered trial records plus the indication index they are grouped by."""
    model_config = ConfigDict(frozen=True)

    records: Tuple[TrialRecord, ...] = ()
    indication_index: Dict[str, int] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_index(self) -> "EvidenceSet":
        ids = [record.study_id for record in self.records]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate study_id")
        if sorted(self.indication_index.values()) != list(range(len(self.indication_index))):
            raise ValueError("indication indices must be contiguous from 0")
        used = {record.indication for record in self.records}
        if used != set(self.indication_index):
            raise ValueError("indication index does not match records")
        return self

    @classmethod
    def from_records(cls, records: List[TrialRecord]) -> "EvidenceSet":
        """Build a set whose indication order is first-appearance order."""
        index: Dict[str, int] = {}
        for record in records:
            index.setdefault(record.indication, len(index))
        return cls(records=tuple(records), indication_index=index)

    @property
    def labels(self) -> List[str]:
        return sorted(self.indication_index, key=self.indication_index.__getitem__)

    @property
    def n_indications(self) -> int:
        return len(self.indication_index)

    @property
    def is_empty(self) -> bool:
        return not self.records

    def records_for(self, label: str) -> List[TrialRecord]:
        return [record for record in self.records if record.indication == label]


class PriorSettings(BaseModel):
    """Hyperparameters of the prior families."""
    model_config = ConfigDict(frozen=True)

    tau_halfnormal_scale: float = Field(default=0.5, gt=0)
    effect_normal_sd: float = Field(default=10.0, gt=0)
    psi_halfnormal_scale: float = Field(default=0.5, gt=0)
    xi_halfnormal_scale: float = Field(default=0.5, gt=0)
    h_gamma_shape: float = Field(default=1.0, gt=0)
    h_gamma_rate: float = Field(default=0.01, gt=0)
    mixture_beta: Tuple[float, float] = (1.0, 1.0)
    rho_uniform_bounds: Tuple[float, float] = (-1.0, 1.0)

    @field_validator("mixture_beta")
    @classmethod
    def _positive_beta(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        if min(value) <= 0:
            raise ValueError("mixture_beta parameters must be positive")
        return value

    @field_validator("rho_uniform_bounds")
    @classmethod
    def _rho_bounds(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        lower, upper = value
        if not (-1.0 <= lower < upper <= 1.0):
            raise ValueError("rho_uniform_bounds must satisfy -1 <= lower < upper <= 1")
        return value


class ModelSpec(BaseModel):
    """Endpoint mode, sharing structure, priors and sensitivity flags."""
    model_config = ConfigDict(frozen=True)

    endpoint_mode: EndpointMode = EndpointMode.UNIVARIATE_OS
    sharing: SharingStructure = SharingStructure.IP
    sharing_psi: Union[SharingStructure, Literal["inherit"]] = "inherit"
    priors: PriorSettings = Field(default_factory=PriorSettings)
    common_effect_within_indication: bool = False
    tie_mixture_probabilities: bool = False
    p_new: float = Field(default=1.0, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_flags(self) -> "ModelSpec":
        bivariate = self.endpoint_mode.is_bivariate
        if self.sharing_psi != "inherit" and not bivariate:
            raise ValueError("sharing_psi applies only to the bivariate surrogacy model")
        if self.tie_mixture_probabilities and not (bivariate and self.sharing.is_mixture):
            raise ValueError("tie_mixture_probabilities requires a bivariate MCIP or MRIP model")
        if self.common_effect_within_indication and bivariate:
            raise ValueError("common_effect_within_indication applies only to univariate models")
        return self

    @property
    def psi_sharing(self) -> SharingStructure:
        return self.sharing if self.sharing_psi == "inherit" else self.sharing_psi

    def structure_for(self, key: str) -> SharingStructure:
        """Sharing structure of an indication-level parameter family."""
        return self.psi_sharing if key == "psi" else self.sharing


class SamplerConfig(BaseModel):
    """Multi-chain sampler settings."""
    model_config = ConfigDict(frozen=True)

    n_chains: int = Field(default=3, ge=1)
    burn_in: int = Field(default=20000, ge=0)
    samples_per_chain: int = Field(default=80000, ge=1)
    thin: int = Field(default=1, ge=1)
    seed: int = Field(default=12345, ge=0)
    adapt_target_acceptance: float = Field(default=0.44, gt=0.0, lt=1.0)
    adapt_window: int = Field(default=50, ge=1)

    @property
    def n_retained(self) -> int:
        return self.samples_per_chain // self.thin


class ParameterBlock(BaseModel):
    """One enumerated block of a model instance."""
    model_config = ConfigDict(frozen=True)

    name: str
    dim: int = Field(..., ge=1)
    support: Support
    update: UpdateStrategy
    family: str = Field(default="", description="Indication-level family the block belongs to")
    latent: Optional[Tuple[bool, ...]] = None


class ParameterLayout(BaseModel):
    """Ordered parameter blocks of a model instance (also the update order)."""
    model_config = ConfigDict(frozen=True)

    blocks: Tuple[ParameterBlock, ...]
    labels: Tuple[str, ...]
    study_ids: Tuple[str, ...]

    @property
    def names(self) -> List[str]:
        return [block.name for block in self.blocks]

    def __contains__(self, name: object) -> bool:
        return any(block.name == name for block in self.blocks)

    def block(self, name: str) -> ParameterBlock:
        for block in self.blocks:
            if block.name == name:
                return block
        raise KeyError(name)

    def dims(self) -> Dict[str, int]:
        return {block.name: block.dim for block in self.blocks}


class EffectMode(str, Enum):
    """How synthetic indication-level effects are generated."""
    COMMON = "common"
    EXCHANGEABLE = "exchangeable"
    ONE_EXTREME = "one-extreme"


class ScenarioSpec(BaseModel):
    """Controlled scenario for synthetic multi-indication evidence."""
    model_config = ConfigDict(frozen=True)

    n_indications: int = Field(default=4, ge=1)
    trials_per_indication: Union[int, Tuple[int, ...]] = 4
    effect_mode: EffectMode = EffectMode.EXCHANGEABLE
    mean_effect: float = -0.3
    tau_between: float = Field(default=0.1, ge=0)
    extreme_offset: float = 1.0
    tau_within: float = Field(default=0.05, ge=0)
    lambda0: Union[float, Tuple[float, ...]] = 0.0
    lambda1: Union[float, Tuple[float, ...]] = 0.8
    psi: Union[float, Tuple[float, ...]] = 0.05
    se_range: Tuple[float, float] = (0.08, 0.2)
    rho_within: float = Field(default=0.5, gt=-1.0, lt=1.0)
    missing_os_fraction: float = Field(default=0.0, ge=0.0, le=1.0)
    seed: int = Field(default=2024, ge=0)
    labels: Optional[Tuple[str, ...]] = None
    start_date: date = date(2000, 1, 1)

    @model_validator(mode="after")
    def _check_shapes(self) -> "ScenarioSpec":
        low, high = self.se_range
        if not (0 < low <= high):
            raise ValueError("se_range must satisfy 0 < low <= high")
        for name in ("trials_per_indication", "lambda0", "lambda1", "psi"):
            value = getattr(self, name)
            if isinstance(value, tuple) and len(value) != self.n_indications:
                raise ValueError(f"{name} needs one value per indication")
        if min(self.per_indication("psi")) < 0:
            raise ValueError("psi must be non-negative")
        if self.labels is not None and len(self.labels) != self.n_indications:
            raise ValueError("labels needs one entry per indication")
        return self

    def per_indication(self, name: str) -> Tuple:
        value = getattr(self, name)
        if isinstance(value, tuple):
            return value
        return (value,) * self.n_indications

    @property
    def indication_labels(self) -> Tuple[str, ...]:
        return self.labels or tuple(f"IND{j + 1}" for j in range(self.n_indications))
