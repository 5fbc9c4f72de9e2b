from datetime import date
from enum import Enum, IntEnum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# --- Enumerations --- #


class EventType(IntEnum):
    CENSORED = 0
    MODE1 = 1  # off-the-bus
    MODE2 = 2  # double-bit error


class Family(str, Enum):
    WEIBULL = "weibull"
    LOGNORMAL = "lognormal"


class CorrelationKind(str, Enum):
    PEXP = "pexp"
    EXP = "exp"
    GAU = "gau"
    INDEP = "indep"  # uncorrelated effects, Omega = I
    NONE = "none"  # plain AFT, no effects

    @property
    def spatial(self) -> bool:
        return self in (CorrelationKind.PEXP, CorrelationKind.EXP, CorrelationKind.GAU)

    @property
    def has_effects(self) -> bool:
        return self is not CorrelationKind.NONE


# --- Data records --- #


class GridSpec(BaseModel):
    n_rows: int = Field(..., ge=1)
    n_cols: int = Field(..., ge=1)

    model_config = ConfigDict(frozen=True)

    @property
    def row_scale(self) -> float:
        return float(max(self.n_rows - 1, 1))

    @property
    def col_scale(self) -> float:
        return float(max(self.n_cols // 2, 1))


class FailureRecord(BaseModel):
    unit_id: str
    row: int = Field(..., ge=0)
    col: int = Field(..., ge=0, description="Connectivity-labeled column")
    cage: int = Field(..., ge=0, le=2)
    slot: int = Field(..., ge=0, le=7)
    node: int = Field(..., ge=0, le=3)
    time: float = Field(..., gt=0, description="Observed or censoring time in years")
    event: EventType

    model_config = ConfigDict(frozen=True)

    @property
    def delta1(self) -> int:
        return int(self.event == EventType.MODE1)

    @property
    def delta2(self) -> int:
        return int(self.event == EventType.MODE2)


class ColumnRelabelMap(BaseModel):
    physical_to_connectivity: List[int]

    @field_validator("physical_to_connectivity")
    @classmethod
    def _must_be_permutation(cls, value: List[int]) -> List[int]:
        if sorted(value) != list(range(len(value))):
            raise ValueError("relabel map must be a permutation of 0..n_cols-1")
        return value

    def apply(self, col: int) -> int:
        return self.physical_to_connectivity[col]


class ModeCount(BaseModel):
    mode: int
    failures: int
    required: float = Field(..., description="Failure count must exceed this value")
    ok: bool


class ProprietyReport(BaseModel):
    family: Family
    n_covariates: int
    modes: List[ModeCount]

    @property
    def ok(self) -> bool:
        return all(m.ok for m in self.modes)


# --- Model and algorithm configuration --- #


class PriorConfig(BaseModel):
    a: float = Field(5.0, gt=0, description="Inverse-gamma shape for nu")
    b: float = Field(1.0, gt=0, description="Inverse-gamma scale for nu")
    c: float = Field(1.0, gt=0, description="Beta first shape for kappa/2")
    d: float = Field(1.0, gt=0, description="Beta second shape for kappa/2")


class ModelConfig(BaseModel):
    family: Family = Family.WEIBULL
    correlation: CorrelationKind = CorrelationKind.PEXP
    mixture: bool = Field(True, description="Two-component mixture for mode 2")
    prior: PriorConfig = Field(default_factory=PriorConfig)


class SamplerConfig(BaseModel):
    chains: int = Field(4, ge=1)
    warmup_iters: int = Field(6000, ge=1)
    sampling_iters: int = Field(2000, ge=1)
    seed: int = Field(20240101, ge=0, lt=2**64)
    max_tree_depth: int = Field(10, ge=1, le=15)
    target_accept: float = Field(0.8, gt=0, lt=1)
    divergence_threshold: float = Field(1000.0, gt=0)
    init_radius: float = Field(2.0, gt=0)
    max_init_attempts: int = Field(100, ge=1)
    store_log_lik: bool = True


class McemConfig(BaseModel):
    max_iters: int = Field(50, ge=1)
    e_step_base: int = Field(200, ge=1, description="Retained draws at iteration 0")
    e_step_growth: int = Field(100, ge=0, description="Extra retained draws per iteration")
    e_step_burnin: int = Field(200, ge=0)
    proposal_sd: float = Field(0.1, gt=0)
    target_acceptance: float = Field(0.44, gt=0, lt=1)
    tolerance: float = Field(0.01, gt=0, description="Max abs change of unconstrained parameters")
    penalty: float = Field(10_000.0, gt=0)
    nu_grid_size: int = Field(60, ge=2)
    kappa_grid_size: int = Field(40, ge=2)
    nu_max: float = Field(3.0, gt=0)
    max_m_step_draws: int = Field(500, ge=1)
    objective_draws: int = Field(2000, ge=10, description="Importance draws for the observed-data log likelihood")
    restarts: int = Field(3, ge=1)
    seed: int = Field(20240101, ge=0, lt=2**64)


class SimTruth(BaseModel):
    mu1: float = 1.70
    mu2: float = 1.55
    beta1: List[float] = Field(default_factory=lambda: [0.67, 0.27])
    beta2: List[float] = Field(default_factory=lambda: [0.57, 0.23])
    xi1: float = Field(0.19, gt=0)
    xi2: float = Field(0.14, gt=0)
    sigma1_sq: float = Field(0.02, ge=0)
    sigma2_sq: float = Field(0.01, ge=0)
    rho12: float = Field(0.0, ge=-0.95, le=0.95)
    nu: float = Field(0.25, gt=0)
    kappa: float = Field(1.52, gt=0, le=2)

    @model_validator(mode="after")
    def _same_length(self) -> "SimTruth":
        if len(self.beta1) != len(self.beta2):
            raise ValueError("beta1 and beta2 must have the same length")
        return self

    def scalar_params(self) -> Dict[str, float]:
        """Truth on the reporting scale used by fitted summaries."""
        params = {"mu1": self.mu1, "mu2": self.mu2}
        for k, beta in (("beta1", self.beta1), ("beta2", self.beta2)):
            for j, value in enumerate(beta):
                params[f"{k}[x{j + 1}]"] = value
        params.update(
            xi1=self.xi1,
            xi2=self.xi2,
            sigma1=self.sigma1_sq**0.5,
            sigma2=self.sigma2_sq**0.5,
            rho12=self.rho12,
            nu=self.nu,
            kappa=self.kappa,
        )
        return params


class SimConfig(BaseModel):
    n_units: int = Field(5000, ge=1)
    grid_side: int = Field(5, ge=2)
    truth: SimTruth = Field(default_factory=SimTruth)
    start_window: Tuple[date, date] = (date(2012, 1, 1), date(2018, 1, 1))
    end_date: date = date(2019, 1, 1)
    seed: int = Field(20240101, ge=0, lt=2**64)
    max_regenerations: int = Field(100, ge=1)
    min_frac_one_failure: float = Field(0.05, ge=0, le=1)
    min_frac_two_failures: float = Field(0.10, ge=0, le=1)

    @model_validator(mode="after")
    def _window_before_end(self) -> "SimConfig":
        lo, hi = self.start_window
        if not lo <= hi < self.end_date:
            raise ValueError("start window must be ordered and end before end_date")
        return self


# --- Reports --- #


class ParamDiagnostics(BaseModel):
    param: str
    rhat: Optional[float] = None  # None when draws are constant
    ess_bulk: Optional[float] = None
    ess_tail: Optional[float] = None
    constant: bool = False
    rhat_flag: bool = False
    ess_flag: bool = False


class ConvergenceReport(BaseModel):
    params: List[ParamDiagnostics]
    rhat_cutoff: float = 1.1
    ess_cutoff: float = 400.0

    @property
    def converged(self) -> bool:
        return not any(p.rhat_flag for p in self.params)

    @property
    def max_rhat(self) -> float:
        values = [p.rhat for p in self.params if p.rhat is not None]
        return max(values) if values else float("nan")


class ChainStats(BaseModel):
    chain: int
    step_size: float
    divergences: int
    mean_accept_stat: float
    mean_tree_depth: float
    non_pd_evaluations: int = 0


class SamplerReport(BaseModel):
    chains: List[ChainStats]
    draws_per_chain: int
    warnings: List[str] = Field(default_factory=list)

    @property
    def divergence_rate(self) -> float:
        total = sum(c.divergences for c in self.chains)
        return total / max(1, self.draws_per_chain * len(self.chains))


class RunManifest(BaseModel):
    run_id: str
    command: str
    config_hash: str
    seed: Optional[int] = None
    versions: Dict[str, str] = Field(default_factory=dict)
    inputs: Dict[str, str] = Field(default_factory=dict, description="path -> sha256")
    outputs: List[str] = Field(default_factory=list)
    timings: Dict[str, float] = Field(default_factory=dict, description="seconds")
    model: Optional[ModelConfig] = None
    grid: Optional[GridSpec] = None
    covariates: Optional[List[str]] = None
    data: Optional[str] = Field(None, description="Dataset path the fit was run on")
    relabel: Optional[str] = None
    time_unit: str = "years"
