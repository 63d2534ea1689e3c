from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.schemas.sampler_schemas import BATCHED_KINDS, KIND_LABELS, SamplerKind, SamplerSchedule, UpdateMode


class ExperimentKind(str, Enum):
    TEST_EXAMPLE = "test_example"
    DYSON = "dyson"
    DOUBLE_WELL = "double_well"
    GMM = "gmm"
    ERROR_SWEEP = "error_sweep"


class ReferenceKind(str, Enum):
    SEMICIRCLE = "semicircle"
    GIBBS = "gibbs"
    HMC = "hmc"
    NONE = "none"


# Experiment -> name of its parameter block
PARAMS_FIELD = {
    ExperimentKind.TEST_EXAMPLE: "test_example",
    ExperimentKind.DYSON: "dyson",
    ExperimentKind.DOUBLE_WELL: "double_well",
    ExperimentKind.GMM: "gmm",
    ExperimentKind.ERROR_SWEEP: "error_sweep",
}

# Default reference per experiment
DEFAULT_REFERENCE = {
    ExperimentKind.TEST_EXAMPLE: ReferenceKind.HMC,
    ExperimentKind.DYSON: ReferenceKind.SEMICIRCLE,
    ExperimentKind.DOUBLE_WELL: ReferenceKind.GIBBS,
    ExperimentKind.GMM: ReferenceKind.NONE,
    ExperimentKind.ERROR_SWEEP: ReferenceKind.NONE,
}

# Kinds that only make sense for one family of targets
PARTICLE_ONLY_KINDS = {SamplerKind.RB_SHMC_PARTICLE}
POSTERIOR_ONLY_KINDS = {SamplerKind.RB_SHMC_BAYES}

# Kinds whose schedule.batch_size is drawn from the experiment's partners or observations
BATCH_BOUNDED_KINDS = {
    ExperimentKind.TEST_EXAMPLE: {SamplerKind.RB_SHMC_PARTICLE, SamplerKind.RBMC},
    ExperimentKind.DYSON: {SamplerKind.RB_SHMC_PARTICLE, SamplerKind.RBMC},
    ExperimentKind.DOUBLE_WELL: set(),
    ExperimentKind.GMM: {SamplerKind.RB_SHMC_BAYES},
    ExperimentKind.ERROR_SWEEP: set(),
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ======================================================================
# TARGET PARAMETERS
# ======================================================================

class TestExampleParams(_Strict):
    """Confined particles with the bounded -ln(1 + r^2)/2 interaction."""

    n_particles: int = Field(default=500, ge=2)
    alpha: float = Field(default=1.0, gt=0)
    beta: float = Field(default=1.0, gt=0)
    mass: float = Field(default=1.0, gt=0)
    init_bounds: Tuple[float, float] = (-10.0, 10.0)


class DysonParams(_Strict):
    n_particles: int = Field(default=500, ge=2)
    delta0: float = Field(default=0.01, gt=0)
    weight: float = Field(default=1.0, gt=0)     # 1/N for the mean-field regime
    mean_field: bool = False
    mass: float = Field(default=1.0, gt=0)
    init_bounds: Tuple[float, float] = (-1.0, 1.0)

    @property
    def effective_weight(self) -> float:
        return 1.0 / self.n_particles if self.mean_field else self.weight


class DoubleWellParams(_Strict):
    beta: float = Field(default=1.0, gt=0)
    barrier_scale: float = Field(default=20.0, gt=0)   # H = barrier_scale / beta
    half_width: float = Field(default=1.0, gt=0)
    split_fraction: float = Field(default=0.05, gt=0, le=1)
    mass: float = Field(default=1.0, gt=0)
    initial_position: Optional[float] = None


class GmmParams(_Strict):
    n_data: int = Field(default=100, ge=1)
    theta_true: Tuple[float, float] = (0.0, 2.0)
    sigma1_sq: float = Field(default=10.0, gt=0)
    sigma2_sq: float = Field(default=1.0, gt=0)
    sigma_y_sq: float = Field(default=0.5, gt=0)
    data_seed: int = 2024
    mass: float = Field(default=1.0, gt=0)
    sand_centers: Optional[List[Tuple[float, float]]] = None
    sand_offset: float = 10.0                            # h_G = h_b + sand_offset / beta
    bracket_theta1: Tuple[float, float] = (-3.0, 5.0)
    bracket_theta2: Tuple[float, float] = (-5.0, 5.0)
    grid_resolution: float = Field(default=1e-3, gt=0)
    inner_points: int = Field(default=401, ge=3)
    initial_theta: Optional[Tuple[float, float]] = None

    @model_validator(mode="after")
    def _two_centers(self) -> "GmmParams":
        if self.sand_centers is not None and len(self.sand_centers) != 2:
            raise ValueError("sand_centers needs exactly two centers")
        return self


class ErrorSweepParams(_Strict):
    n_particles: int = Field(default=50, ge=2)
    alpha: float = Field(default=1.0, gt=0)
    beta: float = Field(default=1.0, gt=0)
    mass: float = Field(default=1.0, gt=0)
    init_bounds: Tuple[float, float] = (-10.0, 10.0)
    horizon: float = Field(default=1.0, gt=0)
    dt_values: List[float] = Field(default_factory=lambda: [2.0 ** -k for k in range(4, 10)])
    n_replicas: int = Field(default=1000, ge=2)
    batch_size: Optional[int] = Field(default=1, ge=1)
    deterministic: bool = False
    fourth_moment_horizons: List[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def _ladder(self) -> "ErrorSweepParams":
        if any(dt <= 0 for dt in self.dt_values):
            raise ValueError("dt_values must be positive")
        if len(set(self.dt_values)) < 3:
            raise ValueError("dt_values needs at least 3 distinct entries")
        if self.batch_size is not None and self.batch_size > self.n_particles - 1:
            raise ValueError("batch_size cannot exceed n_particles - 1")
        return self


# ======================================================================
# SAMPLERS / OUTPUT
# ======================================================================

class SamplerSpec(_Strict):
    kind: SamplerKind
    label: Optional[str] = None
    update_mode: Optional[UpdateMode] = None
    schedule: SamplerSchedule
    sample_every: int = Field(default=1, ge=1)
    record_samples: bool = True
    # For posterior targets: L is derived per phase as round(factor * d_w / dt)
    trajectory_factor: Optional[float] = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _batch_needed(self) -> "SamplerSpec":
        if self.kind in BATCHED_KINDS and self.schedule.batch_size is None:
            raise ValueError(f"{self.kind.value} requires schedule.batch_size")
        return self

    @property
    def display_label(self) -> str:
        return self.label or KIND_LABELS[self.kind]


class HistogramSpec(_Strict):
    lo: float
    hi: float
    n_bins: int = Field(ge=1)
    include_burnin: bool = False

    @model_validator(mode="after")
    def _range(self) -> "HistogramSpec":
        if not self.hi > self.lo:
            raise ValueError("histogram hi must exceed lo")
        return self


class ReferenceSpec(_Strict):
    kind: ReferenceKind
    hmc_schedule: Optional[SamplerSchedule] = None


class ExperimentConfig(_Strict):
    experiment: ExperimentKind
    seed: int = 0
    samplers: List[SamplerSpec] = Field(default_factory=list)

    test_example: Optional[TestExampleParams] = None
    dyson: Optional[DysonParams] = None
    double_well: Optional[DoubleWellParams] = None
    gmm: Optional[GmmParams] = None
    error_sweep: Optional[ErrorSweepParams] = None

    histogram: Optional[HistogramSpec] = None
    reference: Optional[ReferenceSpec] = None
    checkpoints: List[float] = Field(default_factory=list)   # evolution times
    output_dir: Optional[str] = None
    n_chains: int = Field(default=1, ge=1)
    n_workers: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _consistent(self) -> "ExperimentConfig":
        own = PARAMS_FIELD[self.experiment]
        for other in PARAMS_FIELD.values():
            if other != own and getattr(self, other) is not None:
                raise ValueError(f"'{other}' block given for experiment '{self.experiment.value}'")
        if self.experiment != ExperimentKind.ERROR_SWEEP and not self.samplers:
            raise ValueError("samplers must not be empty")
        for spec in self.samplers:
            if self.experiment == ExperimentKind.GMM and spec.kind in PARTICLE_ONLY_KINDS:
                raise ValueError(f"{spec.kind.value} cannot sample the gmm posterior")
            if self.experiment != ExperimentKind.GMM and spec.kind in POSTERIOR_ONLY_KINDS:
                raise ValueError(f"{spec.kind.value} only applies to the gmm experiment")
            if self.experiment == ExperimentKind.DOUBLE_WELL and spec.kind in PARTICLE_ONLY_KINDS:
                raise ValueError(f"{spec.kind.value} needs an interacting particle system")
        largest = self._largest_batch()
        for index, spec in enumerate(self.samplers):
            batch_size = spec.schedule.batch_size
            if spec.kind not in BATCH_BOUNDED_KINDS[self.experiment] or batch_size is None:
                continue
            if batch_size > largest:
                raise ValueError(f"samplers.{index}: schedule.batch_size {batch_size} exceeds {largest}, "
                                 f"the number of interaction partners or observations")
        if (self.experiment == ExperimentKind.DYSON and self.reference_kind == ReferenceKind.SEMICIRCLE
                and self.params().effective_weight != 1.0):
            raise ValueError("the semicircle reference only holds for dyson weight 1; "
                             "use reference kind 'hmc' or 'none'")
        if any(t <= 0 for t in self.checkpoints) or self.checkpoints != sorted(self.checkpoints):
            raise ValueError("checkpoints must be positive and increasing")
        labels = [spec.display_label for spec in self.samplers]
        if len(labels) != len(set(labels)):
            raise ValueError(f"sampler labels must be unique, got {labels}")
        return self

    def _largest_batch(self) -> Optional[int]:
        """Upper bound on schedule.batch_size: N - 1 partners, or n_data observations."""
        if self.experiment in (ExperimentKind.TEST_EXAMPLE, ExperimentKind.DYSON):
            return self.params().n_particles - 1
        if self.experiment == ExperimentKind.GMM:
            return self.params().n_data
        return None

    def params(self):
        """The parameter block of the selected experiment, defaults filled in."""
        block = getattr(self, PARAMS_FIELD[self.experiment])
        if block is not None:
            return block
        defaults = {
            ExperimentKind.TEST_EXAMPLE: TestExampleParams,
            ExperimentKind.DYSON: DysonParams,
            ExperimentKind.DOUBLE_WELL: DoubleWellParams,
            ExperimentKind.GMM: GmmParams,
            ExperimentKind.ERROR_SWEEP: ErrorSweepParams,
        }
        return defaults[self.experiment]()

    @property
    def reference_kind(self) -> ReferenceKind:
        return self.reference.kind if self.reference is not None else DEFAULT_REFERENCE[self.experiment]


# ======================================================================
# RUN MANIFEST
# ======================================================================

class FileEntry(BaseModel):
    path: str
    sha256: str
    bytes: int


class CheckpointSummary(BaseModel):
    iteration: int
    evolution_time: float
    cpu_time_s: float
    relative_error: Optional[float] = None


class ChainSummary(BaseModel):
    label: str
    kind: SamplerKind
    chain_index: int
    seed: int
    n_iterations: int
    acceptance_rate: float
    evolution_time: float
    cpu_time_s: float
    grad_time_s: float
    relative_error: Optional[float] = None
    mode_occupancy: Optional[List[float]] = None
    overflow: int = 0
    checkpoints: List[CheckpointSummary] = Field(default_factory=list)


class RunManifest(BaseModel):
    experiment: ExperimentKind
    version: str
    created_at: str
    config: Dict[str, Any]
    chains: List[ChainSummary] = Field(default_factory=list)
    files: List[FileEntry] = Field(default_factory=list)
    details: Dict[str, Any] = Field(default_factory=dict)
