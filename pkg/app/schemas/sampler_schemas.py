# app/schemas/sampler_schemas.py
from enum import Enum
from typing import List, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator


# ======================================================================
# SAMPLER TAXONOMY
# ======================================================================

class SamplerKind(str, Enum):
    HMC = "hmc"
    SHMC = "shmc"
    RB_SHMC_PARTICLE = "rb_shmc_particle"
    RB_SHMC_BAYES = "rb_shmc_bayes"
    RBMC = "rbmc"


class UpdateMode(str, Enum):
    SINGLE_PARTICLE = "single_particle"
    ALL_COORDINATES = "all_coordinates"


# Kinds that draw random batches inside the proposal
BATCHED_KINDS = {SamplerKind.RB_SHMC_PARTICLE, SamplerKind.RB_SHMC_BAYES}

# Display labels used in reports and comparison verdicts
KIND_LABELS = {
    SamplerKind.HMC: "HMC",
    SamplerKind.SHMC: "SHMC",
    SamplerKind.RB_SHMC_PARTICLE: "RB-SHMC",
    SamplerKind.RB_SHMC_BAYES: "RB-SHMC",
    SamplerKind.RBMC: "RBMC",
}


# ======================================================================
# SCHEDULE
# ======================================================================

class ScheduleStep(BaseModel):
    """
    One phase of the (L_n, dt_n) schedule.

    The phase applies while the iteration index n (1-based, burn-in included)
    is <= until_iteration and the evolution time accumulated before the
    iteration is <= until_evolution_time. Unset thresholds never expire.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_steps: int = Field(ge=1)
    dt: float = Field(gt=0)
    until_iteration: Optional[int] = Field(default=None, ge=1)
    until_evolution_time: Optional[float] = Field(default=None, gt=0)


class SamplerSchedule(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    steps: List[ScheduleStep] = Field(min_length=1)
    batch_size: Optional[int] = Field(default=None, ge=1)   # None => full sum
    n_samples: int = Field(default=1000, ge=0)
    n_burnin: int = Field(default=0, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _thresholds_increase(self) -> "SamplerSchedule":
        previous = 0
        for step in self.steps:
            if step.until_iteration is not None:
                if step.until_iteration <= previous:
                    raise ValueError("until_iteration thresholds must be strictly increasing")
                previous = step.until_iteration
        return self

    @property
    def n_iterations(self) -> int:
        return self.n_burnin + self.n_samples

    def phase(self, iteration: int, evolution_time: float = 0.0) -> Optional[ScheduleStep]:
        """First phase still open at the 1-based `iteration`; None once every phase has expired."""
        for step in self.steps:
            if step.until_iteration is not None and iteration > step.until_iteration:
                continue
            if step.until_evolution_time is not None and evolution_time > step.until_evolution_time:
                continue
            return step
        return None

    def entry(self, iteration: int, evolution_time: float = 0.0) -> Tuple[int, float]:
        """(L, dt) for the 1-based `iteration`; past the last phase the final pair is reused."""
        step = self.phase(iteration, evolution_time) or self.steps[-1]
        return step.n_steps, step.dt

    def prefix(self, n_iterations: int) -> Sequence[Tuple[int, float]]:
        """Materialized (L, dt) pairs for iterations 1..n (iteration thresholds only)."""
        return [self.entry(n) for n in range(1, n_iterations + 1)]
