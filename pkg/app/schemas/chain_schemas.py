# app/schemas/chain_schemas.py
"""
Value types that carry numpy arrays through the samplers.

These are dataclasses rather than pydantic models: they hold large arrays
and never cross the config/manifest boundary directly.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np


@dataclass(frozen=True)
class PhaseState:
    """Positions and momenta of a d x N configuration (N = 1 for parameter vectors)."""

    positions: np.ndarray
    momenta: np.ndarray

    def __post_init__(self):
        if self.positions.shape != self.momenta.shape:
            raise ValueError(
                f"positions {self.positions.shape} and momenta {self.momenta.shape} differ in shape"
            )

    @property
    def dimension(self) -> int:
        if self.positions.ndim == 1:
            return self.positions.shape[0]
        return self.positions.shape[-2]

    @property
    def n_particles(self) -> int:
        return 1 if self.positions.ndim == 1 else self.positions.shape[-1]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.momenta)))


@dataclass
class Checkpoint:
    """Chain progress captured when the evolution time crosses a configured value."""

    iteration: int
    evolution_time: float
    cpu_time_s: float
    counts: Optional[np.ndarray] = None   # histogram counts at this point, if binning is on
    total: int = 0


@dataclass
class ChainRecord:
    """Everything one chain produced. Owned by exactly one chain worker."""

    label: str
    n_particles: int
    n_burnin: int = 0
    samples: List[np.ndarray] = field(default_factory=list)
    sample_iterations: List[int] = field(default_factory=list)
    accept_flags: List[bool] = field(default_factory=list)
    evolution_time: float = 0.0
    cpu_time_s: float = 0.0
    grad_time_s: float = 0.0
    checkpoints: List[Checkpoint] = field(default_factory=list)
    counts: Optional[np.ndarray] = None
    total: int = 0
    overflow: int = 0

    @property
    def n_iterations(self) -> int:
        return len(self.accept_flags)

    @property
    def acceptance_rate(self) -> float:
        if not self.accept_flags:
            return 0.0
        return float(np.mean(self.accept_flags))

    def post_burnin_samples(self) -> np.ndarray:
        """Recorded snapshots after burn-in stacked as (k, d, N)."""
        kept = [s for s, n in zip(self.samples, self.sample_iterations) if n > self.n_burnin]
        if not kept:
            return np.empty((0,))
        return np.stack(kept)
