# app/services/integrators.py
"""
Leapfrog for Hamiltonian proposals and Euler-Maruyama for the RBMC baseline.

The integrators are shape-agnostic: a single particle (d,), a configuration
(d, N) or a stack of replicas (R, d, N) all go through the same code.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional

import numpy as np

from app.core.errors import NonFiniteForceError
from app.schemas.chain_schemas import PhaseState

logger = logging.getLogger(__name__)

ForceFn = Callable[[np.ndarray], np.ndarray]
BatchForceFn = Callable[[np.ndarray, Any], np.ndarray]


@dataclass
class LeapfrogStepReport:
    """End of a leapfrog trajectory. `aborted` means a non-finite force was met and the proposal must be rejected."""

    state: PhaseState
    force_evaluations: int
    aborted: bool = False
    energies: Optional[List[float]] = field(default=None)


def _check_step(n_steps: int, dt: float, mass: float) -> None:
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if dt <= 0 or mass <= 0:
        raise ValueError("dt and mass must be positive")


def _finite(force: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(force)))


def leapfrog(
    state: PhaseState,
    force_fn: ForceFn,
    n_steps: int,
    dt: float,
    mass: float,
    energy_fn: Optional[Callable[[np.ndarray, np.ndarray], float]] = None,
) -> LeapfrogStepReport:
    """
    L steps of half-kick, drift, half-kick with a deterministic force.

    The force at the end of one step is reused as the start of the next, so
    the trajectory costs L + 1 evaluations.

    Args:
        state: starting positions and momenta
        force_fn: -grad U1 at a position array
        n_steps: L
        dt: step size
        mass: particle mass
        energy_fn: optional H(q, p) recorded after each step

    Returns:
        LeapfrogStepReport; aborted (at the starting state) on a non-finite force.
    """
    _check_step(n_steps, dt, mass)
    q = state.positions.copy()
    p = state.momenta.copy()
    energies = [] if energy_fn is not None else None

    force = force_fn(q)
    evaluations = 1
    if not _finite(force):
        return LeapfrogStepReport(state, evaluations, aborted=True, energies=energies)

    for _ in range(n_steps):
        p = p + 0.5 * dt * force
        q = q + dt * p / mass
        force = force_fn(q)
        evaluations += 1
        if not _finite(force):
            return LeapfrogStepReport(state, evaluations, aborted=True, energies=energies)
        p = p + 0.5 * dt * force
        if energies is not None:
            energies.append(energy_fn(q, p))

    return LeapfrogStepReport(PhaseState(q, p), evaluations, energies=energies)


def leapfrog_random_batch(
    state: PhaseState,
    batch_force_fn: BatchForceFn,
    rng: np.random.Generator,
    n_steps: int,
    dt: float,
    mass: float,
    draw_batch_fn: Callable[[np.random.Generator], Any],
    energy_fn: Optional[Callable[[np.ndarray, np.ndarray], float]] = None,
) -> LeapfrogStepReport:
    """
    Leapfrog with a fresh random batch per step.

    Both half-kicks of step l use the batch drawn for that step, so the
    force cannot be reused across steps and a trajectory costs 2L evaluations.
    With a full batch the positions and momenta match `leapfrog` bit for bit.
    """
    _check_step(n_steps, dt, mass)
    q = state.positions.copy()
    p = state.momenta.copy()
    energies = [] if energy_fn is not None else None
    evaluations = 0

    for _ in range(n_steps):
        batch = draw_batch_fn(rng)
        force = batch_force_fn(q, batch)
        evaluations += 1
        if not _finite(force):
            return LeapfrogStepReport(state, evaluations, aborted=True, energies=energies)
        p = p + 0.5 * dt * force
        q = q + dt * p / mass
        force = batch_force_fn(q, batch)
        evaluations += 1
        if not _finite(force):
            return LeapfrogStepReport(state, evaluations, aborted=True, energies=energies)
        p = p + 0.5 * dt * force
        if energies is not None:
            energies.append(energy_fn(q, p))

    return LeapfrogStepReport(PhaseState(q, p), evaluations, energies=energies)


def euler_maruyama(
    positions: np.ndarray,
    grad_fn: ForceFn,
    dt: float,
    beta: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    One overdamped Langevin step x - dt grad U1(x) + sqrt(2 dt / beta) z.

    Raises:
        NonFiniteForceError: if the gradient is not finite
    """
    if dt <= 0 or beta <= 0:
        raise ValueError("dt and beta must be positive")
    gradient = grad_fn(positions)
    if not _finite(gradient):
        raise NonFiniteForceError("non-finite gradient in Euler-Maruyama step")
    noise = rng.standard_normal(np.shape(positions))
    return positions - dt * gradient + math.sqrt(2.0 * dt / beta) * noise
