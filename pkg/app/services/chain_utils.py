# app/services/chain_utils.py
"""
Chain Utility Functions

Evolution-time bookkeeping, the Metropolis test on the U2 energy change,
momentum resampling and the gradient timer used for the t_g column.
"""

import logging
import math
import time
from typing import Iterable, Tuple

import numpy as np

logger = logging.getLogger(__name__)


# ======================== EVOLUTION TIME ========================

def evolution_time_increment(n_steps: int, dt: float, n_particles: int) -> float:
    """Contribution L*dt/N of one iteration."""
    return n_steps * dt / n_particles


def evolution_time(schedule_prefix: Iterable[Tuple[int, float]], n_particles: int) -> float:
    """
    T_E = (1/N) * sum_n L_n * dt_n.

    Args:
        schedule_prefix: (L, dt) pairs of the iterations run so far
        n_particles: N, the number of independently updated units

    Returns:
        Evolution time; an empty prefix gives 0.
    """
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    total = math.fsum(n_steps * dt for n_steps, dt in schedule_prefix)
    return total / n_particles


# ======================== METROPOLIS TEST ========================

def acceptance_log_probability(delta_u2: float, beta: float) -> float:
    """log min(1, exp(-beta * delta_u2)); -inf for an infinite energy increase."""
    if math.isnan(delta_u2):
        raise ValueError("delta_U2 is NaN: potential evaluation returned an invalid energy")
    if delta_u2 == math.inf:
        return -math.inf
    return min(0.0, -beta * delta_u2)


def metropolis_accept(delta_u2: float, beta: float, uniform_draw: float) -> bool:
    """
    Accept when u <= min(1, exp(-beta * delta_U2)), compared in log space.

    Raises:
        ValueError: if delta_u2 is NaN or beta is not positive
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    log_a = acceptance_log_probability(delta_u2, beta)
    if log_a == 0.0:
        return True
    if log_a == -math.inf:
        return False
    if uniform_draw <= 0.0:
        return True
    return math.log(uniform_draw) <= log_a


# ======================== MOMENTUM ========================

def resample_momentum(
    rng: np.random.Generator,
    n_particles: int,
    dimension: int,
    mass: float,
    beta_eff: float,
) -> np.ndarray:
    """
    Draw a d x N momentum matrix with i.i.d. N(0, mass / beta_eff) entries.

    For particle systems beta_eff = w^2 (N - 1); for the Bayesian variant beta_eff = N.
    """
    if mass <= 0 or beta_eff <= 0:
        raise ValueError("mass and beta_eff must be positive")
    scale = math.sqrt(mass / beta_eff)
    return scale * rng.standard_normal((dimension, n_particles))


# ======================== TIMING ========================

class GradientTimer:
    """Accumulates wall-clock seconds spent inside wrapped gradient calls."""

    def __init__(self):
        self.seconds = 0.0
        self.calls = 0

    def wrap(self, fn):
        def timed(*args, **kwargs):
            start = time.perf_counter()
            try:
                return fn(*args, **kwargs)
            finally:
                self.seconds += time.perf_counter() - start
                self.calls += 1
        return timed
