# app/services/diagnostics.py
"""
Diagnostics Service

Bin-count densities, reference bin masses, the relative (L1) error between
them, mode occupancy, and the random-batch Hamiltonian error sweep.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import quad
from scipy.stats import linregress

from app.core.errors import DiagnosticsError
from app.schemas.chain_schemas import PhaseState
from app.services.chain_utils import resample_momentum
from app.services.forces import draw_partner_batches, full_forces, pair_forces
from app.services.integrators import leapfrog, leapfrog_random_batch
from app.services.potentials import ParticleSystemTarget

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)


# ======================== BINNING ========================

@dataclass(frozen=True)
class Binning:
    lo: float
    hi: float
    n_bins: int

    def __post_init__(self):
        if self.n_bins < 1:
            raise DiagnosticsError("n_bins must be >= 1")
        if not self.hi > self.lo:
            raise DiagnosticsError(f"empty bin range [{self.lo}, {self.hi}]")

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.n_bins

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n_bins + 1)

    @property
    def centers(self) -> np.ndarray:
        edges = self.edges
        return 0.5 * (edges[:-1] + edges[1:])

    def index(self, values) -> np.ndarray:
        """Bin index per value; out-of-range values map to n_bins (the overflow slot)."""
        values = np.asarray(values, dtype=float)
        with np.errstate(invalid="ignore"):
            idx = np.floor((values - self.lo) / self.width)
        idx = np.clip(np.nan_to_num(idx), 0, self.n_bins - 1).astype(np.int64)
        outside = (values < self.lo) | (values > self.hi) | ~np.isfinite(values)
        return np.where(outside, self.n_bins, idx)


@dataclass
class DensityHistogram:
    """Bin counts over a Binning. Out-of-range samples live in `overflow` only."""

    binning: Binning
    counts: np.ndarray
    total: int
    overflow: int = 0

    def frequencies(self) -> np.ndarray:
        if self.total == 0:
            return np.zeros(self.binning.n_bins)
        return self.counts / self.total

    def density(self) -> np.ndarray:
        return self.frequencies() / self.binning.width


@dataclass
class ReferenceMasses:
    """Exact or long-run probability mass per bin."""

    binning: Binning
    masses: np.ndarray

    def frequencies(self) -> np.ndarray:
        return self.masses

    def density(self) -> np.ndarray:
        return self.masses / self.binning.width


def bin_count(samples, lo: float, hi: float, n_bins: int) -> DensityHistogram:
    binning = Binning(lo, hi, n_bins)
    return histogram_from_counts(binning, np.bincount(binning.index(np.ravel(samples)), minlength=n_bins + 1))


def histogram_from_counts(binning: Binning, counts_with_overflow: np.ndarray) -> DensityHistogram:
    counts = np.asarray(counts_with_overflow[:binning.n_bins], dtype=np.int64)
    overflow = int(counts_with_overflow[binning.n_bins]) if len(counts_with_overflow) > binning.n_bins else 0
    return DensityHistogram(binning, counts, int(counts.sum()), overflow)


def relative_error(hist: Union[DensityHistogram, ReferenceMasses], ref: Union[DensityHistogram, ReferenceMasses]) -> float:
    """sum_j |N_j / N_tot - M_j / M_tot| over a shared binning."""
    if hist.binning != ref.binning:
        raise DiagnosticsError(f"binning mismatch: {hist.binning} vs {ref.binning}")
    return float(np.sum(np.abs(hist.frequencies() - ref.frequencies())))


# ======================== REFERENCES ========================

def semicircle_cdf(x):
    """CDF of the density sqrt(2 - x^2) / pi on [-sqrt 2, sqrt 2]."""
    x = np.clip(np.asarray(x, dtype=float), -SQRT2, SQRT2)
    return (x * np.sqrt(np.maximum(2.0 - x * x, 0.0)) + 2.0 * np.arcsin(x / SQRT2)) / (2.0 * math.pi) + 0.5


def semicircle_reference(n_bins: int, lo: float = -SQRT2, hi: float = SQRT2) -> ReferenceMasses:
    """Bin masses of the semicircle law; bins beyond +-sqrt 2 get zero mass."""
    binning = Binning(lo, hi, n_bins)
    return ReferenceMasses(binning, np.diff(semicircle_cdf(binning.edges)))


def gibbs_reference(energy_fn: Callable[[float], float], beta: float, binning: Binning,
                    support: Optional[Tuple[float, float]] = None) -> ReferenceMasses:
    """
    Bin masses of exp(-beta U) / Z by adaptive quadrature, normalized over `support`
    (the whole line by default). Masses outside the binning are dropped.
    """
    grid = np.linspace(binning.lo, binning.hi, 4 * binning.n_bins + 1)
    shift = min(energy_fn(float(x)) for x in grid)

    def weight(x):
        return math.exp(-beta * (energy_fn(x) - shift))

    lo, hi = support if support is not None else (-math.inf, math.inf)
    edges = binning.edges
    masses = np.array([quad(weight, a, b, limit=200)[0] for a, b in zip(edges[:-1], edges[1:])])
    # tails beyond the binning are integrated separately
    normalizer = float(masses.sum())
    if lo < binning.lo:
        normalizer += quad(weight, lo, binning.lo, limit=200)[0]
    if hi > binning.hi:
        normalizer += quad(weight, binning.hi, hi, limit=200)[0]
    return ReferenceMasses(binning, masses / normalizer)


# ======================== OCCUPANCY ACCUMULATOR ========================

class OccupancyAccumulator:
    """
    Counts the bin of every particle at every recorded iteration.

    A single-particle move touches two bins, so each bin keeps its count
    flushed up to the iteration it last changed and the remainder is settled
    lazily: count = flushed + occupancy * (iterations - last_flush).
    """

    def __init__(self, binning: Binning, coordinates: np.ndarray):
        self.binning = binning
        slots = binning.n_bins + 1
        self.bin_of = binning.index(coordinates)
        self.occupancy = np.bincount(self.bin_of, minlength=slots).astype(np.int64)
        self.flushed = np.zeros(slots, dtype=np.int64)
        self.last_flush = np.zeros(slots, dtype=np.int64)
        self.iterations = 0

    @property
    def n_particles(self) -> int:
        return self.bin_of.size

    def _flush(self, slot: int) -> None:
        self.flushed[slot] += self.occupancy[slot] * (self.iterations - self.last_flush[slot])
        self.last_flush[slot] = self.iterations

    def move(self, i: int, coordinate: float) -> None:
        new_slot = int(self.binning.index(coordinate))
        old_slot = int(self.bin_of[i])
        if new_slot == old_slot:
            return
        self._flush(old_slot)
        self._flush(new_slot)
        self.occupancy[old_slot] -= 1
        self.occupancy[new_slot] += 1
        self.bin_of[i] = new_slot

    def reset_positions(self, coordinates: np.ndarray) -> None:
        self.flushed += self.occupancy * (self.iterations - self.last_flush)
        self.last_flush[:] = self.iterations
        self.bin_of = self.binning.index(coordinates)
        self.occupancy = np.bincount(self.bin_of, minlength=self.binning.n_bins + 1).astype(np.int64)

    def record(self) -> None:
        self.iterations += 1

    def counts(self) -> np.ndarray:
        """Counts per slot including the overflow slot at the end."""
        return self.flushed + self.occupancy * (self.iterations - self.last_flush)

    def histogram(self) -> DensityHistogram:
        return histogram_from_counts(self.binning, self.counts())


# ======================== MODES ========================

def mode_occupancy(samples, mode_centers, radius: float) -> np.ndarray:
    """
    Fraction of samples within `radius` of each center (nearest center wins);
    the last entry is the remainder.
    """
    centers = np.atleast_1d(np.asarray(mode_centers, dtype=float))
    if centers.shape[0] < 1:
        raise DiagnosticsError("mode_occupancy needs at least one center")
    points = np.asarray(samples, dtype=float)
    if centers.ndim == 1:
        centers = centers[:, None]
        points = points.reshape(-1, 1)
    else:
        points = points.reshape(-1, centers.shape[1])
    if points.shape[0] == 0:
        return np.zeros(centers.shape[0] + 1)
    distances = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
    nearest = np.argmin(distances, axis=1)
    inside = distances[np.arange(points.shape[0]), nearest] <= radius
    slots = np.where(inside, nearest, centers.shape[0])
    return np.bincount(slots, minlength=centers.shape[0] + 1) / points.shape[0]


def effective_langevin_step(n_steps: int, dt: float, mass: float) -> float:
    """Overdamped-Langevin time (L dt)^2 / (2 m) that one Hamiltonian iteration stands for."""
    return (n_steps * dt) ** 2 / (2.0 * mass)


# ======================== HAMILTONIAN ERROR SWEEP ========================

@dataclass
class ErrorSweepResult:
    dt_values: np.ndarray
    strong_errors: np.ndarray
    weak_errors: np.ndarray
    strong_slope: float
    strong_slope_stderr: float
    weak_slope: float
    weak_slope_stderr: float
    deterministic: bool = False


def _replica_energy(target: ParticleSystemTarget, q: np.ndarray, p: np.ndarray) -> np.ndarray:
    potential = np.array([target.energy_u1(q[r]) for r in range(q.shape[0])])
    kinetic = np.sum(p * p, axis=(1, 2)) / (2.0 * target.mass)
    return potential + kinetic


def _initial_replicas(target: ParticleSystemTarget, n_replicas: int, rng: np.random.Generator):
    low, high = target.init_bounds
    q0 = rng.uniform(low, high, size=(n_replicas, target.dimension, target.n_particles))
    p0 = np.stack([
        resample_momentum(rng, target.n_particles, target.dimension, target.mass, target.beta)
        for _ in range(n_replicas)
    ])
    return q0, p0


def _fit_slope(dt_values: np.ndarray, errors: np.ndarray, name: str) -> Tuple[float, float]:
    positive = errors > 0
    if positive.sum() < 3:
        logger.warning(f"{name} errors vanish on the dt ladder; slope undefined")
        return math.nan, math.nan
    fit = linregress(np.log(dt_values[positive]), np.log(errors[positive]))
    return float(fit.slope), float(fit.stderr)


def hamiltonian_error_sweep(
    target: ParticleSystemTarget,
    horizon: float,
    dt_list: Sequence[float],
    n_replicas: int,
    batch_size: Optional[int],
    rng: np.random.Generator,
    test_function: Callable[[np.ndarray], np.ndarray] = np.tanh,
    deterministic: bool = False,
) -> ErrorSweepResult:
    """
    Energy error of random-batch leapfrog against full-force leapfrog at time T.

    Both trajectories start from the same (q0, p0) per replica and use the same
    dt, so the difference isolates the batch noise. Strong error is the RMS of
    H~(T) - H(T); weak error is |E f(H~(T) - H0) - E f(H(T) - H0)| for the test
    function f. With deterministic=True the full-force leapfrog is compared to
    H0 instead, which isolates the O(dt^2) integrator error.

    Raises:
        DiagnosticsError: if fewer than three distinct dt values are given
    """
    dt_values = np.array(sorted(set(float(dt) for dt in dt_list), reverse=True))
    if dt_values.size < 3:
        raise DiagnosticsError("the dt ladder needs at least 3 distinct values to fit a slope")

    q0, p0 = _initial_replicas(target, n_replicas, rng)
    h0 = _replica_energy(target, q0, p0)
    start = PhaseState(q0, p0)

    def exact_force(q):
        return full_forces(q, target)

    def batch_force(q, partners):
        return pair_forces(q, target, partners)

    def draw(generator):
        return draw_partner_batches(generator, target.n_particles, batch_size, n_replicas=n_replicas)

    strong, weak = [], []
    for dt in dt_values:
        n_steps = max(1, int(round(horizon / dt)))
        exact = leapfrog(start, exact_force, n_steps, dt, target.mass).state
        h_exact = _replica_energy(target, exact.positions, exact.momenta)
        if deterministic:
            diff = h_exact - h0
            strong.append(math.sqrt(float(np.mean(diff ** 2))))
            weak.append(abs(float(np.mean(test_function(diff)))))
            continue
        batched = leapfrog_random_batch(start, batch_force, rng, n_steps, dt, target.mass, draw).state
        h_batch = _replica_energy(target, batched.positions, batched.momenta)
        strong.append(math.sqrt(float(np.mean((h_batch - h_exact) ** 2))))
        weak.append(abs(float(np.mean(test_function(h_batch - h0)) - np.mean(test_function(h_exact - h0)))))
        logger.info(f"dt={dt:.3e}: strong={strong[-1]:.3e} weak={weak[-1]:.3e}")

    strong_arr = np.array(strong)
    weak_arr = np.array(weak)
    strong_slope, strong_se = _fit_slope(dt_values, strong_arr, "strong")
    weak_slope, weak_se = _fit_slope(dt_values, weak_arr, "weak")
    return ErrorSweepResult(dt_values, strong_arr, weak_arr, strong_slope, strong_se,
                            weak_slope, weak_se, deterministic=deterministic)


# ======================== MOMENT GROWTH ========================

@dataclass
class FourthMomentTrace:
    times: np.ndarray
    moments: np.ndarray      # E|p(t)|^4 per particle, averaged over replicas and particles

    @property
    def maximum(self) -> float:
        return float(np.max(self.moments))


def fourth_moment_trace(
    target: ParticleSystemTarget,
    horizon: float,
    dt: float,
    n_replicas: int,
    rng: np.random.Generator,
    batch_size: Optional[int] = 1,
) -> FourthMomentTrace:
    """E|p~(t)|^4 along random-batch leapfrog trajectories on [0, T]."""
    q, p = _initial_replicas(target, n_replicas, rng)
    n_steps = max(1, int(round(horizon / dt)))
    times: List[float] = [0.0]
    moments: List[float] = [float(np.mean(np.sum(p * p, axis=1) ** 2))]

    def batch_force(x, partners):
        return pair_forces(x, target, partners)

    def draw(generator):
        return draw_partner_batches(generator, target.n_particles, batch_size, n_replicas=n_replicas)

    state = PhaseState(q, p)
    for step in range(1, n_steps + 1):
        state = leapfrog_random_batch(state, batch_force, rng, 1, dt, target.mass, draw).state
        times.append(step * dt)
        moments.append(float(np.mean(np.sum(state.momenta ** 2, axis=1) ** 2)))
    return FourthMomentTrace(np.array(times), np.array(moments))


def quartic_growth_bound(short: FourthMomentTrace, long: FourthMomentTrace, tolerance: float = 0.1) -> Tuple[float, bool]:
    """
    Fit c0 = max m(t) / (1 + t^4) on the short trace and check the long trace stays
    below c0 (1 + t^4) (1 + tolerance). Returns (c0, holds).
    """
    c0 = float(np.max(short.moments / (1.0 + short.times ** 4)))
    envelope = c0 * (1.0 + long.times ** 4) * (1.0 + tolerance)
    return c0, bool(np.all(long.moments <= envelope))
