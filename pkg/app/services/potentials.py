# app/services/potentials.py
"""
Target distributions and their U = U1 + U2 splittings.

Particle systems live in the rescaled frame: for N particles with weight w,

    U1(q) = sum_i alpha |q_i|^2 / 2 + 1/(N-1) sum_{i<j} phi1(|q_i - q_j|)
    U2(q) =                           1/(N-1) sum_{i<j} phi2(|q_i - q_j|)

and the chain targets exp(-beta U). The Dyson system uses beta = w^2 (N-1)
(the rescaled temperature) and alpha = 1/w; the smooth test system uses its
physical beta.

Parameter-vector targets (double well, GMM posterior) are stored as d x 1
matrices so every sampler sees the same d x N layout.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.signal import find_peaks
from scipy.special import logsumexp

from app.core.errors import DiagnosticsError

logger = logging.getLogger(__name__)


# ======================== SPLIT POTENTIAL CONTRACT ========================

class SplitPotential(ABC):
    """
    U = U1 + U2 over a d x N configuration.

    grad_u1 drives proposals, energy_u2 drives the Metropolis test with
    min(1, exp(-beta * dU2)). energy_u2 may return +inf to force a rejection.
    """

    beta: float
    mass: float
    n_particles: int
    dimension: int
    cutoff_radius: Optional[float] = None
    has_short_range: bool = True

    @abstractmethod
    def energy_u1(self, positions: np.ndarray) -> float:
        ...

    @abstractmethod
    def energy_u2(self, positions: np.ndarray) -> float:
        ...

    @abstractmethod
    def grad_u1(self, positions: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def grad_u(self, positions: np.ndarray) -> np.ndarray:
        """Gradient of the unsplit U (used by plain HMC)."""

    @abstractmethod
    def sample_initial(self, rng: np.random.Generator) -> np.ndarray:
        ...

    def energy(self, positions: np.ndarray) -> float:
        return self.energy_u1(positions) + self.energy_u2(positions)

    def kinetic_energy(self, momenta: np.ndarray) -> float:
        return float(np.sum(momenta * momenta)) / (2.0 * self.mass)


# ======================== PAIR KERNELS ========================

def radial_gradient(dx: np.ndarray, radial_factor: Callable[[np.ndarray], np.ndarray], axis: int = 0) -> np.ndarray:
    """
    Gradient of a radial kernel phi(|x|) at displacements dx: phi'(r)/r * dx.

    Coincident points of a singular kernel come back as +inf (force sentinel).
    """
    r = np.sqrt(np.sum(dx * dx, axis=axis, keepdims=True))
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = radial_factor(r)
        gradient = factor * dx
    singular = ~np.isfinite(gradient)
    if np.any(singular):
        gradient = np.where(singular, np.inf, gradient)
    return gradient


class PairKernel(ABC):
    """Radial pair interaction phi(r) split into a smooth phi1 and short-range phi2."""

    cutoff_radius: Optional[float] = None
    gradient_bound: Optional[float] = None   # sup |grad phi1|

    @abstractmethod
    def phi(self, r: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def phi1(self, r: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def phi1_radial_factor(self, r: np.ndarray) -> np.ndarray:
        """phi1'(r) / r."""

    @abstractmethod
    def phi_radial_factor(self, r: np.ndarray) -> np.ndarray:
        """phi'(r) / r."""

    def phi2(self, r: np.ndarray) -> np.ndarray:
        return np.zeros_like(np.asarray(r, dtype=float))

    @property
    def has_short_range(self) -> bool:
        return self.cutoff_radius is not None

    def phi1_gradient(self, dx: np.ndarray, axis: int = 0) -> np.ndarray:
        return radial_gradient(dx, self.phi1_radial_factor, axis=axis)

    def phi_gradient(self, dx: np.ndarray, axis: int = 0) -> np.ndarray:
        return radial_gradient(dx, self.phi_radial_factor, axis=axis)


class SmoothLogKernel(PairKernel):
    """phi(r) = -ln(1 + r^2) / 2; the force -phi'(r) = r / (1 + r^2) is bounded by 1/2."""

    gradient_bound = 0.5

    def phi(self, r):
        return -0.5 * np.log1p(np.asarray(r, dtype=float) ** 2)

    def phi1(self, r):
        return self.phi(r)

    def phi1_radial_factor(self, r):
        return -1.0 / (1.0 + np.asarray(r, dtype=float) ** 2)

    def phi_radial_factor(self, r):
        return self.phi1_radial_factor(r)


class DysonKernel(PairKernel):
    """
    phi(r) = -ln r with the linear surrogate phi1(r) = (1 - ln delta0) - r / delta0 below delta0.

    With delta0 = 0.01 the surrogate is ln(100) + 1 - 100 r, continuous in value and
    slope at the cutoff. phi1 has kinks at r = 0 and r = delta0, so grad phi1 is bounded
    by 1/delta0 but not smooth on that measure-zero set.
    """

    def __init__(self, delta0: float = 0.01):
        if delta0 <= 0:
            raise ValueError("delta0 must be positive")
        self.delta0 = delta0
        self.cutoff_radius = delta0
        self.slope = 1.0 / delta0
        self.offset = 1.0 - math.log(delta0)
        self.gradient_bound = self.slope

    def phi(self, r):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            return -np.log(r)

    def phi1(self, r):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            far = -np.log(np.maximum(r, self.delta0))
        return np.where(r < self.delta0, self.offset - self.slope * r, far)

    def phi2(self, r):
        r = np.asarray(r, dtype=float)
        near = r < self.delta0
        with np.errstate(divide="ignore", invalid="ignore"):
            value = -np.log(r) - (self.offset - self.slope * r)
        return np.where(near, value, 0.0)

    def phi1_radial_factor(self, r):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            return np.where(r < self.delta0, -self.slope / r, -1.0 / (r * r))

    def phi_radial_factor(self, r):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            return -1.0 / (r * r)


def dyson_phi1_grad(r: float, delta0: float = 0.01) -> float:
    """
    Signed 1-D derivative of the Dyson surrogate: -sign(r)/delta0 inside the cutoff, -1/r outside.

    r = 0 returns +inf; the proposal carrying it is rejected downstream.
    """
    if r == 0:
        return math.inf
    if abs(r) < delta0:
        return -math.copysign(1.0 / delta0, r)
    return -1.0 / r


# ======================== PAIR SUMS ========================

def mean_pair_gradient(
    kernel_gradient: Callable[..., np.ndarray],
    positions: np.ndarray,
    partners: np.ndarray,
) -> np.ndarray:
    """
    Mean over partners of grad phi(q_i - q_j), for every particle i.

    Args:
        kernel_gradient: kernel.phi1_gradient or kernel.phi_gradient
        positions: (d, N) or (R, d, N) for R independent replicas
        partners: (N, s) or (R, N, s) partner indices per particle

    Returns:
        Array shaped like positions.
    """
    squeeze = positions.ndim == 2
    if squeeze:
        positions = positions[None]
    if partners.ndim == 2:
        partners = np.broadcast_to(partners, (positions.shape[0],) + partners.shape)
    n_rep, dim, n = positions.shape
    s = partners.shape[-1]
    flat = partners.reshape(n_rep, 1, n * s)
    gathered = np.take_along_axis(positions, np.broadcast_to(flat, (n_rep, dim, n * s)), axis=-1)
    gathered = gathered.reshape(n_rep, dim, n, s)
    dx = positions[..., None] - gathered
    result = kernel_gradient(dx, axis=1).sum(axis=-1) / s
    return result[0] if squeeze else result


def pair_gradient_at(
    kernel_gradient: Callable[..., np.ndarray],
    x: np.ndarray,
    positions: np.ndarray,
    partners: np.ndarray,
) -> np.ndarray:
    """Mean of grad phi(x - q_j) over partner indices j, for a single trial position x (d,)."""
    dx = x[:, None] - positions[:, partners]
    return kernel_gradient(dx, axis=0).sum(axis=1) / len(partners)


def _pair_energy_sum(values_fn: Callable[[np.ndarray], np.ndarray], positions: np.ndarray) -> float:
    n = positions.shape[-1]
    i, j = np.triu_indices(n, k=1)
    dx = positions[:, i] - positions[:, j]
    r = np.sqrt(np.sum(dx * dx, axis=0))
    return float(np.sum(values_fn(r)))


# ======================== PARTICLE SYSTEMS ========================

class ParticleSystemTarget(SplitPotential):
    """N interacting particles in the rescaled frame (see module docstring)."""

    def __init__(
        self,
        kernel: PairKernel,
        n_particles: int,
        dimension: int = 1,
        confinement: float = 1.0,
        beta: float = 1.0,
        mass: float = 1.0,
        weight: float = 1.0,
        init_bounds: Tuple[float, float] = (-1.0, 1.0),
    ):
        if n_particles < 2:
            raise ValueError("a particle system needs at least two particles")
        if beta <= 0 or mass <= 0:
            raise ValueError("beta and mass must be positive")
        self.kernel = kernel
        self.n_particles = n_particles
        self.dimension = dimension
        self.confinement = confinement
        self.beta = beta
        self.mass = mass
        self.weight = weight
        self.init_bounds = init_bounds
        self.cutoff_radius = kernel.cutoff_radius
        self.has_short_range = kernel.has_short_range

    @property
    def pair_scale(self) -> float:
        return 1.0 / (self.n_particles - 1)

    def full_partner_table(self) -> np.ndarray:
        """(N, N-1) table: row i lists every j != i in increasing order."""
        n = self.n_particles
        table = np.tile(np.arange(n - 1), (n, 1))
        table += table >= np.arange(n)[:, None]
        return table

    def confinement_gradient(self, x: np.ndarray) -> np.ndarray:
        return self.confinement * x

    def energy_u1(self, positions):
        confinement = 0.5 * self.confinement * float(np.sum(positions * positions))
        return confinement + self.pair_scale * _pair_energy_sum(self.kernel.phi1, positions)

    def energy_u2(self, positions):
        if not self.has_short_range:
            return 0.0
        return self.pair_scale * _pair_energy_sum(self.kernel.phi2, positions)

    def energy(self, positions):
        confinement = 0.5 * self.confinement * float(np.sum(positions * positions))
        return confinement + self.pair_scale * _pair_energy_sum(self.kernel.phi, positions)

    def grad_u1(self, positions):
        table = self.full_partner_table()
        return self.confinement_gradient(positions) + mean_pair_gradient(self.kernel.phi1_gradient, positions, table)

    def grad_u(self, positions):
        table = self.full_partner_table()
        return self.confinement_gradient(positions) + mean_pair_gradient(self.kernel.phi_gradient, positions, table)

    def particle_energy(self, i: int, x: np.ndarray, positions: np.ndarray, part: str = "u") -> float:
        """Energy terms that involve particle i when it sits at x (others from positions)."""
        others = np.delete(np.arange(self.n_particles), i)
        dx = x[:, None] - positions[:, others]
        r = np.sqrt(np.sum(dx * dx, axis=0))
        values = {"u": self.kernel.phi, "u1": self.kernel.phi1, "u2": self.kernel.phi2}[part](r)
        pair = self.pair_scale * float(np.sum(values))
        if part == "u2":
            return pair
        return 0.5 * self.confinement * float(np.dot(x, x)) + pair

    def sample_initial(self, rng):
        low, high = self.init_bounds
        return rng.uniform(low, high, size=(self.dimension, self.n_particles))


class SmoothPairTarget(ParticleSystemTarget):
    """Confined particles with the bounded kernel phi(r) = -ln(1+r^2)/2; U2 = 0."""

    def __init__(self, n_particles: int = 500, alpha: float = 1.0, beta: float = 1.0, mass: float = 1.0,
                 init_bounds: Tuple[float, float] = (-10.0, 10.0)):
        super().__init__(SmoothLogKernel(), n_particles, dimension=1, confinement=alpha,
                         beta=beta, mass=mass, init_bounds=init_bounds)
        self.alpha = alpha


class DysonTarget(ParticleSystemTarget):
    """
    Log-gas with weight w: exp(-[w (N-1)/2 sum x^2 - w^2 sum_{i<j} ln|x_i - x_j|]).

    Written as beta U with beta = w^2 (N-1), U = sum x^2 / (2w) + 1/(N-1) sum_{i<j} phi,
    so the confinement is 1/w. w = 1 is the Dyson Brownian motion measure whose
    density tends to the semicircle; w = 1/N is the mean-field regime.
    """

    def __init__(self, n_particles: int = 500, delta0: float = 0.01, weight: float = 1.0, mass: float = 1.0,
                 init_bounds: Tuple[float, float] = (-1.0, 1.0)):
        if weight <= 0:
            raise ValueError(f"weight must be positive, got {weight}")
        beta = weight * weight * (n_particles - 1)
        super().__init__(DysonKernel(delta0), n_particles, dimension=1, confinement=1.0 / weight,
                         beta=beta, mass=mass, weight=weight, init_bounds=init_bounds)
        self.delta0 = delta0


# ======================== DOUBLE WELL ========================

def double_well_U(x, barrier_height: float, half_width: float):
    """U(x) = (H / W^4) (x^2 - W^2)^2."""
    if half_width <= 0 or barrier_height <= 0:
        raise ValueError("barrier height and half width must be positive")
    x = np.asarray(x, dtype=float)
    value = barrier_height / half_width ** 4 * (x * x - half_width ** 2) ** 2
    return float(value) if value.ndim == 0 else value


def double_well_grad(x, barrier_height: float, half_width: float):
    x = np.asarray(x, dtype=float)
    return 4.0 * barrier_height / half_width ** 4 * x * (x * x - half_width ** 2)


class DoubleWellTarget(SplitPotential):
    """
    1-D double well with H = barrier_scale / beta.

    U1 = lambda U inside the wells (|x| < W) and U outside, so U1 keeps the wells
    but lowers the barrier to lambda H; U2 = (1 - lambda) U inside, 0 outside.
    U'(+-W) = 0, so U1 is continuously differentiable at the seam.
    """

    n_particles = 1
    dimension = 1

    def __init__(self, beta: float = 1.0, barrier_scale: float = 20.0, half_width: float = 1.0,
                 split_fraction: float = 0.05, mass: float = 1.0, initial_position: Optional[float] = None):
        if not 0.0 < split_fraction <= 1.0:
            raise ValueError("split_fraction must lie in (0, 1]")
        self.beta = beta
        self.mass = mass
        self.barrier_height = barrier_scale / beta
        self.half_width = half_width
        self.split_fraction = split_fraction
        self.initial_position = initial_position
        self.has_short_range = split_fraction < 1.0

    def potential(self, x):
        return double_well_U(x, self.barrier_height, self.half_width)

    def _inside(self, x):
        return np.abs(x) < self.half_width

    def energy_u1(self, positions):
        x = np.asarray(positions, dtype=float)
        u = double_well_U(x, self.barrier_height, self.half_width)
        return float(np.sum(np.where(self._inside(x), self.split_fraction * u, u)))

    def energy_u2(self, positions):
        x = np.asarray(positions, dtype=float)
        u = double_well_U(x, self.barrier_height, self.half_width)
        return float(np.sum(np.where(self._inside(x), (1.0 - self.split_fraction) * u, 0.0)))

    def grad_u1(self, positions):
        x = np.asarray(positions, dtype=float)
        g = double_well_grad(x, self.barrier_height, self.half_width)
        return np.where(self._inside(x), self.split_fraction * g, g)

    def grad_u(self, positions):
        return double_well_grad(positions, self.barrier_height, self.half_width)

    def sample_initial(self, rng):
        if self.initial_position is not None:
            return np.full((1, 1), float(self.initial_position))
        return rng.uniform(-self.half_width, self.half_width, size=(1, 1))


# ======================== GAUSSIAN MIXTURE POSTERIOR ========================

def gmm_potential(theta: np.ndarray, data: np.ndarray, beta: float, sigma1_sq: float = 10.0,
                  sigma2_sq: float = 1.0, sigma_y_sq: float = 0.5) -> float:
    """
    U(theta) = (1/beta) [theta1^2/(2 s1) + theta2^2/(2 s2)
               - sum_i log(exp(-(theta1 - y_i)^2/(2 sy)) + exp(-(theta1 + theta2 - y_i)^2/(2 sy)))]

    With beta = N this is the displayed posterior potential; mixture constants are dropped.
    """
    data = np.asarray(data, dtype=float)
    if data.size == 0:
        raise ValueError("gmm_potential needs at least one observation")
    theta = np.asarray(theta, dtype=float).reshape(2, -1)
    prior = theta[0] ** 2 / (2 * sigma1_sq) + theta[1] ** 2 / (2 * sigma2_sq)
    a = -((theta[0][None, :] - data[:, None]) ** 2) / (2 * sigma_y_sq)
    b = -((theta[0][None, :] + theta[1][None, :] - data[:, None]) ** 2) / (2 * sigma_y_sq)
    log_lik = logsumexp(np.stack([a, b]), axis=0).sum(axis=0)
    value = (prior - log_lik) / beta
    return float(value[0]) if value.size == 1 else value


def generate_gmm_data(rng: np.random.Generator, n: int = 100, theta: Sequence[float] = (0.0, 2.0),
                      sigma_y_sq: float = 0.5) -> np.ndarray:
    """Draw n observations from 0.5 N(theta1, sy) + 0.5 N(theta1 + theta2, sy)."""
    second = rng.random(n) < 0.5
    means = np.where(second, theta[0] + theta[1], theta[0])
    return means + math.sqrt(sigma_y_sq) * rng.standard_normal(n)


def sand_height(barrier_height: float, beta: float, offset: float = 10.0) -> float:
    """h_G = h_b + offset / beta."""
    return barrier_height + offset / beta


class GmmPosteriorTarget(SplitPotential):
    """
    Posterior of the two-location Gaussian mixture with beta = N.

    Sand S(theta) = h_G sum_k exp(-|theta - c_k|^2 / 2) (unit covariance bumps of height h_G)
    gives U1 = U + S and U2 = -S <= 0; the Metropolis factor exp(-beta dU2) equals exp(dG)
    with G = N S.
    """

    n_particles = 1
    dimension = 2

    def __init__(self, data: np.ndarray, sigma1_sq: float = 10.0, sigma2_sq: float = 1.0,
                 sigma_y_sq: float = 0.5, mass: float = 1.0,
                 sand_centers: Optional[np.ndarray] = None, sand_height: float = 0.0,
                 initial_theta: Optional[Sequence[float]] = None):
        data = np.asarray(data, dtype=float)
        if data.size == 0:
            raise ValueError("the posterior needs at least one observation")
        self.data = data
        self.sigma1_sq = sigma1_sq
        self.sigma2_sq = sigma2_sq
        self.sigma_y_sq = sigma_y_sq
        self.mass = mass
        self.beta = float(data.size)
        self.sand_centers = np.zeros((0, 2)) if sand_centers is None else np.asarray(sand_centers, dtype=float)
        self.sand_height_value = float(sand_height)
        self.initial_theta = initial_theta
        self.has_short_range = self.sand_centers.shape[0] > 0 and self.sand_height_value != 0.0

    @property
    def n_data(self) -> int:
        return self.data.size

    def with_sand(self, centers: np.ndarray, height: float) -> "GmmPosteriorTarget":
        return GmmPosteriorTarget(self.data, self.sigma1_sq, self.sigma2_sq, self.sigma_y_sq, self.mass,
                                  sand_centers=centers, sand_height=height, initial_theta=self.initial_theta)

    # --- energies ---

    def potential(self, theta) -> float:
        return gmm_potential(theta, self.data, self.beta, self.sigma1_sq, self.sigma2_sq, self.sigma_y_sq)

    def sand(self, theta) -> float:
        theta = np.asarray(theta, dtype=float).reshape(2, -1)
        if self.sand_centers.shape[0] == 0:
            value = np.zeros(theta.shape[1])
        else:
            d2 = ((theta[None, :, :] - self.sand_centers[:, :, None]) ** 2).sum(axis=1)
            value = self.sand_height_value * np.exp(-0.5 * d2).sum(axis=0)
        return float(value[0]) if value.size == 1 else value

    def sand_gradient(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).reshape(2, 1)
        if self.sand_centers.shape[0] == 0:
            return np.zeros((2, 1))
        diff = theta[:, 0][None, :] - self.sand_centers
        weights = np.exp(-0.5 * (diff ** 2).sum(axis=1))
        return (-self.sand_height_value * (weights[:, None] * diff).sum(axis=0)).reshape(2, 1)

    def energy_u1(self, positions):
        return self.potential(positions) + self.sand(positions)

    def energy_u2(self, positions):
        return -self.sand(positions)

    def energy(self, positions):
        return self.potential(positions)

    def log_density(self, theta: np.ndarray) -> np.ndarray:
        """Unnormalized log posterior -beta U at the columns of theta (2, k)."""
        return -self.beta * np.atleast_1d(self.potential(theta))

    # --- gradients ---

    def prior_gradient(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).reshape(2, 1)
        return np.array([[theta[0, 0] / self.sigma1_sq], [theta[1, 0] / self.sigma2_sq]])

    def likelihood_gradients(self, theta: np.ndarray, indices: np.ndarray) -> np.ndarray:
        """-grad log p(y_i; theta) for the selected observations, shape (2, k)."""
        t1, t2 = float(theta[0, 0]), float(theta[1, 0])
        y = self.data[indices]
        ra = t1 - y
        rb = t1 + t2 - y
        a = -ra ** 2 / (2 * self.sigma_y_sq)
        b = -rb ** 2 / (2 * self.sigma_y_sq)
        top = np.maximum(a, b)
        ea = np.exp(a - top)
        eb = np.exp(b - top)
        wa = ea / (ea + eb)
        wb = 1.0 - wa
        g1 = (wa * ra + wb * rb) / self.sigma_y_sq
        g2 = wb * rb / self.sigma_y_sq
        return np.stack([g1, g2])

    def posterior_gradient(self, theta: np.ndarray, indices: np.ndarray) -> np.ndarray:
        """(1/N) grad(-log prior) + mean over indices of grad(-log p(y_i; theta))."""
        lik = self.likelihood_gradients(theta, indices)
        return self.prior_gradient(theta) / self.beta + (lik.sum(axis=1) / len(indices)).reshape(2, 1)

    def grad_u(self, positions):
        return self.posterior_gradient(positions, np.arange(self.n_data))

    def grad_u1(self, positions):
        return self.grad_u(positions) + self.sand_gradient(positions)

    def sample_initial(self, rng):
        if self.initial_theta is not None:
            return np.asarray(self.initial_theta, dtype=float).reshape(2, 1)
        return rng.standard_normal((2, 1))


# ======================== SAND CONSTRUCTION ========================

@dataclass(frozen=True)
class SandCenters:
    centers: np.ndarray            # (2, 2), one center per row
    modes_theta1: Tuple[float, float]
    modes_theta2: Tuple[float, float]


@dataclass(frozen=True)
class WellGeometry:
    minima: np.ndarray             # (2, 2)
    distance: float                # d_w
    barrier_height: float          # h_b


def _marginal_log_density(log_density, axis_grid: np.ndarray, inner_grid: np.ndarray, axis: int,
                          chunk: int = 256) -> np.ndarray:
    inner_step = inner_grid[1] - inner_grid[0] if inner_grid.size > 1 else 1.0
    out = np.empty(axis_grid.size)
    for start in range(0, axis_grid.size, chunk):
        block = axis_grid[start:start + chunk]
        outer, inner = np.meshgrid(block, inner_grid, indexing="ij")
        points = np.empty((2, outer.size))
        points[axis] = outer.ravel()
        points[1 - axis] = inner.ravel()
        values = np.asarray(log_density(points)).reshape(block.size, inner_grid.size)
        out[start:start + chunk] = logsumexp(values, axis=1) + math.log(inner_step)
    return out


def marginal_modes(grid: np.ndarray, log_marginal: np.ndarray) -> Tuple[float, float]:
    """Locations of the two highest local maxima of a 1-D marginal, ascending."""
    density = np.exp(log_marginal - np.max(log_marginal))
    peaks, _ = find_peaks(density)
    if peaks.size < 2:
        raise DiagnosticsError(
            f"found {peaks.size} marginal mode(s), need 2; specify sand centers manually in the config"
        )
    top = peaks[np.argsort(density[peaks])[-2:]]
    first, second = sorted(grid[top])
    return float(first), float(second)


def estimate_sand_centers(
    log_density: Callable[[np.ndarray], np.ndarray],
    bracket1: Tuple[float, float],
    bracket2: Tuple[float, float],
    resolution: float = 1e-3,
    inner_points: int = 401,
) -> SandCenters:
    """
    Sand centers from the modes of the two numerically marginalized 1-D densities.

    Each coordinate's marginal is scanned on a grid of spacing `resolution`; the other
    coordinate is integrated out on `inner_points` nodes of its bracket. The two marginal
    modes of each coordinate are paired so the centers carry the larger joint density.
    """
    def axis_grid(bracket):
        lo, hi = bracket
        count = int(round((hi - lo) / resolution)) + 1
        return np.round(lo + resolution * np.arange(count), 12)

    grid1 = axis_grid(bracket1)
    grid2 = axis_grid(bracket2)
    inner1 = np.linspace(bracket1[0], bracket1[1], inner_points)
    inner2 = np.linspace(bracket2[0], bracket2[1], inner_points)

    modes1 = marginal_modes(grid1, _marginal_log_density(log_density, grid1, inner2, axis=0))
    modes2 = marginal_modes(grid2, _marginal_log_density(log_density, grid2, inner1, axis=1))

    straight = np.array([[modes1[0], modes2[0]], [modes1[1], modes2[1]]])
    crossed = np.array([[modes1[0], modes2[1]], [modes1[1], modes2[0]]])
    score_straight = float(np.sum(log_density(straight.T)))
    score_crossed = float(np.sum(log_density(crossed.T)))
    centers = straight if score_straight >= score_crossed else crossed
    logger.info(f"Sand centers from marginal modes: {centers.tolist()}")
    return SandCenters(centers=centers, modes_theta1=modes1, modes_theta2=modes2)


def well_geometry(target: GmmPosteriorTarget, centers: np.ndarray) -> WellGeometry:
    """
    Refine the two wells of U from the sand centers; d_w is their distance and h_b
    the altitude at the midpoint minus the average altitude of the two wells.
    """
    def fun(theta):
        return target.potential(theta)

    def jac(theta):
        return target.grad_u(theta.reshape(2, 1)).ravel()

    minima = np.array([minimize(fun, c, jac=jac, method="BFGS").x for c in centers])
    distance = float(np.linalg.norm(minima[0] - minima[1]))
    midpoint = minima.mean(axis=0)
    barrier = target.potential(midpoint) - 0.5 * (target.potential(minima[0]) + target.potential(minima[1]))
    return WellGeometry(minima=minima, distance=distance, barrier_height=float(barrier))


def residual_barriers(target: GmmPosteriorTarget, minima: np.ndarray, n_points: int = 2001) -> Tuple[float, float]:
    """Barriers of U1 seen from each well along the straight segment between the two minima."""
    s = np.linspace(0.0, 1.0, n_points)
    path = minima[0][:, None] + (minima[1] - minima[0])[:, None] * s[None, :]
    profile = np.asarray(target.potential(path)) + np.asarray(target.sand(path))
    peak = int(np.argmax(profile))
    left = float(profile[peak] - profile[:peak + 1].min())
    right = float(profile[peak] - profile[peak:].min())
    return left, right
