# app/services/forces.py
"""
Force evaluation for the split potentials.

Full sums cost O(N) per particle, random-batch estimates O(s), and the
short-range U2 differences O(1) through a cell list. Every force returned
here is -grad U1; the Bayesian helpers return the gradient itself, matching
how the momentum update is written for the posterior.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Set, Tuple

import numpy as np

from app.services.potentials import (
    GmmPosteriorTarget,
    ParticleSystemTarget,
    mean_pair_gradient,
    pair_gradient_at,
)

logger = logging.getLogger(__name__)


# ======================== RANDOM BATCHES ========================

@dataclass(frozen=True)
class BatchDraw:
    """
    Indices of one random batch, drawn without replacement.

    In particle mode `excluded` is the moving particle and never appears in
    `indices`; in data mode it is None.
    """

    indices: np.ndarray
    excluded: Optional[int] = None

    def __post_init__(self):
        if np.unique(self.indices).size != self.indices.size:
            raise ValueError("batch indices must be distinct")
        if self.excluded is not None and np.any(self.indices == self.excluded):
            raise ValueError(f"batch contains the excluded index {self.excluded}")

    @property
    def size(self) -> int:
        return int(self.indices.size)


def full_indices(population: int, exclude: Optional[int] = None) -> np.ndarray:
    indices = np.arange(population)
    if exclude is not None:
        indices = np.delete(indices, exclude)
    return indices


def draw_batch(
    rng: np.random.Generator,
    population: int,
    batch_size: Optional[int],
    exclude: Optional[int] = None,
) -> BatchDraw:
    """
    Draw s distinct indices from {0..population-1}, optionally without `exclude`.

    A batch covering every available index is returned in sorted order without
    touching `rng`, so a full-size batch follows exactly the full-sum code path.

    Raises:
        ValueError: if batch_size exceeds the available population
    """
    available = population - (1 if exclude is not None else 0)
    if batch_size is None or batch_size == available:
        return BatchDraw(full_indices(population, exclude), exclude)
    if batch_size < 1 or batch_size > available:
        raise ValueError(f"batch_size {batch_size} outside [1, {available}]")
    indices = rng.choice(available, size=batch_size, replace=False)
    if exclude is not None:
        indices = indices + (indices >= exclude)
    return BatchDraw(indices, exclude)


def draw_partner_batches(
    rng: np.random.Generator,
    n_particles: int,
    batch_size: Optional[int],
    n_replicas: Optional[int] = None,
) -> np.ndarray:
    """
    One independent batch per particle for an all-coordinates move.

    Returns an (N, s) table (or (R, N, s) with replicas) whose row i is drawn
    from {0..N-1} without i. A full batch returns the sorted full table.
    """
    shape = (n_particles,) if n_replicas is None else (n_replicas, n_particles)
    available = n_particles - 1
    if batch_size is None or batch_size == available:
        table = np.tile(np.arange(available), (n_particles, 1))
        table += table >= np.arange(n_particles)[:, None]
        return table if n_replicas is None else np.broadcast_to(table, shape + (available,)).copy()
    if batch_size < 1 or batch_size > available:
        raise ValueError(f"batch_size {batch_size} outside [1, {available}]")
    owners = np.arange(n_particles).reshape((1,) * (len(shape) - 1) + (n_particles, 1))
    if batch_size == 1:
        picks = rng.integers(0, available, size=shape + (1,))
    else:
        keys = rng.random(shape + (available,))
        picks = np.argpartition(keys, batch_size - 1, axis=-1)[..., :batch_size]
    return picks + (picks >= owners)


# ======================== PARTICLE FORCES ========================

def _pair_force(x: np.ndarray, positions: np.ndarray, target: ParticleSystemTarget, partners: np.ndarray) -> np.ndarray:
    interaction = pair_gradient_at(target.kernel.phi1_gradient, x, positions, partners)
    return -(target.confinement_gradient(x) + interaction)


def full_force_on_particle(
    i: int,
    positions: np.ndarray,
    target: ParticleSystemTarget,
    x: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    -(alpha x + 1/(N-1) sum_{j != i} grad phi1(x - q_j)) with x defaulting to q_i.

    A coincident singular pair yields an infinite component.
    """
    if target.n_particles < 2:
        raise ValueError("full_force_on_particle needs N >= 2")
    x = positions[:, i] if x is None else x
    return _pair_force(x, positions, target, full_indices(target.n_particles, i))


def batch_force_on_particle(
    i: int,
    positions: np.ndarray,
    target: ParticleSystemTarget,
    batch: BatchDraw,
    x: Optional[np.ndarray] = None,
) -> np.ndarray:
    """-(alpha x + 1/s sum_{j in batch} grad phi1(x - q_j)); the confinement term is always exact."""
    if batch.excluded is not None and batch.excluded != i:
        raise ValueError(f"batch was drawn for particle {batch.excluded}, not {i}")
    x = positions[:, i] if x is None else x
    return _pair_force(x, positions, target, batch.indices)


def pair_forces(positions: np.ndarray, target: ParticleSystemTarget, partners: np.ndarray) -> np.ndarray:
    """Forces on every particle at once from a partner table; positions may carry a leading replica axis."""
    interaction = mean_pair_gradient(target.kernel.phi1_gradient, positions, partners)
    return -(target.confinement_gradient(positions) + interaction)


def full_forces(positions: np.ndarray, target: ParticleSystemTarget) -> np.ndarray:
    return pair_forces(positions, target, target.full_partner_table())


# ======================== BAYESIAN GRADIENTS ========================

def batch_grad_bayes(theta: np.ndarray, target: GmmPosteriorTarget, batch: BatchDraw) -> np.ndarray:
    """
    (1/N) grad(-log prior) + (1/s) sum_{i in batch} grad(-log p(y_i; theta)) + grad S.

    S is the sand in the scaled frame (G / N).
    """
    return target.posterior_gradient(theta, batch.indices) + target.sand_gradient(theta)


def full_grad_bayes(theta: np.ndarray, target: GmmPosteriorTarget) -> np.ndarray:
    return batch_grad_bayes(theta, target, BatchDraw(full_indices(target.n_data)))


# ======================== CELL LIST ========================

class CellList:
    """
    Spatial hash of particle positions into cubic cells of width >= cutoff.

    Any pair closer than the cell width sits in the same or an adjacent cell,
    so a 3^d block of cells around a point contains all of its short-range
    neighbors. A particle is re-bucketed only when it crosses a cell boundary.
    """

    def __init__(self, positions: np.ndarray, cell_width: float):
        if cell_width <= 0:
            raise ValueError("cell_width must be positive")
        self.cell_width = cell_width
        self.dimension = positions.shape[0]
        self._offsets = list(itertools.product((-1, 0, 1), repeat=self.dimension))
        self.rebuild(positions)

    def cell_of(self, x: np.ndarray) -> Tuple[int, ...]:
        return tuple(int(c) for c in np.floor(np.asarray(x) / self.cell_width))

    def rebuild(self, positions: np.ndarray) -> None:
        self._cells: Dict[Tuple[int, ...], Set[int]] = {}
        self._membership: List[Tuple[int, ...]] = []
        for i in range(positions.shape[1]):
            key = self.cell_of(positions[:, i])
            self._cells.setdefault(key, set()).add(i)
            self._membership.append(key)

    def move(self, i: int, new_x: np.ndarray) -> None:
        new_key = self.cell_of(new_x)
        old_key = self._membership[i]
        if new_key == old_key:
            return
        members = self._cells[old_key]
        members.discard(i)
        if not members:
            del self._cells[old_key]
        self._cells.setdefault(new_key, set()).add(i)
        self._membership[i] = new_key

    def candidates(self, x: np.ndarray) -> Set[int]:
        """Members of the 3^d cells around x (a superset of the neighbors within cell_width)."""
        center = self.cell_of(x)
        found: Set[int] = set()
        for offset in self._offsets:
            key = tuple(c + o for c, o in zip(center, offset))
            members = self._cells.get(key)
            if members:
                found |= members
        return found

    def neighbors_within(self, x: np.ndarray, positions: np.ndarray, radius: float, exclude: Optional[int] = None) -> np.ndarray:
        """Sorted indices j with |x - q_j| <= radius, radius <= cell_width."""
        if radius > self.cell_width:
            raise ValueError("radius exceeds the cell width")
        found = self.candidates(x)
        found.discard(exclude)
        if not found:
            return np.empty(0, dtype=int)
        idx = np.fromiter(sorted(found), dtype=int)
        dx = positions[:, idx] - np.asarray(x)[:, None]
        return idx[np.sqrt(np.sum(dx * dx, axis=0)) <= radius]

    def pairs_within(self, positions: np.ndarray, radius: float) -> List[Tuple[int, int]]:
        """All pairs i < j closer than radius."""
        pairs = []
        for i in range(positions.shape[1]):
            for j in self.neighbors_within(positions[:, i], positions, radius, exclude=i):
                if i < j:
                    pairs.append((i, int(j)))
        return pairs


def short_range_U2_delta(
    i: int,
    old_x: np.ndarray,
    new_x: np.ndarray,
    positions: np.ndarray,
    target: ParticleSystemTarget,
    cell_list: CellList,
) -> float:
    """
    U2 change when particle i moves from old_x to new_x, from neighbors near either endpoint.

    Returns +inf when new_x coincides with another particle.
    """
    if target.cutoff_radius is None:
        raise ValueError("short_range_U2_delta needs a target with a cutoff radius")
    found = cell_list.candidates(old_x) | cell_list.candidates(new_x)
    found.discard(i)
    if not found:
        return 0.0
    idx = np.fromiter(found, dtype=int)
    others = positions[:, idx]
    dn = new_x[:, None] - others
    do = old_x[:, None] - others
    r_new = np.sqrt(np.sum(dn * dn, axis=0))
    r_old = np.sqrt(np.sum(do * do, axis=0))
    if np.any(r_new == 0.0):
        return float("inf")
    phi2 = target.kernel.phi2
    return target.pair_scale * (float(np.sum(phi2(r_new))) - float(np.sum(phi2(r_old))))


def short_range_energy(positions: np.ndarray, target: ParticleSystemTarget) -> float:
    """U2 of a whole configuration summed over cutoff pairs only."""
    if not target.has_short_range:
        return 0.0
    cells = CellList(positions, target.cutoff_radius)
    pairs = cells.pairs_within(positions, target.cutoff_radius)
    if not pairs:
        return 0.0
    i, j = np.array(pairs).T
    dx = positions[:, i] - positions[:, j]
    r = np.sqrt(np.sum(dx * dx, axis=0))
    return target.pair_scale * float(np.sum(target.kernel.phi2(r)))
