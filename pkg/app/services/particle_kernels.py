# app/services/particle_kernels.py
"""
Compiled single-particle moves for interacting particle systems.

`run_particle_block` advances a block of iterations inside numba: pick a
particle, propose with leapfrog (HMC, SHMC, RB-SHMC) or Euler-Maruyama
(RBMC), take the short-range energy change from a linked cell list, accept
or reject, and update the streaming bin counts.

Every random number a block needs is drawn beforehand from the chain's
Philox streams, in this order per block:

    particle   one index per iteration
    momentum   d normals per iteration (L*d Langevin normals for RBMC)
    batch      L*s uniforms per iteration, nothing for a full batch
    uniform    one Metropolis uniform per iteration

Only the two kernels below have a compiled form; any other pair kernel runs
through the per-iteration handlers in samplers.py.
"""

import logging
import math
import time
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numba import njit, objmode

from app.core.rng import ChainStreams
from app.schemas.sampler_schemas import SamplerKind
from app.services.diagnostics import OccupancyAccumulator
from app.services.potentials import DysonKernel, PairKernel, ParticleSystemTarget, SmoothLogKernel

logger = logging.getLogger(__name__)

KERNEL_SMOOTH_LOG = 0
KERNEL_DYSON = 1

MOVE_HMC = 0
MOVE_SPLIT = 1
MOVE_LANGEVIN = 2

MOVES = {
    SamplerKind.HMC: MOVE_HMC,
    SamplerKind.SHMC: MOVE_SPLIT,
    SamplerKind.RB_SHMC_PARTICLE: MOVE_SPLIT,
    SamplerKind.RBMC: MOVE_LANGEVIN,
}

BLOCK_OK = 0
BLOCK_NAN_ENERGY = 1
BLOCK_NON_FINITE_STATE = 2

BLOCK_FAILURES = {
    BLOCK_NAN_ENERGY: "delta_U2 is NaN: potential evaluation returned an invalid energy",
    BLOCK_NON_FINITE_STATE: "non-finite state after an accepted move",
}

# Random numbers drawn per block; cells allowed in the linked cell list
BLOCK_DRAWS = 1 << 18
MAX_CELLS = 1 << 20


# ======================== PAIR KERNELS ========================

@njit(cache=True, error_model="numpy")
def _radial_factor(kernel, delta0, r, unsplit):
    """phi1'(r) / r, or phi'(r) / r when `unsplit`."""
    if kernel == KERNEL_SMOOTH_LOG:
        return -1.0 / (1.0 + r * r)
    if r < delta0 and not unsplit:
        return -(1.0 / delta0) / r
    return -1.0 / (r * r)


@njit(cache=True, error_model="numpy")
def _pair_value(kernel, r):
    if kernel == KERNEL_SMOOTH_LOG:
        return -0.5 * math.log1p(r * r)
    if r == 0.0:
        return math.inf
    return -math.log(r)


@njit(cache=True, error_model="numpy")
def particle_force(x, i, positions, partners, n_partners, kernel, delta0, confinement, unsplit, out):
    """
    out = -(confinement x + mean of grad phi(x - q_j) over the partners of particle i).

    n_partners = 0 means every other particle, in increasing order. Returns
    False on a coincident pair of the singular kernel.
    """
    d = x.shape[0]
    n = positions.shape[1]
    for k in range(d):
        out[k] = 0.0
    count = n - 1 if n_partners == 0 else n_partners
    for m in range(count):
        if n_partners == 0:
            j = m + 1 if m >= i else m
        else:
            j = partners[m]
        r2 = 0.0
        for k in range(d):
            dx = x[k] - positions[k, j]
            r2 += dx * dx
        r = math.sqrt(r2)
        if r == 0.0 and kernel == KERNEL_DYSON:
            return False
        factor = _radial_factor(kernel, delta0, r, unsplit)
        for k in range(d):
            out[k] += factor * (x[k] - positions[k, j])
    for k in range(d):
        out[k] = -(confinement * x[k] + out[k] / count)
    return True


@njit(cache=True, error_model="numpy")
def particle_energy(x, i, positions, kernel, confinement, pair_scale):
    """Terms of the unsplit U that involve particle i placed at x."""
    d, n = positions.shape
    square = 0.0
    for k in range(d):
        square += x[k] * x[k]
    pair = 0.0
    for j in range(n):
        if j == i:
            continue
        r2 = 0.0
        for k in range(d):
            dx = x[k] - positions[k, j]
            r2 += dx * dx
        pair += _pair_value(kernel, math.sqrt(r2))
    return 0.5 * confinement * square + pair_scale * pair


# ======================== RANDOM BATCHES ========================

@njit(cache=True, error_model="numpy")
def draw_partners(uniforms, i, pool, picks, out):
    """
    s distinct partners of particle i from s uniforms by a partial Fisher-Yates shuffle.

    `pool` holds the labels 0..N-2 and is restored before returning; labels
    at or above i are shifted by one so i is never drawn.
    """
    available = pool.shape[0]
    s = out.shape[0]
    for k in range(s):
        pick = k + int(uniforms[k] * (available - k))
        if pick >= available:
            pick = available - 1
        picks[k] = pick
        label = pool[pick]
        pool[pick] = pool[k]
        pool[k] = label
        out[k] = label + 1 if label >= i else label
    for k in range(s - 1, -1, -1):
        pick = picks[k]
        label = pool[k]
        pool[k] = pool[pick]
        pool[pick] = label


# ======================== LINKED CELL LIST ========================

@njit(cache=True, error_model="numpy")
def _cell_coordinate(value, lo, width, cells):
    t = (value - lo) / width
    if not t >= 0.0:
        return 0
    if t >= cells:
        return cells - 1
    return int(t)


@njit(cache=True, error_model="numpy")
def cell_of(x, lo, width, cells):
    """Flat index of the cell holding x; coordinates outside the box clamp to the boundary cells."""
    flat = 0
    stride = 1
    for k in range(x.shape[0]):
        flat += _cell_coordinate(x[k], lo, width, cells) * stride
        stride *= cells
    return flat


@njit(cache=True, error_model="numpy")
def _link(i, cell, head, nxt, prv, owner):
    prv[i] = -1
    nxt[i] = head[cell]
    if head[cell] >= 0:
        prv[head[cell]] = i
    head[cell] = i
    owner[i] = cell


@njit(cache=True, error_model="numpy")
def _unlink(i, head, nxt, prv, owner):
    if prv[i] >= 0:
        nxt[prv[i]] = nxt[i]
    else:
        head[owner[i]] = nxt[i]
    if nxt[i] >= 0:
        prv[nxt[i]] = prv[i]


@njit(cache=True, error_model="numpy")
def build_cells(positions, lo, width, cells, head, nxt, prv, owner):
    head[:] = -1
    for i in range(positions.shape[1]):
        _link(i, cell_of(positions[:, i], lo, width, cells), head, nxt, prv, owner)


@njit(cache=True, error_model="numpy")
def relink(i, x, lo, width, cells, head, nxt, prv, owner):
    cell = cell_of(x, lo, width, cells)
    if cell != owner[i]:
        _unlink(i, head, nxt, prv, owner)
        _link(i, cell, head, nxt, prv, owner)


@njit(cache=True, error_model="numpy")
def short_range_sum(x, i, positions, head, nxt, lo, width, cells, delta0):
    """
    Sum of the Dyson phi2(|x - q_j|) over j != i in the 3^d cells around x.

    Returns (sum, coincident); coincident is True when some q_j equals x.
    """
    d = x.shape[0]
    offset = 1.0 - math.log(delta0)
    slope = 1.0 / delta0
    total = 0.0
    for o in range(3 ** d):
        flat = 0
        stride = 1
        rest = o
        inside = True
        for k in range(d):
            c = _cell_coordinate(x[k], lo, width, cells) + rest % 3 - 1
            rest //= 3
            if c < 0 or c >= cells:
                inside = False
                break
            flat += c * stride
            stride *= cells
        if not inside:
            continue
        j = head[flat]
        while j >= 0:
            if j != i:
                r2 = 0.0
                for k in range(d):
                    dx = x[k] - positions[k, j]
                    r2 += dx * dx
                r = math.sqrt(r2)
                if r == 0.0:
                    return total, True
                if r < delta0:
                    total += -math.log(r) - (offset - slope * r)
            j = nxt[j]
    return total, False


# ======================== ACCEPTANCE / BINS / CLOCK ========================

@njit(cache=True, error_model="numpy")
def metropolis(delta, beta, u):
    """1 to accept, 0 to reject, -1 when the energy change is NaN."""
    if delta != delta:
        return -1
    if delta == math.inf:
        return 0
    log_a = min(0.0, -beta * delta)
    if log_a == 0.0 or u <= 0.0:
        return 1
    return 1 if math.log(u) <= log_a else 0


@njit(cache=True, error_model="numpy")
def bin_slot(value, lo, hi, width, n_bins):
    """Same slot as Binning.index: n_bins for values outside [lo, hi] or non-finite."""
    if not (value >= lo and value <= hi):
        return n_bins
    slot = int(math.floor((value - lo) / width))
    if slot > n_bins - 1:
        return n_bins - 1
    return slot


@njit(cache=True, error_model="numpy")
def clock_iterations(evolution_time, increment, threshold, strict, limit):
    """
    Iterations, at most `limit`, until the clock reaches `threshold` (passes it when `strict`).

    Accumulates exactly like the block kernel so both agree on the crossing.
    """
    for k in range(1, limit + 1):
        evolution_time += increment
        if evolution_time > threshold or (not strict and evolution_time == threshold):
            return k
    return limit


@njit
def _now():
    with objmode(now="float64"):
        now = time.perf_counter()
    return now


# ======================== BLOCK KERNEL ========================

@njit(error_model="numpy")
def run_particle_block(
    positions, move, kernel, delta0, confinement, pair_scale, beta, mass, short_range,
    n_steps, dt, batch_size, increment, evolution_time,
    picks, momenta, noise, batch_uniforms, uniforms,
    head, nxt, prv, owner, cell_lo, cell_width, cells,
    binned, recording, bin_lo, bin_hi, bin_width, n_bins,
    bin_of, occupancy, flushed, last_flush, iterations,
    accepted_out,
):
    """
    Run picks.shape[0] single-particle iterations, updating `positions` in place.

    Returns (status, completed, evolution_time, recorded iterations, gradient seconds).
    On a failure `completed` is the number of iterations finished before it.
    """
    d, n = positions.shape
    s = batch_size
    x = np.empty(d)
    x0 = np.empty(d)
    p = np.empty(d)
    force = np.empty(d)
    pool = np.arange(n - 1)
    chosen = np.empty(max(s, 1), dtype=np.int64)
    scratch = np.empty(max(s, 1), dtype=np.int64)
    unsplit = move == MOVE_HMC
    langevin_scale = math.sqrt(2.0 * dt / beta)
    grad_seconds = 0.0

    for b in range(picks.shape[0]):
        i = picks[b]
        for k in range(d):
            x0[k] = positions[k, i]
            x[k] = x0[k]

        started = _now()
        ok = True
        if move == MOVE_LANGEVIN:
            for step in range(n_steps):
                if s > 0:
                    draw_partners(batch_uniforms[b, step * s:(step + 1) * s], i, pool, scratch, chosen)
                ok = particle_force(x, i, positions, chosen, s, kernel, delta0, confinement, False, force)
                if not ok:
                    break
                for k in range(d):
                    x[k] = x[k] + dt * force[k] + langevin_scale * noise[b, step, k]
        else:
            for k in range(d):
                p[k] = momenta[b, k]
            if s == 0:
                ok = particle_force(x, i, positions, chosen, 0, kernel, delta0, confinement, unsplit, force)
                if ok:
                    for step in range(n_steps):
                        for k in range(d):
                            p[k] = p[k] + 0.5 * dt * force[k]
                        for k in range(d):
                            x[k] = x[k] + dt * p[k] / mass
                        ok = particle_force(x, i, positions, chosen, 0, kernel, delta0, confinement, unsplit, force)
                        if not ok:
                            break
                        for k in range(d):
                            p[k] = p[k] + 0.5 * dt * force[k]
            else:
                for step in range(n_steps):
                    draw_partners(batch_uniforms[b, step * s:(step + 1) * s], i, pool, scratch, chosen)
                    ok = particle_force(x, i, positions, chosen, s, kernel, delta0, confinement, False, force)
                    if not ok:
                        break
                    for k in range(d):
                        p[k] = p[k] + 0.5 * dt * force[k]
                    for k in range(d):
                        x[k] = x[k] + dt * p[k] / mass
                    ok = particle_force(x, i, positions, chosen, s, kernel, delta0, confinement, False, force)
                    if not ok:
                        break
                    for k in range(d):
                        p[k] = p[k] + 0.5 * dt * force[k]
        grad_seconds += _now() - started

        decision = 0
        if ok:
            if move == MOVE_HMC:
                kinetic = 0.0
                for k in range(d):
                    kinetic += p[k] * p[k] - momenta[b, k] * momenta[b, k]
                delta = (particle_energy(x, i, positions, kernel, confinement, pair_scale)
                         - particle_energy(x0, i, positions, kernel, confinement, pair_scale)
                         + kinetic / (2.0 * mass))
            elif short_range:
                new_sum, coincident = short_range_sum(x, i, positions, head, nxt, cell_lo, cell_width, cells, delta0)
                if coincident:
                    delta = math.inf
                else:
                    old_sum, _ = short_range_sum(x0, i, positions, head, nxt, cell_lo, cell_width, cells, delta0)
                    delta = pair_scale * (new_sum - old_sum)
            else:
                delta = 0.0
            decision = metropolis(delta, beta, uniforms[b])
            if decision < 0:
                return BLOCK_NAN_ENERGY, b, evolution_time, iterations, grad_seconds

        accepted = decision == 1
        if accepted:
            for k in range(d):
                if not math.isfinite(x[k]):
                    return BLOCK_NON_FINITE_STATE, b, evolution_time, iterations, grad_seconds
            for k in range(d):
                positions[k, i] = x[k]
            if short_range:
                relink(i, x, cell_lo, cell_width, cells, head, nxt, prv, owner)
            if binned:
                new_slot = bin_slot(x[0], bin_lo, bin_hi, bin_width, n_bins)
                old_slot = bin_of[i]
                if new_slot != old_slot:
                    flushed[old_slot] += occupancy[old_slot] * (iterations - last_flush[old_slot])
                    last_flush[old_slot] = iterations
                    flushed[new_slot] += occupancy[new_slot] * (iterations - last_flush[new_slot])
                    last_flush[new_slot] = iterations
                    occupancy[old_slot] -= 1
                    occupancy[new_slot] += 1
                    bin_of[i] = new_slot

        evolution_time += increment
        accepted_out[b] = accepted
        if binned and recording:
            iterations += 1

    return BLOCK_OK, picks.shape[0], evolution_time, iterations, grad_seconds


# ======================== PYTHON SIDE ========================

def kernel_code(kernel: PairKernel) -> Optional[Tuple[int, float]]:
    """(code, delta0) of a kernel with a compiled form, else None."""
    if isinstance(kernel, DysonKernel):
        return KERNEL_DYSON, kernel.delta0
    if isinstance(kernel, SmoothLogKernel):
        return KERNEL_SMOOTH_LOG, 0.0
    return None


def compiled_moves_available(kind: SamplerKind, target) -> bool:
    return (isinstance(target, ParticleSystemTarget) and kind in MOVES
            and kernel_code(target.kernel) is not None)


@dataclass
class BlockResult:
    status: int
    completed: int
    evolution_time: float
    accepted: np.ndarray
    grad_seconds: float


class ParticleBlockRunner:
    """
    Compiled state of one single-particle chain: linked cells, bin arrays and block draws.

    `positions` and the accumulator arrays are shared with the caller and
    updated in place.
    """

    def __init__(self, kind: SamplerKind, target: ParticleSystemTarget, positions: np.ndarray,
                 batch_size: Optional[int], accumulator: Optional[OccupancyAccumulator] = None):
        code = kernel_code(target.kernel)
        if code is None or kind not in MOVES:
            raise ValueError(f"no compiled move for {kind.value} with {type(target.kernel).__name__}")
        self.kind = kind
        self.target = target
        self.positions = positions
        self.move = MOVES[kind]
        self.kernel, self.delta0 = code
        self.accumulator = accumulator

        available = target.n_particles - 1
        batched = kind in (SamplerKind.RB_SHMC_PARTICLE, SamplerKind.RBMC)
        if not batched or batch_size is None or batch_size == available:
            self.batch_size = 0
        elif 1 <= batch_size < available:
            self.batch_size = batch_size
        else:
            raise ValueError(f"batch_size {batch_size} outside [1, {available}]")

        self.short_range = self.move != MOVE_HMC and target.has_short_range
        n, d = target.n_particles, target.dimension
        self.nxt = np.full(n, -1, dtype=np.int64)
        self.prv = np.full(n, -1, dtype=np.int64)
        self.owner = np.zeros(n, dtype=np.int64)
        if self.short_range:
            reach = max(1.0, 2.0 * float(np.max(np.abs(positions))))
            per_axis = max(1, int(MAX_CELLS ** (1.0 / d)))
            self.cells = max(1, min(per_axis, int(2.0 * reach / target.cutoff_radius)))
            self.cell_width = 2.0 * reach / self.cells
            self.cell_lo = -reach
            self.head = np.full(self.cells ** d, -1, dtype=np.int64)
            build_cells(positions, self.cell_lo, self.cell_width, self.cells, self.head, self.nxt, self.prv, self.owner)
        else:
            self.cells, self.cell_width, self.cell_lo = 1, 1.0, 0.0
            self.head = np.full(1, -1, dtype=np.int64)

        if accumulator is not None:
            binning = accumulator.binning
            self.bins = (binning.lo, binning.hi, binning.width, binning.n_bins)
        else:
            self.bins = (0.0, 1.0, 1.0, 1)
            self._no_bins = np.zeros(n + 2, dtype=np.int64)
        self.momentum_scale = math.sqrt(target.mass / target.beta)
        logger.debug(f"Compiled {kind.value} moves: N={n}, batch={self.batch_size or 'full'}, "
                     f"cells={self.cells ** d if self.short_range else 0}")

    def block_capacity(self, n_steps: int) -> int:
        """Iterations per block so one block draws about BLOCK_DRAWS numbers."""
        d = self.target.dimension
        per_iteration = n_steps * (max(self.batch_size, 1) + d) + d + 2
        return max(1, BLOCK_DRAWS // per_iteration)

    def draw(self, streams: ChainStreams, n_iterations: int, n_steps: int):
        d = self.target.dimension
        picks = streams.particle.integers(self.target.n_particles, size=n_iterations)
        if self.move == MOVE_LANGEVIN:
            momenta = np.empty((0, d))
            noise = streams.momentum.standard_normal((n_iterations, n_steps, d))
        else:
            momenta = self.momentum_scale * streams.momentum.standard_normal((n_iterations, d))
            noise = np.empty((0, 0, d))
        if self.batch_size:
            batch_uniforms = streams.batch.random((n_iterations, n_steps * self.batch_size))
        else:
            batch_uniforms = np.empty((n_iterations, 0))
        uniforms = streams.uniform.random(n_iterations)
        return picks, momenta, noise, batch_uniforms, uniforms

    def advance(self, streams: ChainStreams, n_steps: int, dt: float, increment: float,
                evolution_time: float, n_iterations: int, recording: bool) -> BlockResult:
        """Run n_iterations moves with a fixed (L, dt)."""
        picks, momenta, noise, batch_uniforms, uniforms = self.draw(streams, n_iterations, n_steps)
        accepted = np.zeros(n_iterations, dtype=np.bool_)
        target = self.target
        accumulator = self.accumulator
        if accumulator is not None:
            arrays = (accumulator.bin_of, accumulator.occupancy, accumulator.flushed, accumulator.last_flush)
            iterations = accumulator.iterations
        else:
            arrays = (self._no_bins, self._no_bins, self._no_bins, self._no_bins)
            iterations = 0
        bin_lo, bin_hi, bin_width, n_bins = self.bins

        status, completed, evolution_time, iterations, grad_seconds = run_particle_block(
            self.positions, self.move, self.kernel, self.delta0, target.confinement, target.pair_scale,
            target.beta, target.mass, self.short_range,
            n_steps, dt, self.batch_size, increment, evolution_time,
            picks, momenta, noise, batch_uniforms, uniforms,
            self.head, self.nxt, self.prv, self.owner, self.cell_lo, self.cell_width, self.cells,
            accumulator is not None, recording, bin_lo, bin_hi, bin_width, n_bins,
            *arrays, iterations,
            accepted,
        )
        if accumulator is not None:
            accumulator.iterations = int(iterations)
        return BlockResult(int(status), int(completed), float(evolution_time), accepted[:completed],
                           float(grad_seconds))
