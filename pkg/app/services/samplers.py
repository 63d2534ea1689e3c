# app/services/samplers.py
"""
Sampler Service

Chain drivers for HMC, SHMC, RB-SHMC (particle and Bayesian variants) and
RBMC. One iteration proposes a move with dynamics on U1 and accepts it with
min(1, exp(-beta dU2)); HMC instead uses the unsplit U and the full dH.

Single-particle iterations update `positions` in place (one column changes
on acceptance); all-coordinates iterations return a new array.
"""

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import ConfigError, NonFiniteForceError, NumericError
from app.core.rng import ChainStreams
from app.schemas.chain_schemas import ChainRecord, Checkpoint, PhaseState
from app.schemas.sampler_schemas import KIND_LABELS, SamplerKind, SamplerSchedule, UpdateMode
from app.services.chain_utils import GradientTimer, evolution_time_increment, metropolis_accept, resample_momentum
from app.services.diagnostics import Binning, OccupancyAccumulator
from app.services.forces import (
    CellList,
    batch_force_on_particle,
    batch_grad_bayes,
    draw_batch,
    draw_partner_batches,
    full_force_on_particle,
    full_forces,
    pair_forces,
    short_range_U2_delta,
    short_range_energy,
)
from app.services.integrators import LeapfrogStepReport, euler_maruyama, leapfrog, leapfrog_random_batch
from app.services.particle_kernels import (
    BLOCK_FAILURES,
    BLOCK_OK,
    ParticleBlockRunner,
    clock_iterations,
    compiled_moves_available,
)
from app.services.potentials import (
    GmmPosteriorTarget,
    ParticleSystemTarget,
    SplitPotential,
    pair_gradient_at,
)

logger = logging.getLogger(__name__)

ScheduleEntry = Tuple[int, float]
Propagator = Callable[[PhaseState, int, float], LeapfrogStepReport]


@dataclass
class IterationContext:
    """Per-chain state shared by consecutive iterations."""

    streams: ChainStreams
    update_mode: UpdateMode = UpdateMode.SINGLE_PARTICLE
    batch_size: Optional[int] = None
    cell_list: Optional[CellList] = None
    timer: Optional[GradientTimer] = None
    propagator: Optional[Propagator] = None   # replaces leapfrog (exact-flow checks)

    def timed(self, fn):
        return self.timer.wrap(fn) if self.timer is not None else fn


@dataclass
class IterationOutcome:
    positions: np.ndarray
    accepted: bool
    moved: Optional[int] = None    # particle index for single-particle moves


# ======================== SHARED PIECES ========================

def _single_particle(target: SplitPotential, ctx: IterationContext) -> bool:
    return isinstance(target, ParticleSystemTarget) and ctx.update_mode == UpdateMode.SINGLE_PARTICLE


def _u2_delta_particle(i: int, old_x: np.ndarray, new_x: np.ndarray, positions: np.ndarray,
                       target: ParticleSystemTarget, ctx: IterationContext) -> float:
    if not target.has_short_range:
        return 0.0
    if ctx.cell_list is not None:
        return short_range_U2_delta(i, old_x, new_x, positions, target, ctx.cell_list)
    return target.particle_energy(i, new_x, positions, "u2") - target.particle_energy(i, old_x, positions, "u2")


def _u2_delta_configuration(old: np.ndarray, new: np.ndarray, target: SplitPotential) -> float:
    if not target.has_short_range:
        return 0.0
    if isinstance(target, ParticleSystemTarget):
        return short_range_energy(new, target) - short_range_energy(old, target)
    return target.energy_u2(new) - target.energy_u2(old)


def _accept(delta_u2: float, beta: float, ctx: IterationContext) -> bool:
    # The uniform is drawn on every iteration so the stream stays aligned across samplers.
    u = ctx.streams.uniform.random()
    return metropolis_accept(delta_u2, beta, u)


def _propose(state: PhaseState, force_fn, entry: ScheduleEntry, mass: float, ctx: IterationContext) -> LeapfrogStepReport:
    n_steps, dt = entry
    if ctx.propagator is not None:
        return ctx.propagator(state, n_steps, dt)
    return leapfrog(state, ctx.timed(force_fn), n_steps, dt, mass)


def _commit_particle(i: int, new_x: np.ndarray, positions: np.ndarray, ctx: IterationContext) -> None:
    positions[:, i] = new_x
    if ctx.cell_list is not None:
        ctx.cell_list.move(i, new_x)


def _pick_particle(target: SplitPotential, ctx: IterationContext) -> int:
    return int(ctx.streams.particle.integers(target.n_particles))


def _particle_momentum(target: SplitPotential, ctx: IterationContext) -> np.ndarray:
    return resample_momentum(ctx.streams.momentum, 1, target.dimension, target.mass, target.beta)[:, 0]


def _configuration_momentum(target: SplitPotential, ctx: IterationContext) -> np.ndarray:
    return resample_momentum(ctx.streams.momentum, target.n_particles, target.dimension, target.mass, target.beta)


def _finish_particle(i: int, x0: np.ndarray, report: LeapfrogStepReport, positions: np.ndarray,
                     target: ParticleSystemTarget, ctx: IterationContext) -> IterationOutcome:
    if report.aborted:
        _accept(math.inf, target.beta, ctx)
        return IterationOutcome(positions, False, i)
    new_x = report.state.positions
    accepted = _accept(_u2_delta_particle(i, x0, new_x, positions, target, ctx), target.beta, ctx)
    if accepted:
        _commit_particle(i, new_x, positions, ctx)
    return IterationOutcome(positions, accepted, i)


def _finish_configuration(positions: np.ndarray, report: LeapfrogStepReport, target: SplitPotential,
                          ctx: IterationContext) -> IterationOutcome:
    if report.aborted:
        _accept(math.inf, target.beta, ctx)
        return IterationOutcome(positions, False)
    new = report.state.positions
    accepted = _accept(_u2_delta_configuration(positions, new, target), target.beta, ctx)
    return IterationOutcome(new if accepted else positions, accepted)


# ======================== ITERATIONS ========================

def shmc_iteration(positions: np.ndarray, target: SplitPotential, entry: ScheduleEntry,
                   ctx: IterationContext) -> IterationOutcome:
    """
    Splitting HMC: leapfrog on U1 with full forces, then accept with min(1, exp(-beta dU2)).

    In single-particle mode one uniformly chosen particle moves while the
    others stay frozen; otherwise the whole configuration moves.
    """
    if _single_particle(target, ctx):
        i = _pick_particle(target, ctx)
        x0 = positions[:, i].copy()
        start = PhaseState(x0, _particle_momentum(target, ctx))

        def force(x):
            return full_force_on_particle(i, positions, target, x=x)

        return _finish_particle(i, x0, _propose(start, force, entry, target.mass, ctx), positions, target, ctx)

    start = PhaseState(positions, _configuration_momentum(target, ctx))
    if isinstance(target, ParticleSystemTarget):
        def force(q):
            return full_forces(q, target)
    else:
        def force(q):
            return -target.grad_u1(q)
    return _finish_configuration(positions, _propose(start, force, entry, target.mass, ctx), target, ctx)


def rb_shmc_particle_iteration(positions: np.ndarray, target: ParticleSystemTarget, entry: ScheduleEntry,
                               ctx: IterationContext) -> IterationOutcome:
    """SHMC with the interaction sum replaced by a fresh random batch of size s per leapfrog step."""
    n_steps, dt = entry
    batch_size = ctx.batch_size
    if ctx.update_mode == UpdateMode.SINGLE_PARTICLE:
        i = _pick_particle(target, ctx)
        x0 = positions[:, i].copy()
        start = PhaseState(x0, _particle_momentum(target, ctx))

        def force(x, batch):
            return batch_force_on_particle(i, positions, target, batch, x=x)

        def draw(rng):
            return draw_batch(rng, target.n_particles, batch_size, exclude=i)

        report = leapfrog_random_batch(start, ctx.timed(force), ctx.streams.batch, n_steps, dt, target.mass, draw)
        return _finish_particle(i, x0, report, positions, target, ctx)

    start = PhaseState(positions, _configuration_momentum(target, ctx))

    def forces(q, partners):
        return pair_forces(q, target, partners)

    def draw_table(rng):
        return draw_partner_batches(rng, target.n_particles, batch_size)

    report = leapfrog_random_batch(start, ctx.timed(forces), ctx.streams.batch, n_steps, dt, target.mass, draw_table)
    return _finish_configuration(positions, report, target, ctx)


def sand_log_acceptance(target: GmmPosteriorTarget, old: np.ndarray, new: np.ndarray) -> float:
    """dG = G(new) - G(old) with G = N S; equals -beta dU2 because U2 = -S and beta = N."""
    return target.beta * (target.sand(new) - target.sand(old))


def rb_shmc_bayes_iteration(theta: np.ndarray, target: GmmPosteriorTarget, entry: ScheduleEntry,
                            ctx: IterationContext) -> IterationOutcome:
    """Whole-vector move with mini-batch posterior gradients; accepted with min(1, exp(dG))."""
    n_steps, dt = entry
    batch_size = ctx.batch_size
    start = PhaseState(theta, _configuration_momentum(target, ctx))

    def force(q, batch):
        return -batch_grad_bayes(q, target, batch)

    def draw(rng):
        return draw_batch(rng, target.n_data, batch_size)

    report = leapfrog_random_batch(start, ctx.timed(force), ctx.streams.batch, n_steps, dt, target.mass, draw)
    return _finish_configuration(theta, report, target, ctx)


def _rbmc_particle_gradient(i: int, positions: np.ndarray, target: ParticleSystemTarget, ctx: IterationContext):
    def gradient(x):
        batch = draw_batch(ctx.streams.batch, target.n_particles, ctx.batch_size, exclude=i)
        return -batch_force_on_particle(i, positions, target, batch, x=x)
    return gradient


def rbmc_iteration(positions: np.ndarray, target: SplitPotential, entry: ScheduleEntry,
                   ctx: IterationContext) -> IterationOutcome:
    """
    Random batch Monte Carlo: L Euler-Maruyama steps of overdamped Langevin on U1
    (batched interaction gradient, full when batch_size is None), then the U2 test.
    """
    n_steps, dt = entry
    noise = ctx.streams.momentum
    try:
        if _single_particle(target, ctx):
            i = _pick_particle(target, ctx)
            x0 = positions[:, i].copy()
            gradient = ctx.timed(_rbmc_particle_gradient(i, positions, target, ctx))
            x = x0
            for _ in range(n_steps):
                x = euler_maruyama(x, gradient, dt, target.beta, noise)
        else:
            if isinstance(target, ParticleSystemTarget):
                def gradient(q):
                    partners = draw_partner_batches(ctx.streams.batch, target.n_particles, ctx.batch_size)
                    return -pair_forces(q, target, partners)
            else:
                gradient = target.grad_u1
            gradient = ctx.timed(gradient)
            q = positions
            for _ in range(n_steps):
                q = euler_maruyama(q, gradient, dt, target.beta, noise)
    except NonFiniteForceError:
        _accept(math.inf, target.beta, ctx)
        moved = i if _single_particle(target, ctx) else None
        return IterationOutcome(positions, False, moved)

    if _single_particle(target, ctx):
        accepted = _accept(_u2_delta_particle(i, x0, x, positions, target, ctx), target.beta, ctx)
        if accepted:
            _commit_particle(i, x, positions, ctx)
        return IterationOutcome(positions, accepted, i)
    accepted = _accept(_u2_delta_configuration(positions, q, target), target.beta, ctx)
    return IterationOutcome(q if accepted else positions, accepted)


def hmc_iteration(positions: np.ndarray, target: SplitPotential, entry: ScheduleEntry,
                  ctx: IterationContext) -> IterationOutcome:
    """Plain HMC on the unsplit U with the full-Hamiltonian test min(1, exp(-beta dH))."""
    n_steps, dt = entry
    if _single_particle(target, ctx):
        i = _pick_particle(target, ctx)
        x0 = positions[:, i].copy()
        p0 = _particle_momentum(target, ctx)
        partners = np.delete(np.arange(target.n_particles), i)

        def force(x):
            return -(target.confinement_gradient(x) + pair_gradient_at(target.kernel.phi_gradient, x, positions, partners))

        report = leapfrog(PhaseState(x0, p0), ctx.timed(force), n_steps, dt, target.mass)
        if report.aborted:
            _accept(math.inf, target.beta, ctx)
            return IterationOutcome(positions, False, i)
        new = report.state
        delta_h = (target.particle_energy(i, new.positions, positions, "u")
                   - target.particle_energy(i, x0, positions, "u")
                   + target.kinetic_energy(new.momenta) - target.kinetic_energy(p0))
        accepted = _accept(delta_h, target.beta, ctx)
        if accepted:
            _commit_particle(i, new.positions, positions, ctx)
        return IterationOutcome(positions, accepted, i)

    p0 = _configuration_momentum(target, ctx)

    def force(q):
        return -target.grad_u(q)

    report = leapfrog(PhaseState(positions, p0), ctx.timed(force), n_steps, dt, target.mass)
    if report.aborted:
        _accept(math.inf, target.beta, ctx)
        return IterationOutcome(positions, False)
    new = report.state
    delta_h = (target.energy(new.positions) - target.energy(positions)
               + target.kinetic_energy(new.momenta) - target.kinetic_energy(p0))
    if math.isnan(delta_h):
        delta_h = math.inf
    accepted = _accept(delta_h, target.beta, ctx)
    return IterationOutcome(new.positions if accepted else positions, accepted)


ITERATION_HANDLERS: Dict[SamplerKind, Callable[..., IterationOutcome]] = {
    SamplerKind.HMC: hmc_iteration,
    SamplerKind.SHMC: shmc_iteration,
    SamplerKind.RB_SHMC_PARTICLE: rb_shmc_particle_iteration,
    SamplerKind.RB_SHMC_BAYES: rb_shmc_bayes_iteration,
    SamplerKind.RBMC: rbmc_iteration,
}


# ======================== CHAIN DRIVER ========================

def _validate_pairing(kind: SamplerKind, target: SplitPotential, schedule: SamplerSchedule) -> None:
    if kind == SamplerKind.RB_SHMC_PARTICLE and not isinstance(target, ParticleSystemTarget):
        raise ConfigError("rb_shmc_particle needs a particle-system target")
    if kind == SamplerKind.RB_SHMC_BAYES and not isinstance(target, GmmPosteriorTarget):
        raise ConfigError("rb_shmc_bayes needs a posterior target")
    if kind in (SamplerKind.RB_SHMC_PARTICLE, SamplerKind.RB_SHMC_BAYES) and schedule.batch_size is None:
        raise ConfigError(f"{kind.value} requires batch_size")
    if schedule.batch_size is None:
        return
    if kind == SamplerKind.RB_SHMC_BAYES:
        population = target.n_data
    elif kind in (SamplerKind.RB_SHMC_PARTICLE, SamplerKind.RBMC) and isinstance(target, ParticleSystemTarget):
        population = target.n_particles - 1
    else:
        return
    if schedule.batch_size > population:
        raise ConfigError(f"{kind.value}: batch_size {schedule.batch_size} exceeds {population}")


class _ChainLog:
    """Checkpoint, sample and bin bookkeeping shared by the per-iteration and compiled loops."""

    def __init__(self, record: ChainRecord, accumulator: Optional[OccupancyAccumulator],
                 checkpoint_times: Sequence[float], sample_every: int, start: float):
        self.record = record
        self.accumulator = accumulator
        self.pending = sorted(checkpoint_times)
        self.sample_every = sample_every
        self.start = start

    def checkpoints(self, n: int, evolution_time: float) -> None:
        while self.pending and evolution_time >= self.pending[0]:
            self.pending.pop(0)
            accumulator = self.accumulator
            self.record.checkpoints.append(Checkpoint(
                iteration=n,
                evolution_time=evolution_time,
                cpu_time_s=time.perf_counter() - self.start,
                counts=accumulator.counts() if accumulator is not None else None,
                total=accumulator.iterations * accumulator.n_particles if accumulator is not None else 0,
            ))

    def sample(self, n: int, positions: np.ndarray) -> None:
        if n % self.sample_every == 0:
            self.record.samples.append(positions.copy())
            self.record.sample_iterations.append(n)


def _run_iterations(handler, target: SplitPotential, schedule: SamplerSchedule,
                    positions: np.ndarray, ctx: IterationContext, log: _ChainLog, include_burnin: bool) -> float:
    record, accumulator = log.record, log.accumulator
    evolution_time = 0.0
    for n in range(1, schedule.n_iterations + 1):
        entry = schedule.entry(n, evolution_time)
        try:
            outcome = handler(positions, target, entry, ctx)
        except ValueError as exc:
            raise NumericError(f"{record.label}: {exc}", iteration=n) from exc
        positions = outcome.positions
        if outcome.accepted and not np.all(np.isfinite(positions)):
            raise NumericError(f"{record.label}: non-finite state after an accepted move", iteration=n)

        evolution_time += evolution_time_increment(entry[0], entry[1], target.n_particles)
        record.accept_flags.append(outcome.accepted)

        if accumulator is not None:
            if outcome.accepted:
                if outcome.moved is not None:
                    accumulator.move(outcome.moved, positions[0, outcome.moved])
                else:
                    accumulator.reset_positions(positions[0])
            if include_burnin or n > schedule.n_burnin:
                accumulator.record()

        log.checkpoints(n, evolution_time)
        log.sample(n, positions)
    return evolution_time


def _run_compiled(kind: SamplerKind, target: ParticleSystemTarget, schedule: SamplerSchedule,
                  positions: np.ndarray, streams: ChainStreams, timer: GradientTimer, log: _ChainLog,
                  include_burnin: bool) -> float:
    """
    Single-particle moves in compiled blocks.

    A block ends where the per-iteration loop would act between iterations:
    a phase change, the end of burn-in, a sample or a checkpoint.
    """
    record = log.record
    runner = ParticleBlockRunner(kind, target, positions, schedule.batch_size, log.accumulator)
    total = schedule.n_iterations
    evolution_time = 0.0
    n = 0
    while n < total:
        step = schedule.phase(n + 1, evolution_time)
        last_phase = step is None
        step = step or schedule.steps[-1]
        increment = evolution_time_increment(step.n_steps, step.dt, target.n_particles)

        limit = min(total - n, runner.block_capacity(step.n_steps), log.sample_every - n % log.sample_every)
        recording = include_burnin or n >= schedule.n_burnin
        if not recording:
            limit = min(limit, schedule.n_burnin - n)
        if not last_phase and step.until_iteration is not None:
            limit = min(limit, step.until_iteration - n)
        if not last_phase and step.until_evolution_time is not None:
            limit = clock_iterations(evolution_time, increment, step.until_evolution_time, True, limit)
        if log.pending:
            limit = clock_iterations(evolution_time, increment, log.pending[0], False, limit)

        result = runner.advance(streams, step.n_steps, step.dt, increment, evolution_time, limit, recording)
        record.accept_flags.extend(result.accepted.tolist())
        timer.seconds += result.grad_seconds
        if result.status != BLOCK_OK:
            raise NumericError(f"{record.label}: {BLOCK_FAILURES[result.status]}", iteration=n + result.completed + 1)
        n += result.completed
        evolution_time = result.evolution_time
        log.checkpoints(n, evolution_time)
        log.sample(n, positions)
    return evolution_time


def run_chain(
    kind: SamplerKind,
    target: SplitPotential,
    schedule: SamplerSchedule,
    streams: ChainStreams,
    label: Optional[str] = None,
    update_mode: UpdateMode = UpdateMode.SINGLE_PARTICLE,
    binning: Optional[Binning] = None,
    include_burnin: bool = False,
    checkpoint_times: Sequence[float] = (),
    sample_every: int = 1,
    propagator: Optional[Propagator] = None,
) -> ChainRecord:
    """
    Run burn-in plus n_samples iterations and collect the chain record.

    Single-particle moves on a kernel with a compiled form run in numba blocks;
    everything else, and any run with a custom propagator, goes one iteration
    at a time through ITERATION_HANDLERS.

    Args:
        kind: sampler to run
        target: split potential the sampler targets
        schedule: (L, dt) phases, batch size, iteration counts
        streams: the chain's seeded generators
        label: record label, defaults to the sampler's display name
        update_mode: single-particle or all-coordinates moves
        binning: when set, bin-count coordinate 0 of every particle at every iteration
        include_burnin: whether burn-in iterations enter the bin counts
        checkpoint_times: evolution times at which to snapshot the counts
        sample_every: keep every k-th configuration
        propagator: replaces leapfrog in SHMC proposals

    Returns:
        ChainRecord

    Raises:
        NumericError: on NaN energies or a non-finite state, with the iteration index
    """
    _validate_pairing(kind, target, schedule)
    timer = GradientTimer()
    positions = np.array(target.sample_initial(streams.init), dtype=float)
    single = _single_particle(target, IterationContext(streams, update_mode))

    accumulator = OccupancyAccumulator(binning, positions[0]) if binning is not None else None
    record = ChainRecord(label=label or KIND_LABELS[kind], n_particles=target.n_particles,
                         n_burnin=schedule.n_burnin)
    compiled = single and propagator is None and compiled_moves_available(kind, target)

    logger.info(f"Starting {record.label} chain: {schedule.n_iterations} iterations, "
                f"mode={update_mode.value}, batch={schedule.batch_size}, compiled={compiled}")
    start = time.perf_counter()
    log = _ChainLog(record, accumulator, checkpoint_times, sample_every, start)
    if compiled:
        evolution_time = _run_compiled(kind, target, schedule, positions, streams, timer, log, include_burnin)
    else:
        cell_list = None
        if single and target.has_short_range and target.cutoff_radius is not None:
            cell_list = CellList(positions, target.cutoff_radius)
        ctx = IterationContext(streams, update_mode, schedule.batch_size, cell_list, timer, propagator)
        evolution_time = _run_iterations(ITERATION_HANDLERS[kind], target, schedule, positions, ctx,
                                         log, include_burnin)

    record.cpu_time_s = time.perf_counter() - start
    record.grad_time_s = timer.seconds
    record.evolution_time = evolution_time
    if accumulator is not None:
        histogram = accumulator.histogram()
        record.counts = histogram.counts
        record.total = histogram.total
        record.overflow = histogram.overflow
    logger.info(f"Finished {record.label}: acceptance={record.acceptance_rate:.4f}, "
                f"T_E={evolution_time:.4f}, cpu={record.cpu_time_s:.2f}s, grad={record.grad_time_s:.2f}s")
    return record
