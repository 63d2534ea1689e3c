# app/services/experiments.py
"""
Experiment Runner Service

Turns a validated ExperimentConfig into targets, references and chain jobs,
runs the chains (in a process pool when more than one worker is allowed)
and hands every result to the artifact writer.
"""

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from app import __version__
from app.core.config import settings
from app.core.errors import ConfigError
from app.core.rng import chain_streams, single_stream
from app.schemas.chain_schemas import ChainRecord
from app.schemas.experiment_schemas import (
    ChainSummary,
    CheckpointSummary,
    ExperimentConfig,
    ExperimentKind,
    HistogramSpec,
    ReferenceKind,
    RunManifest,
    SamplerSpec,
)
from app.schemas.sampler_schemas import SamplerKind, SamplerSchedule, ScheduleStep, UpdateMode
from app.services.artifact_storage import ArtifactWriter, resolve_run_dir, utc_timestamp
from app.services.diagnostics import (
    Binning,
    ReferenceMasses,
    fourth_moment_trace,
    gibbs_reference,
    hamiltonian_error_sweep,
    histogram_from_counts,
    mode_occupancy,
    quartic_growth_bound,
    relative_error,
    semicircle_reference,
)
from app.services.potentials import (
    DoubleWellTarget,
    DysonTarget,
    GmmPosteriorTarget,
    SmoothPairTarget,
    SplitPotential,
    estimate_sand_centers,
    generate_gmm_data,
    residual_barriers,
    sand_height,
    well_geometry,
)
from app.services.samplers import run_chain

logger = logging.getLogger(__name__)

# Bin ranges used when a config gives no histogram block
DEFAULT_HISTOGRAMS = {
    ExperimentKind.TEST_EXAMPLE: HistogramSpec(lo=-3.0, hi=3.0, n_bins=60),
    ExperimentKind.DYSON: HistogramSpec(lo=-1.6, hi=1.6, n_bins=64),
    ExperimentKind.DOUBLE_WELL: HistogramSpec(lo=-2.0, hi=2.0, n_bins=80),
}

# Particle systems: the test example moves every particle at once, Dyson one at a time
DEFAULT_UPDATE_MODES = {
    ExperimentKind.TEST_EXAMPLE: UpdateMode.ALL_COORDINATES,
    ExperimentKind.DYSON: UpdateMode.SINGLE_PARTICLE,
}

DEFAULT_HMC_REFERENCE = SamplerSchedule(
    steps=[ScheduleStep(n_steps=25, dt=0.01)], n_samples=2000, n_burnin=200,
)


# ======================== CONFIG LOADING ========================

def _format_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        location = ".".join(str(part) for part in err["loc"]) or "<root>"
        lines.append(f"{location}: {err['msg']}")
    return "; ".join(lines)


def parse_config(raw: Dict[str, Any]) -> ExperimentConfig:
    """Validate a decoded config; field errors are reported with their locations."""
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {_format_validation_error(exc)}") from exc


def load_config(path: str) -> ExperimentConfig:
    """Read and validate a JSON config file."""
    if not os.path.exists(path):
        raise ConfigError(f"config not found: {path}")
    with open(path, "r", encoding="utf-8") as handle:
        text = handle.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return parse_config(raw)


# ======================== TARGETS & REFERENCES ========================

def build_gmm_target(params) -> Tuple[GmmPosteriorTarget, Dict[str, Any]]:
    """Generate the dataset, place the sand and measure the wells."""
    data = generate_gmm_data(single_stream(params.data_seed), params.n_data, params.theta_true, params.sigma_y_sq)
    base = GmmPosteriorTarget(data, params.sigma1_sq, params.sigma2_sq, params.sigma_y_sq, params.mass,
                              initial_theta=params.initial_theta)
    if params.sand_centers is not None:
        centers = np.asarray(params.sand_centers, dtype=float)
    else:
        centers = estimate_sand_centers(base.log_density, params.bracket_theta1, params.bracket_theta2,
                                        params.grid_resolution, params.inner_points).centers
    geometry = well_geometry(base, centers)
    height = sand_height(geometry.barrier_height, base.beta, params.sand_offset)
    target = base.with_sand(centers, height)
    if target.initial_theta is None:
        target.initial_theta = tuple(geometry.minima[0])
    barriers = residual_barriers(target, geometry.minima)
    details = {
        "sand_centers": centers.tolist(),
        "well_minima": geometry.minima.tolist(),
        "well_distance": geometry.distance,
        "barrier_height": geometry.barrier_height,
        "sand_height": height,
        "residual_barriers": list(barriers),
    }
    logger.info(f"GMM wells: d_w={geometry.distance:.4f}, h_b={geometry.barrier_height:.4f}, "
                f"h_G={height:.4f}, residual barriers={barriers}")
    return target, details


def build_target(config: ExperimentConfig) -> Tuple[SplitPotential, Dict[str, Any]]:
    params = config.params()
    if config.experiment == ExperimentKind.TEST_EXAMPLE:
        return SmoothPairTarget(params.n_particles, params.alpha, params.beta, params.mass,
                                tuple(params.init_bounds)), {}
    if config.experiment == ExperimentKind.DYSON:
        target = DysonTarget(params.n_particles, params.delta0, params.effective_weight, params.mass,
                             tuple(params.init_bounds))
        return target, {"beta": target.beta}
    if config.experiment == ExperimentKind.DOUBLE_WELL:
        target = DoubleWellTarget(params.beta, params.barrier_scale, params.half_width,
                                  params.split_fraction, params.mass, params.initial_position)
        return target, {"barrier_height": target.barrier_height}
    if config.experiment == ExperimentKind.GMM:
        return build_gmm_target(params)
    raise ConfigError(f"experiment '{config.experiment.value}' has no sampling target")


def resolve_binning(config: ExperimentConfig) -> Tuple[Optional[Binning], bool]:
    spec = config.histogram or DEFAULT_HISTOGRAMS.get(config.experiment)
    if spec is None:
        return None, False
    return Binning(spec.lo, spec.hi, spec.n_bins), spec.include_burnin


def hmc_reference(target: SplitPotential, schedule: SamplerSchedule, binning: Binning, seed: int) -> ReferenceMasses:
    """Reference bin masses from a long all-coordinates HMC chain."""
    record = run_chain(SamplerKind.HMC, target, schedule, chain_streams(seed, 0), label="HMC-reference",
                       update_mode=UpdateMode.ALL_COORDINATES, binning=binning, sample_every=max(1, schedule.n_iterations))
    histogram = histogram_from_counts(binning, np.append(record.counts, record.overflow))
    return ReferenceMasses(binning, histogram.frequencies())


def build_reference(config: ExperimentConfig, target: SplitPotential, binning: Optional[Binning]) -> Optional[ReferenceMasses]:
    kind = config.reference_kind
    if kind == ReferenceKind.NONE or binning is None:
        return None
    if kind == ReferenceKind.SEMICIRCLE:
        reference = semicircle_reference(binning.n_bins, binning.lo, binning.hi)
        return reference
    if kind == ReferenceKind.GIBBS:
        if not isinstance(target, DoubleWellTarget):
            raise ConfigError("the gibbs reference needs a one-dimensional double-well target")
        return gibbs_reference(target.potential, target.beta, binning)
    schedule = config.reference.hmc_schedule if config.reference and config.reference.hmc_schedule else DEFAULT_HMC_REFERENCE
    logger.info(f"Running HMC reference chain ({schedule.n_iterations} iterations)")
    return hmc_reference(target, schedule, binning, config.seed + 7919)


# ======================== CHAIN JOBS ========================

@dataclass
class ChainJob:
    label: str
    kind: SamplerKind
    chain_index: int
    seed: int
    target: SplitPotential
    schedule: SamplerSchedule
    update_mode: UpdateMode
    binning: Optional[Binning]
    include_burnin: bool
    checkpoint_times: Sequence[float]
    sample_every: int


def resolve_schedule(spec: SamplerSpec, details: Dict[str, Any]) -> SamplerSchedule:
    """Apply trajectory_factor: L = round(factor * d_w / dt) per phase."""
    if spec.trajectory_factor is None:
        return spec.schedule
    if "well_distance" not in details:
        raise ConfigError("trajectory_factor needs a target with measured wells (gmm)")
    length = spec.trajectory_factor * details["well_distance"]
    steps = [step.model_copy(update={"n_steps": max(1, int(round(length / step.dt)))}) for step in spec.schedule.steps]
    return spec.schedule.model_copy(update={"steps": steps})


def build_jobs(config: ExperimentConfig, target: SplitPotential, details: Dict[str, Any],
               binning: Optional[Binning], include_burnin: bool) -> List[ChainJob]:
    jobs = []
    for spec in config.samplers:
        schedule = resolve_schedule(spec, details)
        update_mode = spec.update_mode or DEFAULT_UPDATE_MODES.get(config.experiment, UpdateMode.ALL_COORDINATES)
        sample_every = spec.sample_every if spec.record_samples else max(1, schedule.n_iterations + 1)
        for chain_index in range(config.n_chains):
            label = spec.display_label if config.n_chains == 1 else f"{spec.display_label}-chain{chain_index}"
            jobs.append(ChainJob(label, spec.kind, chain_index, config.seed + schedule.seed, target, schedule,
                                 update_mode, binning, include_burnin, config.checkpoints, sample_every))
    return jobs


def execute_chain(job: ChainJob) -> ChainRecord:
    return run_chain(job.kind, job.target, job.schedule, chain_streams(job.seed, job.chain_index),
                     label=job.label, update_mode=job.update_mode, binning=job.binning,
                     include_burnin=job.include_burnin, checkpoint_times=job.checkpoint_times,
                     sample_every=job.sample_every)


def run_chains(jobs: List[ChainJob], n_workers: int) -> List[ChainRecord]:
    """Run every job; results keep the job order."""
    workers = max(1, min(n_workers, settings.SHMC_MAX_WORKERS, len(jobs)))
    if workers == 1:
        return [execute_chain(job) for job in jobs]
    logger.info(f"Running {len(jobs)} chains on {workers} workers")
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(execute_chain, jobs))


# ======================== SUMMARIES ========================

def _occupancy_spec(target: SplitPotential, details: Dict[str, Any]):
    if isinstance(target, DoubleWellTarget):
        return np.array([-target.half_width, target.half_width]), target.half_width
    if isinstance(target, GmmPosteriorTarget) and "well_minima" in details:
        return np.asarray(details["well_minima"]), 0.5 * details["well_distance"]
    return None, None


def summarize_chain(job: ChainJob, record: ChainRecord, reference: Optional[ReferenceMasses],
                    target: SplitPotential, details: Dict[str, Any]) -> ChainSummary:
    checkpoints = []
    for point in record.checkpoints:
        error = None
        if reference is not None and point.counts is not None:
            error = relative_error(histogram_from_counts(job.binning, point.counts), reference)
        checkpoints.append(CheckpointSummary(iteration=point.iteration, evolution_time=point.evolution_time,
                                             cpu_time_s=point.cpu_time_s, relative_error=error))
    final_error = None
    if reference is not None and record.counts is not None:
        final_error = relative_error(histogram_from_counts(job.binning, np.append(record.counts, record.overflow)),
                                     reference)

    occupancy = None
    centers, radius = _occupancy_spec(target, details)
    samples = record.post_burnin_samples()
    if centers is not None and samples.size:
        occupancy = mode_occupancy(samples.reshape(samples.shape[0], -1), centers, radius).tolist()

    return ChainSummary(
        label=record.label, kind=job.kind, chain_index=job.chain_index, seed=job.seed,
        n_iterations=record.n_iterations, acceptance_rate=record.acceptance_rate,
        evolution_time=record.evolution_time, cpu_time_s=record.cpu_time_s, grad_time_s=record.grad_time_s,
        relative_error=final_error, mode_occupancy=occupancy, overflow=record.overflow, checkpoints=checkpoints,
    )


def write_chain_artifacts(writer: ArtifactWriter, job: ChainJob, record: ChainRecord,
                          summary: ChainSummary) -> None:
    if record.samples:
        writer.write_samples(record.label, record.sample_iterations, np.stack(record.samples))
    if record.counts is not None and job.binning is not None:
        histogram = histogram_from_counts(job.binning, np.append(record.counts, record.overflow))
        writer.write_table("density", record.label, [job.binning.centers, histogram.density()])
    errors = [c for c in summary.checkpoints if c.relative_error is not None]
    if errors:
        writer.write_table("error_vs_te", record.label, [
            np.array([c.iteration for c in errors]),
            np.array([c.evolution_time for c in errors]),
            np.array([c.relative_error for c in errors]),
        ])


# ======================== ERROR SWEEP ========================

def run_error_sweep(config: ExperimentConfig, writer: ArtifactWriter) -> Dict[str, Any]:
    params = config.params()
    target = SmoothPairTarget(params.n_particles, params.alpha, params.beta, params.mass, tuple(params.init_bounds))
    result = hamiltonian_error_sweep(target, params.horizon, params.dt_values, params.n_replicas,
                                     params.batch_size, single_stream(config.seed, 0),
                                     deterministic=params.deterministic)
    writer.write_table("sweep", "", [result.dt_values, result.strong_errors, result.weak_errors])
    details: Dict[str, Any] = {
        "deterministic": result.deterministic,
        "strong_slope": result.strong_slope,
        "strong_slope_stderr": result.strong_slope_stderr,
        "weak_slope": result.weak_slope,
        "weak_slope_stderr": result.weak_slope_stderr,
    }
    logger.info(f"Error sweep slopes: strong={result.strong_slope:.3f}, weak={result.weak_slope:.3f}")

    traces = []
    for k, horizon in enumerate(sorted(params.fourth_moment_horizons)):
        trace = fourth_moment_trace(target, horizon, float(max(params.dt_values)), params.n_replicas,
                                    single_stream(config.seed, 1 + k), params.batch_size)
        writer.write_table("fourth_moment", f"T{horizon:g}", [trace.times, trace.moments])
        traces.append(trace)
    if len(traces) >= 2:
        c0, holds = quartic_growth_bound(traces[0], traces[-1])
        details["fourth_moment_c0"] = c0
        details["fourth_moment_bound_holds"] = holds
        if not holds:
            logger.warning("fourth moment exceeded the fitted c0 (1 + T^4) envelope")
    return details


# ======================== ENTRY ========================

def run_experiment(config: ExperimentConfig, output_root: Optional[str] = None) -> RunManifest:
    """
    Run every sampler of the config and write its artifacts and manifest.

    Returns:
        The manifest that was written to <run_dir>/manifest.json
    """
    run_dir = resolve_run_dir(config.output_dir, config.experiment.value, output_root)
    writer = ArtifactWriter(run_dir)
    manifest = RunManifest(experiment=config.experiment, version=__version__, created_at=utc_timestamp(),
                           config=config.model_dump(mode="json", exclude_none=True))
    logger.info(f"Experiment '{config.experiment.value}' -> {run_dir}")

    if config.experiment == ExperimentKind.ERROR_SWEEP:
        manifest.details = run_error_sweep(config, writer)
        writer.write_manifest(manifest)
        return manifest

    target, details = build_target(config)
    binning, include_burnin = resolve_binning(config)
    reference = build_reference(config, target, binning)
    if reference is not None:
        writer.write_table("density", "reference", [binning.centers, reference.density()])
        details["reference"] = config.reference_kind.value

    jobs = build_jobs(config, target, details, binning, include_burnin)
    records = run_chains(jobs, config.n_workers)
    for job, record in zip(jobs, records):
        summary = summarize_chain(job, record, reference, target, details)
        manifest.chains.append(summary)
        write_chain_artifacts(writer, job, record, summary)

    manifest.details = details
    writer.write_manifest(manifest)
    return manifest
