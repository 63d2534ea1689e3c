# app/services/__init__.py
"""Services layer: targets, forces, integrators, samplers, diagnostics and the experiment runner"""

from app.services.chain_utils import (
    evolution_time,
    metropolis_accept,
    resample_momentum,
    GradientTimer
)

from app.services.potentials import (
    SplitPotential,
    SmoothPairTarget,
    DysonTarget,
    DoubleWellTarget,
    GmmPosteriorTarget
)

from app.services.samplers import (
    hmc_iteration,
    shmc_iteration,
    rb_shmc_particle_iteration,
    rb_shmc_bayes_iteration,
    rbmc_iteration,
    run_chain
)

from app.services.diagnostics import (
    bin_count,
    relative_error,
    semicircle_reference,
    hamiltonian_error_sweep,
    mode_occupancy
)

__all__ = [
    # Chain utilities
    'evolution_time',
    'metropolis_accept',
    'resample_momentum',
    'GradientTimer',
    # Targets
    'SplitPotential',
    'SmoothPairTarget',
    'DysonTarget',
    'DoubleWellTarget',
    'GmmPosteriorTarget',
    # Samplers
    'hmc_iteration',
    'shmc_iteration',
    'rb_shmc_particle_iteration',
    'rb_shmc_bayes_iteration',
    'rbmc_iteration',
    'run_chain',
    # Diagnostics
    'bin_count',
    'relative_error',
    'semicircle_reference',
    'hamiltonian_error_sweep',
    'mode_occupancy',
]
