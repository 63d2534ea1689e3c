# app/services/presets.py
"""
Built-in experiment presets.

Each preset is a plain config dictionary validated through the same models
as a user config, so every value can be overridden by copying the output of
`presets show <id>` into a file.
"""

import copy
import logging
from typing import Any, Dict, List, Tuple

from app.core.errors import ConfigError
from app.schemas.experiment_schemas import ExperimentConfig

logger = logging.getLogger(__name__)


# ======================== SCHEDULES ========================

# Dyson phases: (L, dt) until the given iteration
RB_SHMC_DYSON_STEPS = [
    {"n_steps": 100, "dt": 2e-4, "until_iteration": 100_000},
    {"n_steps": 20, "dt": 2e-4, "until_iteration": 400_000},
    {"n_steps": 10, "dt": 1e-4},
]
RBMC_DYSON_STEPS = [{"n_steps": 10, "dt": 1e-4}]
RBMC_V2_DYSON_STEPS = [
    {"n_steps": 100, "dt": 1e-4, "until_iteration": 200_000},
    {"n_steps": 20, "dt": 1e-4, "until_iteration": 800_000},
    {"n_steps": 10, "dt": 1e-4},
]

# Iterations each Dyson sampler needs to reach T_E = 25.6 with N = 500
DYSON_ITERATIONS = {
    "RB-SHMC": 10_000_000,
    "RBMC": 12_800_000,
    "RBMC-v2": 10_400_000,
}

DYSON_CHECKPOINTS = [1.0, 2.0, 4.0, 6.4, 7.6, 12.0, 18.0, 25.6]


def _dyson_sampler(label: str, kind: str, steps: List[Dict[str, Any]]) -> Dict[str, Any]:
    return {
        "kind": kind,
        "label": label,
        "update_mode": "single_particle",
        "record_samples": False,
        "schedule": {"steps": steps, "batch_size": 1, "n_samples": DYSON_ITERATIONS[label], "n_burnin": 0},
    }


# Test example with N = 500, dt = 0.02: L=100 adds 0.004 to T_E per iteration, L=10 adds 0.0004;
# every run ends just past T_E = 1000
def _test_example_sampler(label: str, steps: List[Dict[str, Any]], n_samples: int) -> Dict[str, Any]:
    return {
        "kind": "rb_shmc_particle",
        "label": label,
        "update_mode": "single_particle",
        "record_samples": False,
        "schedule": {"steps": steps, "batch_size": 1, "n_samples": n_samples, "n_burnin": 0},
    }


# ======================== PRESETS ========================

PRESETS: Dict[str, Tuple[str, Dict[str, Any]]] = {
    "dyson-rbshmc": (
        "Dyson Brownian motion, N=500, RB-SHMC with the three-phase (L, dt) schedule, semicircle reference",
        {
            "experiment": "dyson",
            "seed": 1,
            "dyson": {"n_particles": 500, "delta0": 0.01, "weight": 1.0},
            "samplers": [_dyson_sampler("RB-SHMC", "rb_shmc_particle", RB_SHMC_DYSON_STEPS)],
            "histogram": {"lo": -1.6, "hi": 1.6, "n_bins": 64},
            "reference": {"kind": "semicircle"},
            "checkpoints": DYSON_CHECKPOINTS,
        },
    ),
    "dyson-compare": (
        "Dyson Brownian motion: RB-SHMC vs RBMC vs RBMC-v2 up to T_E = 25.6",
        {
            "experiment": "dyson",
            "seed": 1,
            "dyson": {"n_particles": 500, "delta0": 0.01, "weight": 1.0},
            "samplers": [
                _dyson_sampler("RB-SHMC", "rb_shmc_particle", RB_SHMC_DYSON_STEPS),
                _dyson_sampler("RBMC", "rbmc", RBMC_DYSON_STEPS),
                _dyson_sampler("RBMC-v2", "rbmc", RBMC_V2_DYSON_STEPS),
            ],
            "histogram": {"lo": -1.6, "hi": 1.6, "n_bins": 64},
            "reference": {"kind": "semicircle"},
            "checkpoints": DYSON_CHECKPOINTS,
            "n_workers": 3,
        },
    ),
    "test-example": (
        "Smooth interacting system, N=500, s=1, dt=0.02: L=100, L=10 and L=100 -> 10 after T_E=100",
        {
            "experiment": "test_example",
            "seed": 3,
            "test_example": {"n_particles": 500, "alpha": 1.0, "beta": 1.0, "init_bounds": [-10.0, 10.0]},
            "samplers": [
                _test_example_sampler("L100", [{"n_steps": 100, "dt": 0.02}], 250_500),
                _test_example_sampler("L10", [{"n_steps": 10, "dt": 0.02}], 2_502_000),
                _test_example_sampler("adaptive", [
                    {"n_steps": 100, "dt": 0.02, "until_evolution_time": 100.0},
                    {"n_steps": 10, "dt": 0.02},
                ], 2_277_000),
            ],
            "histogram": {"lo": -3.0, "hi": 3.0, "n_bins": 60, "include_burnin": True},
            "reference": {
                "kind": "hmc",
                "hmc_schedule": {"steps": [{"n_steps": 25, "dt": 0.01}], "n_samples": 4000, "n_burnin": 200},
            },
            "checkpoints": [10.0, 30.0, 60.0, 100.0, 300.0, 1000.0],
        },
    ),
    "double-well": (
        "1-D double well, lambda=0.05: SHMC vs HMC, L=40, dt=0.05, 1e5 samples",
        {
            "experiment": "double_well",
            "seed": 5,
            "double_well": {"beta": 1.0, "barrier_scale": 20.0, "half_width": 1.0, "split_fraction": 0.05},
            "samplers": [
                {"kind": "shmc", "schedule": {"steps": [{"n_steps": 40, "dt": 0.05}], "n_samples": 100_000}},
                {"kind": "hmc", "schedule": {"steps": [{"n_steps": 40, "dt": 0.05}], "n_samples": 100_000}},
            ],
            "histogram": {"lo": -2.0, "hi": 2.0, "n_bins": 80},
            "reference": {"kind": "gibbs"},
        },
    ),
    "gmm-rbshmc": (
        "Two-location Gaussian mixture posterior, RB-SHMC with s=10, L dt = 0.4 d_w, dt=0.001",
        {
            "experiment": "gmm",
            "seed": 7,
            "gmm": {"n_data": 100, "theta_true": [0.0, 2.0], "data_seed": 2024},
            "samplers": [
                {
                    "kind": "rb_shmc_bayes",
                    "trajectory_factor": 0.4,
                    "schedule": {"steps": [{"n_steps": 1, "dt": 0.001}], "batch_size": 10,
                                 "n_samples": 10_000, "n_burnin": 1000},
                },
            ],
        },
    ),
    "gmm-compare": (
        "Gaussian mixture posterior: HMC (L dt = 2 d_w, dt=0.01) vs SHMC vs RB-SHMC (s=10, L dt = 0.4 d_w, dt=0.001)",
        {
            "experiment": "gmm",
            "seed": 7,
            "gmm": {"n_data": 100, "theta_true": [0.0, 2.0], "data_seed": 2024},
            "samplers": [
                {"kind": "hmc", "trajectory_factor": 2.0,
                 "schedule": {"steps": [{"n_steps": 1, "dt": 0.01}], "n_samples": 10_000, "n_burnin": 1000}},
                {"kind": "shmc", "trajectory_factor": 0.4,
                 "schedule": {"steps": [{"n_steps": 1, "dt": 0.001}], "n_samples": 10_000, "n_burnin": 1000}},
                {"kind": "rb_shmc_bayes", "trajectory_factor": 0.4,
                 "schedule": {"steps": [{"n_steps": 1, "dt": 0.001}], "batch_size": 10,
                              "n_samples": 10_000, "n_burnin": 1000}},
            ],
        },
    ),
    "error-sweep": (
        "Random-batch Hamiltonian error rates: N=50, s=1, T=1, dt = 2^-4 .. 2^-9, 1000 replicas",
        {
            "experiment": "error_sweep",
            "seed": 11,
            "error_sweep": {
                "n_particles": 50, "horizon": 1.0, "n_replicas": 1000, "batch_size": 1,
                "dt_values": [2.0 ** -k for k in range(4, 10)],
                "fourth_moment_horizons": [1.0, 4.0],
            },
        },
    ),
}


def list_presets() -> List[Tuple[str, str]]:
    """(id, description) pairs in definition order."""
    return [(preset_id, description) for preset_id, (description, _) in PRESETS.items()]


def preset_payload(preset_id: str) -> Dict[str, Any]:
    if preset_id not in PRESETS:
        known = ", ".join(PRESETS)
        raise ConfigError(f"unknown preset '{preset_id}' (known: {known})")
    return copy.deepcopy(PRESETS[preset_id][1])


def get_preset(preset_id: str) -> ExperimentConfig:
    """Validated config of a built-in preset."""
    from app.services.experiments import parse_config

    return parse_config(preset_payload(preset_id))
