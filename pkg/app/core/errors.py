# app/core/errors.py
"""
Exception hierarchy shared by services and command handlers.

Every surfaced error carries the process exit code the CLI should return,
the same way service functions raise HTTPException with a status code and
let the outer layer turn it into a response.
"""

from typing import Optional

EXIT_OK = 0
EXIT_INVALID_CONFIG = 2
EXIT_NUMERIC_FAILURE = 3


class ShmcError(Exception):
    """Base error with an exit code and a human readable detail."""

    exit_code: int = EXIT_INVALID_CONFIG

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class ConfigError(ShmcError):
    """Invalid configuration, unknown preset or incompatible manifests."""

    exit_code = EXIT_INVALID_CONFIG


class DiagnosticsError(ShmcError):
    """Invalid input to a diagnostic (binning mismatch, short dt ladder, missing modes)."""

    exit_code = EXIT_INVALID_CONFIG


class NumericError(ShmcError):
    """Non-recoverable numeric failure inside a chain."""

    exit_code = EXIT_NUMERIC_FAILURE

    def __init__(self, detail: str, iteration: Optional[int] = None):
        if iteration is not None:
            detail = f"{detail} (iteration {iteration})"
        super().__init__(detail)
        self.iteration = iteration


class NonFiniteForceError(ShmcError):
    """A proposal hit a non-finite force; samplers turn this into a rejection."""

    exit_code = EXIT_NUMERIC_FAILURE
