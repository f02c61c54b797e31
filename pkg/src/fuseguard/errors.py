# Copyright (c) 2025 Francis Bain
# SPDX-License-Identifier: Apache-2.0

"""Error classes and exit codes shared by every fuseguard module.

Each error carries an exit code for the CLI and a context dictionary that is
attached to the log record when the error is reported.
"""

import logging
from typing import Any, Dict, Optional, Sequence

logger = logging.getLogger(__name__)

EXIT_SUCCESS = 0
EXIT_RUNTIME_ERROR = 1  # any failure while a subcommand runs
EXIT_USAGE_ERROR = 2  # invalid arguments or configuration values


class FuseGuardError(Exception):
    """Base class for fuseguard errors."""

    def __init__(
        self,
        message: str,
        *,
        exit_code: int = EXIT_RUNTIME_ERROR,
        context: Optional[Dict[str, Any]] = None,
    ):
        super().__init__(message)
        self.exit_code = exit_code
        self.context = context or {}

    def log_error(self) -> None:
        """Log the error with context information."""
        logger.error(
            self.args[0],
            extra={
                "error_type": type(self).__name__,
                "exit_code": self.exit_code,
                **self.context,
            },
        )


class ShapeError(FuseGuardError, ValueError):
    """Operands whose shapes do not fit the requested operation."""

    def __init__(
        self,
        message: str,
        *,
        shapes: Sequence[Sequence[int]] = (),
        context: Optional[Dict[str, Any]] = None,
    ):
        ctx = context or {}
        if shapes:
            ctx["shapes"] = [tuple(int(d) for d in s) for s in shapes]
        super().__init__(message, context=ctx)


class GradientError(FuseGuardError):
    """Backward pass misuse or non-finite gradients."""


class DatasetError(FuseGuardError):
    """Invalid dataset spec, malformed sample or missing statistics."""

    def __init__(
        self, message: str, *, path: Optional[str] = None, context: Optional[Dict[str, Any]] = None
    ):
        ctx = context or {}
        if path:
            ctx["path"] = path
        super().__init__(message, context=ctx)


class CheckpointError(FuseGuardError):
    """Missing or corrupt checkpoint, detector or tensor file."""

    def __init__(
        self, message: str, *, path: Optional[str] = None, context: Optional[Dict[str, Any]] = None
    ):
        ctx = context or {}
        if path:
            ctx["path"] = path
        super().__init__(message, context=ctx)


class TrainingDivergedError(FuseGuardError):
    """Loss became NaN or infinite during training."""

    def __init__(
        self,
        message: str = "Training diverged: loss is not finite.",
        *,
        epoch: Optional[int] = None,
        step: Optional[int] = None,
        context: Optional[Dict[str, Any]] = None,
    ):
        ctx = context or {}
        if epoch is not None:
            ctx["epoch"] = epoch
        if step is not None:
            ctx["step"] = step
        super().__init__(message, context=ctx)


class DegenerateInputError(FuseGuardError):
    """Activations that make a similarity estimate undefined."""

    def __init__(
        self, message: str, *, layer: Optional[str] = None, context: Optional[Dict[str, Any]] = None
    ):
        ctx = context or {}
        if layer:
            ctx["layer"] = layer
        super().__init__(message, context=ctx)


class CalibrationError(FuseGuardError):
    """Detector used before calibration, or a threshold that cannot be reached."""


class ConfigError(FuseGuardError):
    """Invalid command-line or configuration value."""

    def __init__(self, message: str, *, context: Optional[Dict[str, Any]] = None):
        super().__init__(message, exit_code=EXIT_USAGE_ERROR, context=context)
