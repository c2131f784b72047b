"""Exception types shared across the package."""


class FpnkitError(Exception):
    """Base class for errors raised by fpnkit."""


class ConfigurationError(FpnkitError, ValueError):
    """An operation or module was configured inconsistently (bad shapes,
    unsupported option values, invalid presets)."""


class ShapeError(FpnkitError, ValueError):
    """Runtime tensor shapes do not match what an operation requires."""


class TrainingError(FpnkitError, RuntimeError):
    """Training cannot continue (e.g. non-finite gradients)."""
