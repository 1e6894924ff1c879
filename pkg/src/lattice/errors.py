"""Exception types shared across the package."""


class LatticeError(Exception):
    """Base class for errors raised by this package."""


class DataFormatError(LatticeError):
    """An input file is malformed (bad magic, bad line, bad shape)."""


class ConfigError(LatticeError):
    """A run configuration is missing, invalid, or inconsistent."""


class CheckpointError(LatticeError):
    """A checkpoint file cannot be read or does not match the config."""


class GradientError(LatticeError):
    """A gradient became non-finite during training."""


class EvaluationError(LatticeError):
    """Evaluation cannot proceed (e.g. no users with test positives)."""
