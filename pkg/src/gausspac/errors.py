"""Exception types shared across the package."""
import numpy as np


class DegenerateInputError(ValueError):
    """An operation was asked to differentiate or divide at a degenerate point."""


class SingularCovarianceError(np.linalg.LinAlgError):
    """Covariance stayed non positive-definite after the maximum jitter."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/inf during training."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed, from an unknown version, or tampered with."""


class IDXFormatError(ValueError):
    """IDX file has a bad magic number, is truncated, or mismatches its partner."""


class ConfigError(ValueError):
    """Experiment configuration failed validation."""
