"""Exception hierarchy shared by all dvio modules."""


class DvioError(Exception):
    """Base class for all dvio errors."""


class DepthBelowMinimum(DvioError):
    """Projection requested for a point at or behind the camera plane."""


class PointBehindCamera(DvioError):
    """Transformed landmark ended up behind the observing camera."""


class InsufficientSamples(DvioError):
    """IMU preintegration needs at least two samples."""


class NonMonotonicTimestamps(DvioError):
    """Timestamps in a stream must be strictly increasing."""


class BiasUpdateTooLarge(DvioError):
    """First-order bias correction requested outside its validity region."""


class MissingDepth(DvioError):
    """Operation needs a depth measurement that is absent."""


class ZeroTimeDelta(DvioError):
    """Two observations share a timestamp where a time difference is needed."""


class ShiftedDepthInvalid(DvioError):
    """Time-shifting pushed a measured depth at or below the minimum."""


class UnknownStateId(DvioError):
    """A marginalization drop set referenced a state not in the layout."""


class LandmarkBlockNotDiagonal(DvioError):
    """Landmark block of an information matrix has cross terms between
    distinct landmarks; indicates a factor indexing bug."""


class NumericalFailure(DvioError):
    """Non-finite residual or Jacobian encountered during optimization."""

    def __init__(self, message, factor_id=None):
        super().__init__(message)
        self.factor_id = factor_id


class ModeMismatch(DvioError):
    """Landmark parameterization does not match the estimator mode."""


class InsufficientParallax(DvioError):
    """Triangulation geometry too degenerate for a reliable solution."""


class NoObservations(DvioError):
    """Feature initialization requested for a landmark with no observations."""


class UninitializedFeature(DvioError):
    """Problem assembly reached a landmark without an initialized state."""


class NoMatches(DvioError):
    """Trajectory association produced no timestamp pairs."""


class DegenerateGeometry(DvioError):
    """Rigid alignment needs at least three non-collinear paired positions."""


class InvalidSpec(DvioError):
    """A simulator or run specification failed validation."""


class ConfigError(DvioError):
    """Run configuration is malformed or contains unknown keys."""
