"""Exception hierarchy. The three bases map to CLI exit codes:
ConfigError -> 2, DataError -> 3, NumericError -> 4."""


class CardisegError(Exception):
    exit_code = 1


class ConfigError(CardisegError):
    """Invalid arguments, configuration, or call sequencing."""

    exit_code = 2


class DataError(CardisegError):
    """Malformed, inconsistent, or missing input data."""

    exit_code = 3


class NumericError(CardisegError):
    """Numerical failure (NaN loss, divergence)."""

    exit_code = 4


class FormatError(DataError):
    """Malformed file header or sidecar."""


class UnsupportedFormatError(DataError):
    """Recognized file with an unsupported datatype or feature."""


class IntegrityError(DataError):
    """Metadata and payload disagree (size mismatch, corrupted store)."""


class BoundsError(ConfigError):
    """Requested region lies outside the volume."""


class StateError(ConfigError):
    """Operation applied to an object in the wrong state."""


class GeometryError(ConfigError):
    """Anatomy does not fit the requested grid."""


class SpecError(ConfigError):
    """Network specification is internally inconsistent."""


class ShapeError(ConfigError):
    """Tensor or array shape mismatch."""


class EnsembleError(ConfigError):
    """Ensemble members are incompatible."""


class UndefinedMetricError(DataError):
    """Metric has no defined value for the given masks (e.g. empty surface)."""


class MissingArtifactsError(DataError):
    """Experiment directory lacks required artifacts; lists what is missing."""

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing artifacts: " + ", ".join(self.missing))
