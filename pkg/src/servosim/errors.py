"""Exception types shared across the package."""


class ServosimError(Exception):
    """Base class for all package-specific errors."""


class DegeneratePose(ServosimError):
    """Camera pose puts the scene plane through or behind the camera."""


class DimensionMismatch(ServosimError):
    """Two images that must share dimensions do not."""


class ImageTooSmall(ServosimError):
    """Image too small for the requested segmentation grid."""


class SingularSystem(ServosimError):
    """Normal equations of the photometric control law are numerically singular."""


class ProtocolError(ServosimError):
    """Malformed frame or reply on the estimator wire protocol."""


class EstimatorTimeout(ServosimError):
    """Remote estimator did not answer within the deadline."""


class ConnectionLost(ServosimError):
    """Estimator connection closed mid-exchange."""


class EstimatorUnreachable(ServosimError):
    """Remote estimator could not be reached at all."""


class ManifestParseError(ServosimError):
    """Dataset manifest could not be parsed; message names the line and field."""


class ManifestValidationError(ServosimError):
    """Dataset manifest parsed but violates its contract; message lists all violations."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class EmptyLog(ServosimError):
    """Experiment log holds no records."""


class ConfigError(ServosimError):
    """Config or scenario file is missing, malformed, or has unknown fields."""
