"""Exception types shared across the package.

Two broad families matter for the CLI exit-code mapping: DataFormatError
(bad or missing input data) and NumericalError (a computation that cannot
produce a valid result for the given inputs).
"""


class VislamError(Exception):
    """Base class for all package-specific errors."""


class DataFormatError(VislamError):
    """Input data is missing, malformed, or inconsistent."""


class NumericalError(VislamError):
    """A numerical routine cannot produce a valid result."""


class BehindCamera(NumericalError):
    """3D point has non-positive depth in the camera frame."""


class NoConvergence(NumericalError):
    """Iterative undistortion did not converge within the iteration budget."""


class NonMonotonicTimestamp(DataFormatError):
    """Timestamps must be strictly increasing."""


class ExcessiveGap(DataFormatError):
    """Gap between consecutive IMU samples exceeds the allowed maximum."""


class DegenerateGeometry(NumericalError):
    """Observation rays are (near-)parallel; triangulation is ill-posed."""


class NegativeDepth(NumericalError):
    """Triangulated point lies behind one of the observing cameras."""


class SolverDiverged(NumericalError):
    """Nonlinear least-squares solve produced no usable step."""


class NonPositiveDt(DataFormatError):
    """Propagation interval must be positive."""


class DegenerateMotion(NumericalError):
    """All displacement directions are collinear; rotation about that axis
    is unobservable."""


class DegenerateConfiguration(NumericalError):
    """Point set is collinear; rigid alignment is ill-posed."""


class NoOverlap(DataFormatError):
    """Two trajectories share no associable timestamps."""


class InsufficientSpan(DataFormatError):
    """Not enough associated samples to span the requested delta."""


class MissingFile(DataFormatError):
    """A required dataset file does not exist."""


class MalformedRow(DataFormatError):
    """A CSV row could not be parsed."""

    def __init__(self, path, line_number, message):
        self.path = str(path)
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: {message}")


class ConfigError(DataFormatError):
    """Configuration file is invalid (unknown key, bad type, bad value)."""


class AllMeasurementsRejected(NumericalError):
    """Every correspondence failed the chi-square gate."""
