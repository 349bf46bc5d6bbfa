"""Exception types shared across the package."""


class FidError(Exception):
    """Base class for all errors raised by this package."""


class ModulationError(FidError):
    """Invalid protocol configuration or bit input."""


class PreambleNotFoundError(FidError):
    """Synchronization failed: no plausible preamble in the capture."""


class MeasurementError(FidError):
    """An estimator cannot produce a meaningful value from the input."""


class TrainingError(FidError):
    """Fingerprint training rejected its input."""


class ScoreError(FidError):
    """Matching score undefined for the given series."""


class ModelFormatError(FidError):
    """Base class for fingerprint file problems."""


class ModelVersionError(ModelFormatError):
    """Fingerprint file written by an incompatible format version."""


class ModelTruncatedError(ModelFormatError):
    """Fingerprint file ends before the declared payload."""


class ModelChecksumError(ModelFormatError):
    """Fingerprint file payload does not match its checksum."""


class UnenrolledDeviceError(FidError):
    """Challenge requested for a device with no stored fingerprint."""


class ProtocolError(FidError):
    """Malformed or oversized wire message."""


class ConditioningWarning(UserWarning):
    """Deconvolution requested for a channel with a near-null frequency bin."""
