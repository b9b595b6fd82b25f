"""Exception and warning types shared across the package.

Every failure mode the public API promises is a named class here so
callers (and the CLI exit-code mapper) can discriminate without string
matching.
"""


class DiffRegError(Exception):
    """Base class for all package errors."""


class UsageError(DiffRegError):
    """Invalid arguments, malformed specs, inconsistent configuration."""


class IOFormatError(DiffRegError):
    """File on disk is missing pieces, truncated, or malformed."""


class NumericError(DiffRegError):
    """Degenerate or non-finite numeric state."""


# geometry

class InvalidWeights(UsageError):
    """Correspondence weights are negative or non-finite."""


class DegenerateConfiguration(NumericError):
    """Point configuration does not pin down a rotation (rank < 2)."""


class EmptyAnchors(UsageError):
    """Flow interpolation was given no anchors."""


class KTooLarge(UsageError):
    """Requested more neighbors than reference points."""


class LengthMismatch(UsageError):
    """Paired arrays disagree in length."""


# matrixspace

class NonFiniteInput(NumericError):
    """Matrix entries contain NaN or infinity."""


class ZeroMassInput(NumericError):
    """All entries are zero after clamping and no shift is possible."""


class EmptyGroundTruth(UsageError):
    """Scene pair carries no ground-truth correspondences."""


# diffusion

class TimestepOutOfRange(UsageError):
    """Timestep outside the schedule's valid range."""


class TimestepOrder(UsageError):
    """Reverse update requires destination timestep below source."""


class DegenerateAlphaBar(NumericError):
    """Noise level too low to divide out (1 - alpha_bar ~ 0)."""


class NonFiniteNoise(NumericError):
    """Supplied noise draw contains NaN or infinity."""


class ShapeMismatch(UsageError):
    """Operands disagree in shape."""


# denoiser

class MissingDescriptors(UsageError):
    """Scene pair lacks the descriptors the feature network needs."""


class MissingForwardCache(UsageError):
    """Backward pass given no (or mismatched) forward caches."""


class ParamsFormatError(IOFormatError):
    """Parameter archive is malformed or has an unsupported version."""


# bench

class InfeasibleOverlap(UsageError):
    """Requested overlap fraction cannot be realized for this size."""


class BundleFormatError(IOFormatError):
    """Scene bundle on disk is malformed."""


class EmptyPredictionWarning(UserWarning):
    """Metric evaluated over an empty prediction set (defined as 0)."""
