"""Exception hierarchy shared by every pulsefuse module."""


class PulseFuseError(Exception):
    """Base class for all library errors."""


# signal processing
class SignalTooShort(PulseFuseError, ValueError):
    pass


class InvalidBand(PulseFuseError, ValueError):
    pass


class NoPulse(PulseFuseError):
    """No usable pulsatile component (flat, constant or out-of-band signal)."""


class DegenerateInput(PulseFuseError, ValueError):
    pass


class EmptyInput(PulseFuseError, ValueError):
    pass


class TooFewPeaks(PulseFuseError, ValueError):
    pass


# ingest
class BadMagic(PulseFuseError):
    pass


class TruncatedFile(PulseFuseError):
    pass


class NonMonotonicTimestamps(PulseFuseError):
    pass


class MissingLabelFile(PulseFuseError, FileNotFoundError):
    pass


class NoTemporalOverlap(PulseFuseError):
    pass


class LabelGap(PulseFuseError):
    pass


class TooFewFrames(PulseFuseError, ValueError):
    pass


class RecordingTooShort(PulseFuseError, ValueError):
    pass


class EmptyRoi(PulseFuseError, ValueError):
    pass


# synth / config
class InvalidConfig(PulseFuseError, ValueError):
    pass


# classical extractors
class IcaNoConvergence(PulseFuseError):
    pass


class RankDeficient(PulseFuseError):
    pass


# differentiable kernel and models
class ShapeMismatch(PulseFuseError, ValueError):
    pass


class NonFiniteValue(PulseFuseError, FloatingPointError):
    pass


class NotScalarLoss(PulseFuseError, ValueError):
    pass


class MissingGrad(PulseFuseError):
    pass


class OddSpatialDims(PulseFuseError, ValueError):
    pass


# harness
class TooFewSubjects(PulseFuseError, ValueError):
    pass


class NonFiniteLoss(PulseFuseError, FloatingPointError):
    pass


class ConfigMismatch(PulseFuseError, ValueError):
    pass
