"""Exception types shared across the workbench.

Every anticipated failure mode raises one of these rather than a bare
ValueError so callers (and the CLI) can distinguish usage errors from bugs.
"""


class GprinvError(Exception):
    """Base class for all workbench errors."""


# --- argument / configuration validation -----------------------------------

class OutOfRange(GprinvError, ValueError):
    """A scalar argument lies outside its documented valid interval."""


class InvalidRange(GprinvError, ValueError):
    """A (low, high) pair is empty, reversed, or otherwise malformed."""


class EmptySpec(GprinvError, ValueError):
    """A collection argument that must be non-empty is empty."""


# --- geometry ----------------------------------------------------------------

class ObjectOutOfBounds(GprinvError, ValueError):
    """A buried object's geometry (after rotation) exits the soil domain."""


# --- simulation ---------------------------------------------------------------

class Instability(GprinvError, RuntimeError):
    """The explicit time-stepping scheme diverged (field blow-up)."""


# --- data handling ------------------------------------------------------------

class TooFewTraces(GprinvError, ValueError):
    """An operation over scan positions needs at least two traces."""


class DegenerateRange(GprinvError, ValueError):
    """Normalization bounds with high <= low."""


class ShapeMismatch(GprinvError, ValueError):
    """Two arrays that must agree in shape do not."""


class CorruptFile(GprinvError, IOError):
    """A file exists but fails header or payload validation."""


class MissingId(GprinvError, KeyError):
    """A sample id is not present in the dataset manifest."""


class DataUnavailable(GprinvError, ValueError):
    """A requested data split or group has no samples."""


# --- numerics / learning -------------------------------------------------------

class OddSpatialDim(GprinvError, ValueError):
    """A pooling step requires even spatial dimensions."""


class UnsupportedKernel(GprinvError, ValueError):
    """A convolution kernel size outside the supported set."""


class NonFinite(GprinvError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class NonFiniteLoss(NonFinite):
    """The training loss became NaN or Inf."""


class IncompatibleCheckpoint(GprinvError, ValueError):
    """A checkpoint's architecture does not match the requested model."""


class UnknownConfigKey(GprinvError, KeyError):
    """A configuration key is not part of the published schema."""


class ZeroDynamicRange(GprinvError, ValueError):
    """A relative-error metric against an all-zero reference."""


# --- warnings -------------------------------------------------------------------

class NoProgress(UserWarning):
    """An optimization run finished without ever improving its start."""
