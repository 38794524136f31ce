"""Exception hierarchy shared by all pmbnn modules.

Every domain failure raises a subclass of :class:`PmbnnError` so the CLI can
map any library error to exit code 1 with a module-qualified message.
"""


class PmbnnError(Exception):
    """Base class for all pmbnn domain errors."""


# --- signal ingestion / filtering ---------------------------------------

class MalformedHeader(PmbnnError):
    """CSV header does not match the required schema."""


class MalformedRow(PmbnnError):
    """CSV row cannot be parsed or has neither vo2 nor hr."""


class NonMonotonicTime(PmbnnError):
    """Sample times are not strictly increasing."""


class NonPositiveSignal(PmbnnError):
    """vo2 or hr value is zero or negative where present."""


class InsufficientSamples(PmbnnError):
    """Too few samples to resample or segment a signal."""


class WindowTooLarge(PmbnnError):
    """Filter window exceeds the segment length."""


class BadWindow(PmbnnError):
    """Filter window is even or too small for the polynomial order."""


# --- physiological model -------------------------------------------------

class NonPositiveVo2(PmbnnError):
    """Logarithmic hemodynamic relations require vo2 > 0."""


class InvertedPressures(PmbnnError):
    """Systolic pressure below diastolic pressure."""


class Singularity(PmbnnError):
    """The heart-rate dynamics denominator 1 - l5*g(vo2) is (near) zero."""


class LengthMismatch(PmbnnError):
    """Paired series or parameter structures have different lengths."""


class SegmentTooShort(PmbnnError):
    """A segment is too short for the requested operation."""


# --- network / optimization ---------------------------------------------

class BadBounds(PmbnnError):
    """Lower bound not strictly below upper bound."""


class OutOfBounds(PmbnnError):
    """A parameter value falls outside its (lo, hi) box."""


class NonFiniteLoss(PmbnnError):
    """Loss evaluated to NaN or infinity."""


class NonFiniteGradient(PmbnnError):
    """A gradient entry is NaN or infinite."""


class InvalidStep(PmbnnError):
    """Finite-difference step size must be positive."""


# --- statistics ----------------------------------------------------------

class EmptySeries(PmbnnError):
    """Operation requires a non-empty (or longer) series."""


class EmptyInput(PmbnnError):
    """Summary statistics require at least one value."""


class ConstantReference(PmbnnError):
    """R^2 undefined: reference series has zero variance."""


class AllZeroDifferences(PmbnnError):
    """Wilcoxon test undefined: every paired difference is zero."""


class ZeroVariance(PmbnnError):
    """Effect size undefined: paired differences have zero variance."""


class DegenerateDesign(PmbnnError):
    """Regression design matrix is rank-deficient or invalid."""


class IoFailure(PmbnnError):
    """Report or manifest could not be written."""
