"""Exception types shared across the somnium package.

Grouped by the pipeline layer that raises them; ``ConfigValidation`` is the
only one the CLI maps to exit code 1 (bad input), everything else is a
runtime failure (exit code 2).
"""


class SomniumError(Exception):
    """Base class for all somnium-specific errors."""


# --- file parsing -----------------------------------------------------------

class TruncatedHeader(SomniumError):
    """EDF input shorter than its declared header."""


class BadCalibration(SomniumError):
    """EDF signal with digital_min == digital_max."""


class NonNumericField(SomniumError):
    """EDF header field that should be numeric but is not."""


class RangeOverflow(SomniumError):
    """Sample outside the declared physical range on EDF write."""


class GapInEpochs(SomniumError):
    """Hypnogram epoch indices are not consecutive from 0."""


class MalformedLine(SomniumError):
    """Hypnogram line does not match ``epoch<TAB>stage``."""


# --- signal processing ------------------------------------------------------

class BadSpec(SomniumError):
    """Filter specification invalid for the given sampling rate."""


class UnstableDesign(SomniumError):
    """Discretized IIR filter has a pole on or outside the unit circle."""


class DegenerateSignal(SomniumError):
    """Constant (or near-constant) signal where variance is required."""


class IntervalOutOfRange(SomniumError):
    """Artifact interval extends beyond the recording."""


class EmptyInput(SomniumError):
    """Empty sequence passed where samples are required."""


class ChannelMissing(SomniumError):
    """Recording lacks one of the four analysis channels."""


# --- autodiff / models ------------------------------------------------------

class ShapeMismatch(SomniumError):
    """Operands with incompatible shapes."""


class EvenKernel(SomniumError):
    """conv1d requires an odd kernel for symmetric same-padding."""


class WindowTooLarge(SomniumError):
    """Pooling window longer than the pooled axis."""


class DegenerateBatch(SomniumError):
    """Batch too small for batch statistics."""


class EmptyBatch(SomniumError):
    """Loss evaluated over zero samples."""


class NonFiniteValue(SomniumError):
    """NaN/Inf produced by a forward op (diagnostic mode)."""


class ConfigInvalid(SomniumError):
    """Model configuration violates its invariants."""


class EmptyClass(SomniumError):
    """A class has no (visible) samples where at least one is required."""


class NonFiniteLoss(SomniumError):
    """Training loss became NaN/Inf."""


class NonFiniteEmission(SomniumError):
    """HMM observation sequence contains NaN/Inf."""


class DegenerateState(SomniumError, Warning):
    """HMM state lost (nearly) all responsibility mass during fitting.

    Also a ``Warning`` category: the fitter re-seeds the state and issues
    this as a warning rather than aborting.
    """


# --- evaluation harness -----------------------------------------------------

class TooFewPatients(SomniumError):
    """Fewer patients than the fold plan needs."""


class SingleClassLabels(SomniumError):
    """Only one class present where a two-class metric is required."""


class DegenerateGroups(SomniumError):
    """ANOVA groups with zero variance everywhere and equal means."""


class PerplexityTooLarge(SomniumError):
    """t-SNE perplexity too large for the number of points."""


class MissingStore(SomniumError):
    """Requested segment store does not exist on disk."""


# --- generator / CLI --------------------------------------------------------

class SpecInvalid(SomniumError):
    """Synthetic-corpus specification violates its invariants."""


class UnknownSubcommand(SomniumError):
    """CLI invoked with a subcommand it does not provide."""


class SerializationError(SomniumError):
    """Saved artifact (report, checkpoint sidecar) cannot be parsed back."""


class ConfigValidation(SomniumError):
    """Run configuration rejected; message names the offending key."""
