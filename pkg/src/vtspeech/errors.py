"""Shared exception types used across the package."""


class VtspeechError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(VtspeechError, ValueError):
    """Array shape, size or divisibility violation."""


class EmptyInputError(VtspeechError, ValueError):
    """Input collection or signal too short/empty to process."""


class DegenerateRangeError(VtspeechError, ValueError):
    """A value range collapsed to a single point (min == max)."""


class CorruptSequenceError(VtspeechError, ValueError):
    """Discrete speech values outside the codebook range."""


class CorruptGridError(VtspeechError, ValueError):
    """Video token values outside the declared codebook size."""


class LayoutError(VtspeechError, ValueError):
    """Sequence layout requirements violated (missing/empty modality)."""


class InfeasibleTimingError(VtspeechError, ValueError):
    """Timing pattern too short for the requested content."""


class FormatError(VtspeechError, ValueError):
    """Malformed file content (alignment TSV, tensor file, config)."""


class ConfigError(VtspeechError, ValueError):
    """Invalid model or run configuration."""


class ContractError(VtspeechError, ValueError):
    """API contract violation (e.g. backward on a non-scalar)."""


class NumericError(VtspeechError, ArithmeticError):
    """Non-finite value produced while checked mode is active."""


class EmptyLossError(VtspeechError, ValueError):
    """Loss requested but no active targets remain."""
