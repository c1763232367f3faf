"""Exception types shared across the toolkit."""


class PcdiagError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(PcdiagError):
    """Operand shapes are incompatible with the requested operation."""


class CountError(PcdiagError):
    """A requested count (samples, neighbors, scales) exceeds what is available."""


class GuardError(PcdiagError):
    """A numeric guard tripped (e.g. division by a near-zero denominator)."""


class ContractError(PcdiagError):
    """A caller violated an operation's precondition."""


class SpecError(PcdiagError):
    """A network spec is structurally invalid."""


class ConfigError(PcdiagError):
    """An experiment config is missing fields or contains invalid values."""


class FormatError(PcdiagError):
    """A file does not carry the expected magic/version."""


class CorruptionError(PcdiagError):
    """A file is truncated or fails its integrity check."""


class ParseError(PcdiagError):
    """A text input could not be parsed; message carries the line number."""


class MaskError(PcdiagError):
    """A foreground/background mask is missing or one-sided."""


class CalibrationError(PcdiagError):
    """The noise-scale calibration could not bracket its target distance."""


class ReliabilityError(PcdiagError):
    """Too few attacks succeeded for the robustness average to be comparable."""


class DivergenceError(PcdiagError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"training diverged (non-finite loss) at epoch {epoch}")


class DegeneracyError(PcdiagError):
    """A point cloud is degenerate (e.g. all points coincident)."""
