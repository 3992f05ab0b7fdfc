"""Exception types shared across the package."""


class QuantKanError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(QuantKanError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(QuantKanError, ValueError):
    """An operation was called outside its contract (e.g. non-scalar backward)."""


class DecompositionError(QuantKanError, ArithmeticError):
    """A matrix factorization failed; the message names the failing pivot."""


class ParseError(QuantKanError, ValueError):
    """Malformed external input (bit tokens, IDX files, config files)."""


class ConfigError(QuantKanError, ValueError):
    """Unsupported or inconsistent experiment configuration."""


class CheckpointError(QuantKanError, RuntimeError):
    """Checkpoint payload is missing, corrupt, or from an unknown version."""


class TrainingDiverged(QuantKanError, RuntimeError):
    """Training produced a non-finite loss; the message names the first bad tensor."""
