"""Error taxonomy shared across the package."""


class ExeditError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ExeditError):
    """Missing or inconsistent setup: absent weights, bad layer index, bad paths."""


class ComputationError(ExeditError):
    """A numerical stage produced invalid output (NaN/Inf) or diverged."""


class ContractError(ExeditError):
    """A caller violated an API precondition (shape/schedule/key mismatch)."""


class TransportError(ExeditError):
    """A remote backend was unreachable or timed out; safe to retry."""


class GenerationError(ExeditError):
    """A model backend answered but produced unusable output."""
