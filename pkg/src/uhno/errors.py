"""Shared exception types.

Every module raises these rather than bare ValueError so callers (and the CLI
exit-code mapping) can tell configuration mistakes apart from runtime failures.
"""


class UhnoError(Exception):
    """Base class for all library errors."""


class DimensionError(UhnoError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(UhnoError):
    """A configuration value violates a documented constraint."""


class ContractError(UhnoError):
    """An API contract was violated (wrong call order, stale state, non-scalar loss)."""


class DegenerateReferenceError(UhnoError):
    """A relative metric was asked to normalize by a zero-norm reference."""


class GenerationError(UhnoError):
    """A PDE solver left its validity envelope (CFL violation, blow-up)."""


class TrainingAbort(UhnoError):
    """Training hit a non-finite loss and dumped state."""
