"""Shared exception types.

Every failure mode that callers are expected to branch on gets its own
class here so the CLI can map them onto stable exit codes.
"""


class UnitforgeError(Exception):
    pass


class ShapeError(UnitforgeError):
    """Operand shapes do not conform to an op's signature."""


class DomainError(UnitforgeError):
    """Value outside the mathematical domain of an op (e.g. empty tensor)."""


class ContractError(UnitforgeError):
    """A caller violated an API precondition."""


class ConfigurationError(UnitforgeError):
    """Invalid model / corpus / run configuration."""


class DataError(UnitforgeError):
    """Malformed or inconsistent corpus content."""


class OracleError(UnitforgeError):
    """A verification oracle could not run (non-determinism, size limits)."""


class InfeasibleAlignmentError(UnitforgeError):
    """Target cannot be aligned within the given number of frames."""

    def __init__(self, needed: int, got: int):
        self.needed = needed
        self.got = got
        super().__init__(
            f"target needs at least {needed} frames, got {got}"
        )


class SequencingError(UnitforgeError):
    """Training stages executed out of order."""


class GenerationCapError(UnitforgeError):
    """Autoregressive generation exceeded the configured unit cap."""


class KindMismatchError(UnitforgeError):
    """Checkpoint or corpus kind incompatible with the requested operation."""
