"""unitforge: a desk-scale speech-generation stack on synthetic corpora.

Reverse-mode autodiff on numpy, exact CTC with brute-force oracles,
AR/NAR unit decoders with mixture-of-experts and text-guided fusion,
CTC-based preference optimization, and a staged multimodal alignment
pipeline, all driven from one CLI.
"""

from .errors import (ConfigurationError, ContractError, DataError,
                     DomainError, GenerationCapError,
                     InfeasibleAlignmentError, KindMismatchError, OracleError,
                     SequencingError, ShapeError, UnitforgeError)
from .tensor import Tensor, backward, fresh_tape, no_grad

__all__ = [
    "ConfigurationError",
    "ContractError",
    "DataError",
    "DomainError",
    "GenerationCapError",
    "InfeasibleAlignmentError",
    "KindMismatchError",
    "OracleError",
    "SequencingError",
    "ShapeError",
    "UnitforgeError",
    "Tensor",
    "backward",
    "fresh_tape",
    "no_grad",
]

__version__ = "0.1.0"
