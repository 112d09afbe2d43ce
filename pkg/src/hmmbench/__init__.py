"""Hidden Markov model benchmark: synthetic DBN data, discretization, HMM training and evaluation."""

__version__ = "0.1.0"

from .data import SequenceDataset, read_dataset, write_dataset  # noqa: E402
from .errors import (HmmBenchError, InvalidInputError, NumericalUnderflowError,  # noqa: E402
                     SpecValidationError)

__all__ = [
    "__version__",
    "SequenceDataset",
    "read_dataset",
    "write_dataset",
    "HmmBenchError",
    "InvalidInputError",
    "NumericalUnderflowError",
    "SpecValidationError",
]
