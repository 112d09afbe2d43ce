"""Exception hierarchy shared by all hmmbench modules."""


class HmmBenchError(Exception):
    """Base class for library errors."""


class InvalidInputError(HmmBenchError, ValueError):
    """Raised when arguments violate a documented precondition."""


class SpecValidationError(InvalidInputError):
    """A DBN template or its CPDs are inconsistent."""


class NumericalUnderflowError(HmmBenchError, ArithmeticError):
    """An observation has zero probability under the model.

    ``step`` is the time index at which the forward pass collapsed and
    ``sequence`` the index of the offending sequence within a batch.
    """

    def __init__(self, step, sequence=0, message=None):
        self.step = int(step)
        self.sequence = int(sequence)
        if message is None:
            message = (f"observation at step {self.step} of sequence "
                       f"{self.sequence} has zero likelihood under the model")
        super().__init__(message)
