"""Exception types shared across the package.

The CLI maps these onto exit codes: validation failures exit 1, numerical
failures exit 2, I/O problems exit 3.
"""


class ValidationError(ValueError):
    """Malformed input, inconsistent shapes, or violated preconditions."""


class NumericalError(ArithmeticError):
    """Non-finite values produced where finite ones are required."""


class FormatError(ValidationError):
    """A structured file failed to parse; the message names the field."""

    def __init__(self, field: str, detail: str = ""):
        self.field = field
        msg = f"malformed field '{field}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
