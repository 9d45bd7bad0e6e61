class ValidationError(ValueError):
    """Bad input: wrong shapes, illegal extents, malformed config or file.

    ``field`` names the offending key/field when one is identifiable.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class FormatError(ValidationError):
    """A file on disk does not match its declared format."""


class NumericError(ArithmeticError):
    """Non-finite loss, failed gradient check and similar numeric failures."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
