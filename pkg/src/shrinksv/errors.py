"""Exception types shared across the pipeline."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A value went non-finite or a norm collapsed to zero."""


class DegenerateInputError(ValueError):
    """Input has no usable spread: zero power, constant scores, empty batch."""


class ConfigurationError(ValueError):
    """A configuration key or corpus layout is missing or invalid."""


class AlignmentError(ValueError):
    """Two score or trial sequences do not line up."""


class WavFormatError(ValueError):
    """A WAV file uses an encoding this reader does not accept."""


class TrialParseError(ValueError):
    """A trial-list line could not be parsed."""

    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno
