"""Exception hierarchy shared by every module."""


class PrincipalFlowError(Exception):
    pass


class ConfigurationError(PrincipalFlowError, ValueError):
    """Invalid architecture, integrator or training configuration."""


class ContractError(PrincipalFlowError, ValueError):
    """A precondition on the arguments was violated (shapes, emptiness, ranges)."""


class NumericInputError(PrincipalFlowError, ValueError):
    """Non-finite input handed to a numeric routine."""


class NumericFailureError(PrincipalFlowError, FloatingPointError):
    """A computation produced a non-finite value.

    ``location`` holds the offending point when one is known.
    """

    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


class DivergenceError(NumericFailureError):
    """Integration left the finite range; ``step_index`` is the failing step."""

    def __init__(self, message, step_index=None, location=None):
        super().__init__(message, location=location)
        self.step_index = step_index


class FormatError(PrincipalFlowError, ValueError):
    """A file does not follow its documented layout."""


class ParseError(FormatError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
