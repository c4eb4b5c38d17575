"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """A precondition or shape contract was broken by the caller."""


class DegenerateInputError(ContractViolation):
    """Input is mathematically degenerate (e.g. a zero-norm vector)."""


class IntegrityError(RuntimeError):
    """A checkpoint failed validation. ``tensor`` names the offending entry, if any."""

    def __init__(self, message, tensor=None):
        super().__init__(message)
        self.tensor = tensor


class ParseError(ValueError):
    """A data or config file could not be parsed.

    ``location`` is a human-readable position such as ``"line 4"`` or
    ``"byte 16"``.
    """

    def __init__(self, message, location=None):
        if location is not None:
            message = f"{message} ({location})"
        super().__init__(message)
        self.location = location
