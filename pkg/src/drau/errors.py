"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ConfigError(ValueError):
    """Invalid configuration."""


class DegenerateInputError(ValueError):
    """Input has nothing to operate on (empty sequence, fully masked, ...)."""


class VocabLookupError(KeyError):
    """Token or answer id outside the vocabulary."""


class ParseError(ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DivergenceError(RuntimeError):
    """Training produced a non-finite value."""
