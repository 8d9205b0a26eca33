"""
Exception types raised across the package.

Every error also derives from the closest builtin, so callers that only know
about ``ValueError`` or ``ArithmeticError`` keep working.
"""


class ConceptDLMError(Exception):
    """Base class for all errors raised by conceptdlm."""


class DimensionError(ConceptDLMError, ValueError):
    """Operand shapes do not agree."""


class NumericError(ConceptDLMError, ArithmeticError):
    """A NaN or infinite value showed up where a finite one is required."""


class ContractError(ConceptDLMError, ValueError):
    """A documented precondition of an operation was violated."""


class GenerationError(ConceptDLMError, RuntimeError):
    """Dataset generation could not satisfy its uniqueness constraints."""


class StalenessError(ConceptDLMError, ValueError):
    """An artifact was produced under a different tokenizer."""


class TransportError(ConceptDLMError, ConnectionError):
    """The teacher endpoint could not be reached after all retries."""


class ConfigError(ConceptDLMError, ValueError):
    """A configuration file or override is invalid."""
