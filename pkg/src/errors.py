"""Exceptions raised across the token selection package"""


class TokenSelectError(Exception):
    """Base class for every error raised by this package"""


class DimensionError(TokenSelectError, ValueError):
    """Shapes or axes do not agree"""


class DomainError(TokenSelectError, ValueError):
    """A value lies outside an operation's domain"""


class BudgetError(TokenSelectError, ValueError):
    """A retention budget or retained count is out of range"""


class InputError(TokenSelectError, ValueError):
    """Malformed inputs such as non-finite scores or bad labels"""


class SpecError(TokenSelectError, ValueError):
    """A synthetic task spec violates its invariants"""


class ConfigError(TokenSelectError, ValueError):
    """A run configuration is invalid or inconsistent"""


class TapeError(TokenSelectError, RuntimeError):
    """The gradient tape was used incorrectly"""


class IntegrityError(TokenSelectError, OSError):
    """A persisted file failed its magic, version or checksum check"""


class GradcheckError(TokenSelectError, ArithmeticError):
    """Analytic and numerical gradients disagree"""


class PretrainError(TokenSelectError, RuntimeError):
    """The backbone failed to reach the required accuracy

    Args:
        accuracy (float): the final clean-split accuracy
        threshold (float): the accuracy that was required
    """

    def __init__(self, accuracy: float, threshold: float):
        super().__init__(
            f"backbone reached accuracy {accuracy:.4f} "
            f"below the required {threshold:.4f}"
        )
        self.accuracy = accuracy
        self.threshold = threshold
