"""Shared exception types.

Every failure mode that callers are expected to catch has a named type here;
plain ValueError/TypeError are reserved for programming mistakes that should
never be caught.
"""


class ContractError(ValueError):
    """An argument violated a documented precondition."""


class DimensionError(ContractError):
    """Array shapes are incompatible with the requested operation."""


class DegenerateVectorError(ContractError):
    """A vector with near-zero norm reached a cosine similarity.

    A zero feature vector indicates a bug upstream, so it surfaces instead of
    being clamped away.
    """


class EmptyAlignmentError(RuntimeError):
    """No class is present in the batch and initialized in the bank."""


class StrategyUnavailableError(RuntimeError):
    """A pseudo-labeling strategy was asked to run before it is usable."""


class ConfigError(ValueError):
    """A config file or CLI flag could not be resolved."""


class EvaluationError(RuntimeError):
    """A numeric evaluation produced a non-finite value."""


class DivergedRunError(RuntimeError):
    """Training produced a non-finite loss or gradient.

    Carries the step index and whatever history was accumulated before the
    blow-up so harness code can record the partial run.
    """

    def __init__(self, message: str, step: int, history=None):
        super().__init__(message)
        self.step = step
        self.history = history
