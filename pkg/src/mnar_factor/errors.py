"""Exception and warning hierarchy for mnar-factor.

Modules declare their own exception classes next to the code that raises
them; every one of them derives from :class:`InputError` or
:class:`NumericalError` so the CLI can map failures to exit codes.
"""


class MnarFactorError(Exception):
    """Base class for all mnar-factor errors."""

    pass


class InputError(MnarFactorError):
    """Raised when input files, configuration or data shapes are unusable."""

    pass


class NumericalError(MnarFactorError):
    """Raised when a numerical procedure cannot produce a valid result."""

    pass


class InsufficientDataError(InputError):
    """Raised when too few observed cells remain for a fit."""

    pass


class MnarFactorWarning(UserWarning):
    """Base class for non-fatal conditions reported by mnar-factor."""

    pass


class ConvergenceWarning(MnarFactorWarning):
    """An iterative solver stopped before meeting its tolerance."""

    pass


class RidgeWarning(MnarFactorWarning):
    """A near-singular matrix was stabilised with a ridge."""

    pass


class ChainStuckWarning(MnarFactorWarning):
    """A Markov chain accepted too few proposals after adaptation."""

    pass


class SmallSampleWarning(MnarFactorWarning):
    """Too few values for the requested estimator; a fallback was used."""

    pass


class LeverageWarning(MnarFactorWarning):
    """A leverage score reached 1 and its correction was capped."""

    pass


class SelectionWarning(MnarFactorWarning):
    """A selection rule fell back to its default or excluded features."""

    pass


EXIT_OK = 0
EXIT_INPUT_ERROR = 2
EXIT_NUMERICAL_ERROR = 3
