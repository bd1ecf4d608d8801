"""Exception hierarchy.

Every error raised by the library derives from :class:`CREError`.  The CLI maps
the three families onto exit codes: usage/domain (2), data/schema (3) and
numeric/convergence (4).
"""


class CREError(Exception):
    exit_code = 4


class DomainError(CREError, ValueError):
    """A parameter lies outside its admissible range."""

    exit_code = 2


class ContractError(CREError, ValueError):
    """An input violates a documented precondition (e.g. ordering)."""

    exit_code = 2


class SizeError(CREError, ValueError):
    exit_code = 2


# data / schema family -------------------------------------------------------

class DataError(CREError):
    exit_code = 3


class SchemaError(DataError):
    pass


class ParseError(DataError):
    pass


class ValidationError(DataError):
    pass


class AlignmentError(DataError):
    pass


class ArmError(DataError):
    """A treatment arm is empty or too small for the requested operation."""


# numeric family -------------------------------------------------------------

class NumericalError(CREError):
    exit_code = 4


class SeparationError(NumericalError):
    pass


class RankError(NumericalError):
    pass


class CollinearityError(RankError):
    def __init__(self, message, independent_columns=()):
        super().__init__(message)
        self.independent_columns = tuple(independent_columns)


class LeverageError(NumericalError):
    pass


class SingularityError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass


class RuleGenerationError(NumericalError):
    pass


class SelectionInputError(NumericalError):
    pass


class BootstrapError(NumericalError):
    pass
