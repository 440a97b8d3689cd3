"""Exception hierarchy shared by all modules.

Three top-level families map onto the CLI exit codes: ConfigError (2),
DataError (3), NumericalError (4).
"""


class CohortError(Exception):
    """Base class for all package errors."""


class ConfigError(CohortError):
    """Invalid configuration or arguments."""


class DataError(CohortError):
    """Malformed or inconsistent input data."""


class NumericalError(CohortError):
    """Numerical failure during computation (NaN/Inf, divergence)."""


# --- data errors -----------------------------------------------------------

class ParseError(DataError):
    pass


class MissingColumn(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class MismatchedPatients(DataError):
    pass


class DuplicatePatient(DataError):
    pass


class EmptyResult(DataError):
    pass


class EmptyGraph(DataError):
    pass


class DegenerateGroups(DataError):
    pass


class UnmappedProtein(DataError):
    def __init__(self, proteins):
        self.proteins = list(proteins)
        super().__init__(f"proteins without any mapped gene: {self.proteins}")


class DegenerateCohort(DataError):
    pass


class ClassTooSmall(DataError):
    pass


class SingleClassEval(DataError):
    pass


class SubtypeTooSmall(DataError):
    pass


# --- config errors ---------------------------------------------------------

class DimensionMismatch(ConfigError):
    pass


class NonPositiveSigma(ConfigError):
    pass


class KTooLarge(ConfigError):
    pass


class PerplexityTooLarge(ConfigError):
    pass


class LabelOutOfRange(ConfigError):
    pass


class UntrainedModel(ConfigError):
    pass


class InfeasibleMotif(ConfigError):
    pass


# --- numerical errors ------------------------------------------------------

class ShapeMismatch(NumericalError):
    pass


class NonFiniteDetected(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    pass


class EmptyClusterAfterConvergence(NumericalError):
    pass
