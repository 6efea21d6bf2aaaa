"""Exception hierarchy.

Every error carries a ``category`` used by the command line to pick an exit
code: ``DataError`` (3), ``ModelError`` (4) or ``NumericalError`` (5).
"""


class MPostError(Exception):
    category = "NumericalError"


# data problems ---------------------------------------------------------------

class DataError(MPostError):
    category = "DataError"


class SupportError(DataError):
    """Observation outside the support of the predictive density."""


class InsufficientData(DataError):
    pass


class EmptyDesign(DataError):
    pass


class InsufficientDraws(DataError):
    pass


class DegenerateDraws(DataError):
    pass


class InsufficientChains(DataError):
    pass


# model problems --------------------------------------------------------------

class ModelError(MPostError):
    category = "ModelError"


class DomainError(ModelError):
    """Parameter outside the model's parameter space."""


class SingularDesign(ModelError):
    pass


class NonPDCovariance(ModelError):
    pass


class Separation(ModelError):
    pass


class NoBoundAvailable(ModelError):
    pass


# numerical problems ----------------------------------------------------------

class NumericalError(MPostError):
    category = "NumericalError"


class NotPD(NumericalError):
    pass


class NoConvergence(NumericalError):
    pass


class BatchFailure(NumericalError):
    """Too many chains (or coverage repeats) failed."""
