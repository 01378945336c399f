"""Exception hierarchy shared by every module of the lab."""


class LabError(Exception):
    """Base class for all lab errors."""


class ModelError(LabError):
    """Malformed model, parameter outside its box, or dimension mismatch."""


class DegenerateLikelihood(LabError):
    """Every candidate parameter has zero likelihood."""


class HorizonTooShort(LabError):
    """Observation window shorter than the observability horizon."""


class UnobservableParameter(LabError):
    """Observability matrix is rank deficient at this parameter."""


class GridTooSmall(LabError):
    """Quadrature grid loses transition mass from an active node."""


class NoMinorization(LabError):
    """No m-step minorization with positive epsilon exists on the small set."""


class BudgetExceeded(LabError):
    """A sampler or enumeration exceeded its work budget."""


class InsufficientSamples(LabError):
    """Too few regenerations or draws to compute the requested statistic."""


class NotSeparated(LabError):
    """No statistic in the dictionary separates the two laws at this window."""


class IdentityUndefined(LabError):
    """Closed-form identity evaluated where it does not exist (e.g. y = 0)."""


class ConfigError(LabError):
    """Experiment configuration failed schema or semantic validation."""
