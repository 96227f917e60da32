"""Error hierarchy shared by the simulation modules."""


class LabError(Exception):
    """Base class for every error raised by the laboratory."""


class InvalidConfigurationError(LabError):
    """Phase-space configuration violates an invariant (overlap, NaN)."""


class InvalidParameterError(LabError, ValueError):
    """An argument is outside the supported range."""


class RunawayEvolutionError(LabError):
    """Event-driven evolution exceeded its event budget."""


class SimultaneousContactError(LabError):
    """Three or more particles in contact at the same instant."""


class ConvergenceError(LabError):
    """A quadrature, ODE refinement or energy-drift check failed."""


class AdmissibilityError(LabError):
    """Potential or cross-section outside the admissible class."""


class InsufficientSamplesError(LabError):
    """Not enough data to form the requested estimate."""


class DomainMismatchError(LabError):
    """Two estimates live on incompatible velocity grids."""
