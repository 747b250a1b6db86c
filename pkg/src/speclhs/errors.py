"""Exception and warning types shared across the package.

Every error carries a short ``tag`` so the CLI can print one machine-parsable
line per failure.
"""


class SamplingError(Exception):
    """Base class for all package errors."""

    @property
    def tag(self) -> str:
        return type(self).__name__


# ingest
class UnreadableFile(SamplingError):
    pass


class GridMismatch(SamplingError):
    pass


class EmptyAfterMask(SamplingError):
    pass


class AllColumnsDegenerate(SamplingError):
    pass


# spectral clustering
class IsolatedNode(SamplingError):
    pass


class EigenFailure(SamplingError):
    pass


class ClusteringError(SamplingError):
    """Raised when k-means cannot produce K non-empty clusters."""


# validity
class SingleCluster(SamplingError):
    pass


# cLHS and allocation
class BudgetExceedsCandidates(SamplingError):
    pass


class BudgetTooSmall(SamplingError):
    pass


class InfeasibleBudget(SamplingError):
    pass


class OverrideInfeasible(SamplingError):
    pass


# reporting and CLI
class MismatchedContext(SamplingError):
    pass


class FileWriteError(SamplingError):
    pass


class MissingClusterModel(SamplingError):
    pass


class MissingDesign(SamplingError):
    pass


class ConfigError(SamplingError):
    pass


class DegenerateGeometryWarning(UserWarning):
    """Duplicate feature vectors collapsed some neighbour distances to zero."""


class ZeroVarianceWarning(UserWarning):
    """A covariate was constant and has been dropped."""
