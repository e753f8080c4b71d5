"""Exception hierarchy shared by all fedci modules."""


class FedCIError(Exception):
    """Base class for every error raised by fedci."""


class Condition1Violation(FedCIError):
    """A site's per-arm design is rank deficient, so local OLS is not identified.

    Only estimators that need the pooled design to be full rank (gradient
    descent, pooled OLS) remain available.
    """

    def __init__(self, arm, rank, required, site_id=None):
        self.arm = arm
        self.rank = rank
        self.required = required
        self.site_id = site_id
        where = "" if site_id is None else f" at site {site_id}"
        super().__init__(
            f"arm {arm}{where}: design rank {rank} < {required} required for local OLS"
        )


class Condition2Violation(FedCIError):
    """The summed (federated) normal equations are singular."""

    def __init__(self, arm, rank, required):
        self.arm = arm
        self.rank = rank
        self.required = required
        super().__init__(f"arm {arm}: pooled design rank {rank} < {required}")


class EmptyRiskSet(FedCIError):
    """Partial likelihood requested on a sample without events."""


class MonotoneLikelihood(FedCIError):
    """The partial likelihood has no finite maximiser (separation)."""


class NonConvergence(FedCIError):
    """An iterative solver hit its iteration cap."""


class StepSizeTooLarge(FedCIError):
    """Gradient iterations are diverging."""


class SingularInformation(FedCIError):
    """A summed information matrix cannot be inverted."""


class DegenerateWeights(FedCIError):
    """Inverse-variance weights requested with a zero or negative variance."""


class UnknownCause(FedCIError, ValueError):
    """Cause id outside the sample's declared cause set."""


class FederationViolation(FedCIError):
    """Individual-level rows were read outside their owning site."""


class LocalSolverError(FedCIError):
    """A site's local solve failed inside a federated protocol."""

    def __init__(self, site_id, round_index, cause):
        self.site_id = site_id
        self.round_index = round_index
        self.cause = cause
        super().__init__(f"site {site_id}, round {round_index}: {cause!r}")


class TopologyError(FedCIError, ValueError):
    """Invalid peer-to-peer topology (disconnected, bad weights)."""


class ConfigError(ValueError):
    """Invalid experiment configuration; the message starts with the offending key path."""
