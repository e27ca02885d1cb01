"""Exception hierarchy for :mod:`nullfol`."""


class NullFolError(Exception):
    """Base class for all library errors."""


class GridMismatch(NullFolError, ValueError):
    """Fields living on different grids were combined."""


class NotMeanZero(NullFolError, ValueError):
    """The Laplacian was inverted on a field with nonzero mean."""


class UnsupportedOrder(NullFolError, ValueError):
    """A covariant derivative or Sobolev order beyond the supported depth."""


class DomainError(NullFolError, ValueError):
    """A point lies outside the coordinate domain of the background."""


class OutOfDomain(DomainError):
    """A perturbed-metric evaluation left the kappa-neighbourhood."""


class NoConvergence(NullFolError, RuntimeError):
    """An iterative solve did not reach its tolerance."""


class ProfileError(NullFolError, ValueError):
    """A perturbation profile is malformed or violates its envelopes."""


class StepRejected(NullFolError, RuntimeError):
    """An integrator step produced too much energy above the dealias band."""


class LockstepViolation(NullFolError, RuntimeError):
    """Two trajectories that must share a step sequence diverged."""


class OffGridEvalFailure(NullFolError, RuntimeError):
    """Off-grid spectral evaluation produced non-finite values."""


class NonDiffeo(NullFolError, RuntimeError):
    """A discrete flow map lost orientation or injectivity."""


class HypothesisViolated(NullFolError, RuntimeError):
    """A trajectory does not satisfy the decay hypothesis of a check."""


class EnsembleIncomplete(NullFolError, RuntimeError):
    """Too few runs of an ensemble completed to issue a certificate."""


class ConfigError(NullFolError, ValueError):
    """Invalid or inconsistent run configuration."""
