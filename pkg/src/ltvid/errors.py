"""Exception hierarchy shared by all ltvid modules."""


class LtvidError(Exception):
    """Base class for errors raised by ltvid."""


class DataError(LtvidError, ValueError):
    """Input data is malformed or insufficient for the requested fit."""


class NumericalError(LtvidError, ArithmeticError):
    """A numerical routine failed (singular matrix, non-convergence, ...)."""


class RankDeficient(NumericalError):
    """Regressor matrix is (numerically) rank deficient; regularize instead."""


class InsufficientExcitation(DataError):
    """Stacked state/input regressor does not have full column rank."""


class IllPosed(DataError):
    """Identification problem has no unique minimizer."""


class InfeasibleSegmentation(DataError):
    """Requested segmentation cannot be realized on the data."""


class SingularInnovation(NumericalError):
    """Innovation covariance S = C P C' + R2 is singular."""


class SingularSum(NumericalError):
    """Covariance sum P + Sigma0 is singular in a prior update."""


class SingularPredictedCov(NumericalError):
    """Predicted covariance is singular during smoothing."""


class DegenerateWeights(NumericalError):
    """All particle likelihoods vanished at some time step."""


class MaxIterations(NumericalError):
    """Iterative solver hit its iteration cap without converging."""


class NotPositiveDefinite(NumericalError):
    """Covariance matrix could not be factorized even after jitter."""


class PhaseUndefined(NumericalError):
    """Phase requested at a point where the amplitude is (numerically) zero."""


class NonPDQuu(NumericalError):
    """Control Hessian Q_uu is not positive definite at some time step."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"Q_uu not positive definite at step {step}")


class LineSearchFailed(NumericalError):
    """No step length produced a cost decrease; ``solution`` holds the best iterate."""

    def __init__(self, message=None, solution=None):
        self.solution = solution
        super().__init__(message or "line search failed")


class SingularCovariance(NumericalError):
    """Covariance required to be positive definite is singular."""
