"""Exception types raised by the dynamics, linearization, and synthesis layers."""


class MaxlqrError(Exception):
    """Base class for all package-specific failures."""


class NewtonDivergence(MaxlqrError):
    """Implicit step failed to reach the residual tolerance."""


class SingularKKT(MaxlqrError):
    """Step KKT matrix is rank-deficient (usually redundant constraints)."""


class Unactuatable(MaxlqrError):
    """No control/multiplier combination balances gravity at this pose."""


class SingularDynamicsJacobian(MaxlqrError):
    """The implicit-step Jacobian at the reference is numerically singular."""


class InconsistentNominal(MaxlqrError):
    """A reference or nominal trajectory does not satisfy the step equations."""


class SingularInnerMatrix(MaxlqrError):
    """R + B'PB in the unconstrained recursion is numerically singular."""


class SingularGC(MaxlqrError):
    """G*C is numerically singular; multipliers cannot be eliminated."""


class SingularSaddle(MaxlqrError):
    """The constrained gain block system is numerically singular."""


class NoConvergence(MaxlqrError):
    """Infinite-horizon recursion exceeded its iteration budget."""


class ChartSingularity(MaxlqrError):
    """State left the domain of the minimal-coordinate chart."""


class AssemblyFailure(MaxlqrError):
    """Constraint assembly (initial-condition solve) did not converge."""
