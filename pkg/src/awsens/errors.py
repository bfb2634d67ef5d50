"""Exception types shared across the library.

Each error carries the process exit code the CLI maps it to; anything not
listed here exits with code 1.
"""


class AwsensError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class InvalidTree(AwsensError):
    """A scenario tree violates its structural or stochasticity invariants."""

    exit_code = 2


class InvalidParams(AwsensError):
    """Generator or model parameters outside their admissible range."""


class InvalidCoupling(AwsensError):
    """A coupling tree fails structural checks or does not have the right marginals."""


class HorizonMismatch(AwsensError):
    """Two trees with different horizons were passed to a pairwise operation."""


class Infeasible(AwsensError):
    """Transport marginals mismatch beyond tolerance."""


class TooLarge(AwsensError):
    """A brute-force oracle was asked for an instance above its size guard."""

    exit_code = 5


class NotCausal(AwsensError):
    """The coupling is not causal in the required direction."""


class DeltaTooSmall(AwsensError):
    """The injective value encoding collides within floating precision."""


class AmbiguousStopping(AwsensError):
    """Some node has stop value equal to continuation value; the optimal
    stopping time is not unique."""

    exit_code = 3


class NotConvex(AwsensError):
    """Sampled Hessian of the objective violates convexity."""

    exit_code = 4


class MaxIterations(AwsensError):
    """An iterative solver hit its iteration cap before reaching tolerance."""


class DimensionMismatch(AwsensError):
    """Input vectors do not match the model horizon."""


class FlatStep(AwsensError):
    """The tree has an atom with equal consecutive values, which the utility
    sensitivity formula excludes."""
