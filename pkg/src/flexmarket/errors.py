"""Exception types shared across the package."""


class FlexmarketError(Exception):
    """Base class for all library errors."""


class SchemaError(FlexmarketError):
    """Input file or record does not match the expected schema."""


class StructureError(FlexmarketError):
    """Network, attachment, or cross-reference data is structurally invalid."""


class ContractError(FlexmarketError, ValueError):
    """Caller violated an argument contract (shape, dimension, range)."""


class DomainError(FlexmarketError, ValueError):
    """Evaluation requested outside a function's declared domain."""


class GameConditionError(FlexmarketError):
    """Market parameters violate an existence, monotonicity, or step-size condition."""


class DegenerateInstanceError(FlexmarketError):
    """Instance admits no meaningful efficiency comparison."""


class SolverError(FlexmarketError):
    """Numerical solve failed to produce a certified answer."""


class InfeasibleProgramError(SolverError):
    """Constraint system admits no feasible point.

    ``block`` names the constraint group diagnosed as the cause
    ("caps", "equality", "network").
    """

    def __init__(self, message: str, block: str | None = None):
        super().__init__(message)
        self.block = block


class ProjectionFailureError(SolverError):
    """Feasible-set projection did not reach an optimal certificate."""
