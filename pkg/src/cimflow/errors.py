"""Exception hierarchy shared by all compiler and simulator passes."""


class CimError(Exception):
    """Base class for every error raised by this package."""


class ParseError(CimError):
    """Malformed JSON input or a file that violates its schema."""


class ValidationError(CimError):
    """Structurally well-formed input that breaks a semantic invariant."""


class ShapeError(ValidationError):
    """Tensor shapes incompatible with an operator."""


class CycleError(ValidationError):
    """Computation graph contains a cycle."""


class DomainError(CimError):
    """Argument outside the domain of a hardware query."""


class UnsupportedOp(CimError):
    """Operation requested on a node kind that cannot perform it."""


class CapacityError(CimError):
    """Work does not fit the configured hardware resources."""


class EmitError(CimError):
    """Code generation invoked on inconsistent or unannotated state."""


class FlowSyntaxError(CimError):
    """Flow text violates the grammar.  Carries line/column position."""

    def __init__(self, message, line=None, col=None):
        self.line = line
        self.col = col
        if line is not None:
            message = f"line {line}, col {col}: {message}"
        super().__init__(message)


class SemanticError(CimError):
    """Flow is grammatical but references out-of-range hardware indices."""


class SimulationError(CimError):
    """Base class for functional-simulation failures."""


class UnwrittenCellError(SimulationError):
    """A crossbar read touched cells that were never written."""


class AddressOutOfRange(SimulationError):
    """Buffer access past the configured capacity."""


class ParallelConflictError(SimulationError):
    """Members of a parallel block touch overlapping regions."""
