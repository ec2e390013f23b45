"""Exception hierarchy shared by all crispedge modules."""


class CrispEdgeError(Exception):
    """Base class for all crispedge errors."""


class ShapeError(CrispEdgeError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(CrispEdgeError):
    """Numeric input lies outside an operation's domain."""


class ContractError(CrispEdgeError):
    """An API precondition was violated by the caller."""


class TopologyError(CrispEdgeError):
    """A network topology references sources that do not resolve."""


class ParseError(CrispEdgeError):
    """A file could not be decoded; message includes the byte offset."""


class ValidationError(CrispEdgeError):
    """Decoded file content violates its format contract."""


class TrainingError(CrispEdgeError):
    """Training diverged; message reports epoch and batch."""


class ConfigError(CrispEdgeError):
    """A configuration key or value is unknown or invalid."""
