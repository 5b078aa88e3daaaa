"""Exception types shared across the package."""


class GpcountError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(GpcountError, ValueError):
    """Operands have incompatible or invalid shapes."""


class DataDomainError(GpcountError, ValueError):
    """A value lies outside an operation's documented domain."""


class NumericalError(GpcountError, ArithmeticError):
    """A numerical routine failed (e.g. factorization of a non-SPD matrix)."""


class AnnotationError(GpcountError, ValueError):
    """A point annotation is invalid for its image."""


class GenerationError(GpcountError, RuntimeError):
    """A synthetic dataset cannot be generated as requested."""


class ParseError(GpcountError, ValueError):
    """An on-disk artifact could not be parsed."""


class ConfigError(GpcountError, ValueError):
    """A configuration value or file is invalid."""


class StateError(GpcountError, RuntimeError):
    """An operation was attempted in an invalid state (e.g. empty bank)."""


class DegenerateLatentError(GpcountError, ValueError):
    """A latent vector has zero norm and cannot enter kernel computations."""


class ContractError(GpcountError, RuntimeError):
    """An internal invariant was violated; indicates a bug upstream."""


class DivergenceError(GpcountError, RuntimeError):
    """Training produced a non-finite loss."""
