"""Exception types shared across the package."""


class QuasirouteError(Exception):
    """Base class for all package errors."""


class InvalidSizeError(QuasirouteError, ValueError):
    pass


class InvalidParameterError(QuasirouteError, ValueError):
    pass


class InvalidInputError(QuasirouteError, ValueError):
    pass


class InvalidSpecError(QuasirouteError, ValueError):
    pass


class DegenerateMetricError(QuasirouteError, ValueError):
    pass


class ShapeError(QuasirouteError, ValueError):
    pass


class DomainError(QuasirouteError, ValueError):
    pass


class ContractError(QuasirouteError, RuntimeError):
    pass


class MaskedActionError(ContractError):
    """An action was applied that the feasibility mask forbids."""


class EnvInvariantError(QuasirouteError, RuntimeError):
    """A reachable non-terminal state has no feasible action."""


class TrainingDivergenceError(QuasirouteError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ParseError(QuasirouteError, ValueError):
    def __init__(self, message, line=None, section=None):
        where = []
        if section is not None:
            where.append(f"section {section}")
        if line is not None:
            where.append(f"line {line}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
        self.line = line
        self.section = section


class UnsupportedFormatError(ParseError):
    pass


class ConfigError(QuasirouteError, ValueError):
    pass
