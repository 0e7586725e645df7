"""Exception hierarchy.

``UserError`` subclasses describe bad input (the CLI maps them to exit code 2);
everything else deriving from ``PkgxError`` is an internal failure.
"""


class PkgxError(Exception):
    pass


class UserError(PkgxError):
    pass


class GraphFormatError(UserError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnknownEntityError(UserError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class InvalidActionError(PkgxError):
    pass


class StepBudgetError(PkgxError):
    pass


class InvalidPathError(PkgxError):
    pass


class TrainingDivergedError(PkgxError):
    pass


class CheckpointError(UserError):
    pass


class FeedbackSchemaError(UserError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DenylistError(FeedbackSchemaError):
    pass


class ClusteringError(UserError):
    pass


class PersonaError(PkgxError):
    pass


class ConfigError(UserError):
    pass


class TransportError(PkgxError):
    pass


class AuthError(TransportError):
    pass


class RateLimitError(TransportError):
    pass


class ResponseParseError(PkgxError):
    pass


class RatingRangeError(ResponseParseError):
    pass


class EmbeddingDimensionError(PkgxError):
    pass


class StatisticsError(UserError, ValueError):
    pass
