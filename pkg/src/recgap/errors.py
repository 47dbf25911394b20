"""Exception types shared across the package."""


class RecgapError(Exception):
    """Base class for all errors raised by recgap."""


class MalformedRow(RecgapError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class EmptyLog(RecgapError):
    pass


class UnknownUser(RecgapError, KeyError):
    pass


class UnknownItem(RecgapError, KeyError):
    pass


class ModelFailure(RecgapError):
    def __init__(self, message: str, model: str | None = None):
        super().__init__(message if model is None else f"[{model}] {message}")
        self.model = model


class SingularSystem(RecgapError):
    pass


class InstanceTooLarge(RecgapError):
    pass


class EmptyRecommendationLog(RecgapError):
    pass


class MissingCell(RecgapError, KeyError):
    pass
