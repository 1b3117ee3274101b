from __future__ import annotations


class CogplantError(Exception):
    """Base error. ``code`` is the stable machine-readable reason."""

    def __init__(self, code: str, message: str | None = None) -> None:
        super().__init__(message or code)
        self.code = code


class ModelError(CogplantError):
    pass


class ParseError(ModelError):
    def __init__(self, code: str, offset: int, message: str | None = None) -> None:
        super().__init__(code, message or f"{code} at byte {offset}")
        self.offset = offset


class BrokerError(CogplantError):
    pass


class AgentError(CogplantError):
    pass


class HistoryError(CogplantError):
    pass


class PipelineError(CogplantError):
    pass


class AuthError(CogplantError):
    pass


class UsageError(CogplantError):
    pass
