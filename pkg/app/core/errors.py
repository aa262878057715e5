from __future__ import annotations

from typing import Any, Dict, Optional


class DfkdError(ValueError):
    """Base error; `detail` is the human-readable reason."""

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ShapeError(DfkdError):
    pass


class SpecError(DfkdError):
    pass


class ConfigError(DfkdError):
    pass


class CheckpointError(DfkdError):
    pass


class NonFiniteLossError(DfkdError):
    def __init__(self, detail: str, snapshot: Optional[Dict[str, Any]] = None):
        super().__init__(detail)
        self.snapshot: Dict[str, Any] = dict(snapshot or {})


class RunAbortedError(DfkdError):
    def __init__(self, detail: str, report: Any = None, snapshot: Optional[Dict[str, Any]] = None):
        super().__init__(detail)
        self.report = report
        self.snapshot: Dict[str, Any] = dict(snapshot or {})


def require_shape(name: str, actual, expected) -> None:
    if tuple(actual) != tuple(expected):
        raise ShapeError(f"{name}: expected shape {tuple(expected)}, got {tuple(actual)}")
