"""Config problems as values.

RunConfig.layered returns a ConfigResult so callers choose between reporting and raising;
modules/exceptions.py holds what the CLI error handler catches.
"""

from dataclasses import dataclass


@dataclass(slots=True, frozen=True)
class InvalidValue:
    field: str
    value: object
    reason: str


@dataclass(slots=True, frozen=True)
class MissingValue:
    field: str
    stage: str


@dataclass(slots=True, frozen=True)
class UnknownKey:
    key: str
    source: str


type ConfigProblem = InvalidValue | MissingValue | UnknownKey


@dataclass(slots=True, frozen=True)
class Ok[T]:
    value: T


@dataclass(slots=True, frozen=True)
class Err:
    error: ConfigProblem


type ConfigResult[T] = Ok[T] | Err


def describe(problem: ConfigProblem) -> str:
    """Render a config problem as a single user-facing line."""
    match problem:
        case InvalidValue(field=name, value=value, reason=reason):
            return f"'{name}' = {value!r} is invalid: {reason}"
        case MissingValue(field=name, stage=stage):
            return f"'{name}' is required for stage '{stage}'"
        case UnknownKey(key=key, source=source):
            return f"unknown config key '{key}' in {source}"
