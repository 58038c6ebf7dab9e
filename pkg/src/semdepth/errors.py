"""Exception types shared across the package.

Validation problems subclass ``ValueError`` so callers (and the CLI exit-code
mapping) can treat them uniformly; runtime failures subclass ``RuntimeError``.
"""


class ValidationError(ValueError):
    """Bad input, bad configuration, or a broken shape contract."""


class ConfigError(ValidationError):
    """Malformed run configuration."""


class AdapterError(RuntimeError):
    """An external backend was unavailable or returned unusable output."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class StageError(RuntimeError):
    """Wraps an error raised inside one pipeline stage, naming that stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
