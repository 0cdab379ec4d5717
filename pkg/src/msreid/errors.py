"""Exception types shared across the package; each maps to a CLI exit code."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""

    exit_code = 2

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ManifestError(ValueError):
    """Malformed manifest content."""

    exit_code = 2

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class NonFiniteLossError(RuntimeError):
    exit_code = 4

    def __init__(self, term, value):
        super().__init__(f"non-finite loss term '{term}' = {value}")
        self.term = term
        self.value = value


class CheckpointMismatchError(RuntimeError):
    exit_code = 5
