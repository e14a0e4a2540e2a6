"""Exception hierarchy. Every error carries a process exit code used by the CLI."""


class GLMAlignError(Exception):
    code = 1
    category = "error"


class ConfigError(GLMAlignError):
    code = 3
    category = "config"


class ValidationError(ConfigError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class InputError(GLMAlignError):
    code = 4
    category = "input"


class SequencingError(InputError):
    category = "sequencing"


class NumericError(GLMAlignError):
    code = 6
    category = "numeric"


class FreezeViolation(GLMAlignError):
    code = 7
    category = "freeze"

    def __init__(self, components):
        self.components = list(components)
        super().__init__("frozen component(s) modified: " + ", ".join(self.components))


class CheckpointError(GLMAlignError):
    code = 5
    category = "checkpoint"


class CheckpointVersionError(CheckpointError):
    code = 8


class CheckpointTruncatedError(CheckpointError):
    code = 9


class ConfigHashMismatch(CheckpointError):
    code = 10
