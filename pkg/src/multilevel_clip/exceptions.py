"""Exception hierarchy shared across the package."""


class MultiLevelCLIPError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(MultiLevelCLIPError, ValueError):
    """A scalar or configuration parameter is outside its legal range."""


class InvalidInputError(MultiLevelCLIPError, ValueError):
    """An array, record or batch has the wrong shape or content."""


class ConfigurationError(MultiLevelCLIPError, ValueError):
    """A run configuration is inconsistent (e.g. a label missing from a class list)."""


class GenerationError(MultiLevelCLIPError, RuntimeError):
    """A scene could not be generated within the retry budget."""


class ExhaustionError(MultiLevelCLIPError, RuntimeError):
    """Too few valid negative triplets exist for a scene."""


class TrainingDivergedError(MultiLevelCLIPError, FloatingPointError):
    """The training loss became non-finite."""

    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value
