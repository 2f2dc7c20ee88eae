"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, TrainingError -> 3,
TeacherNetworkError -> 4.
"""


class ConfigError(ValueError):
    """Invalid configuration or arguments."""


class SegmentBoundsError(ConfigError):
    pass


class TrainingError(RuntimeError):
    pass


class TeacherError(RuntimeError):
    """A teacher cannot label the given segments."""


class TeacherNetworkError(TeacherError):
    """The VLM endpoint could not be reached at all."""


class MetricError(ValueError):
    pass


class InputError(ValueError):
    """Non-finite or malformed numeric input."""
