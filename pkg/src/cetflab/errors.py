"""Exception hierarchy shared by every module."""


class LabError(Exception):
    """Base class for all errors raised by cetflab."""


class ConfigError(LabError):
    """Invalid configuration or shape mismatch between a network and its input."""


class InputError(LabError, ValueError):
    """Invalid argument value (labels out of range, empty dataset, bad region...)."""


class FormatError(LabError):
    """Corrupt, truncated or foreign binary file."""


class UnsupportedModelError(LabError):
    """The operation needs a network feature (e.g. batch norm) that the model lacks."""
