"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the driver uses when the error
escapes a subcommand.
"""


class VoiceConversionError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigurationError(VoiceConversionError):
    """A config value, geometry, or component combination is unusable."""

    exit_code = 2


class InvalidInputError(VoiceConversionError):
    """Caller-supplied data violates a precondition."""

    exit_code = 3


class NumericalError(VoiceConversionError):
    """A computation produced non-finite values."""

    exit_code = 4


class CheckpointIntegrityError(VoiceConversionError):
    """A checkpoint file is truncated or fails its checksum."""

    exit_code = 5


class UnsupportedVersionError(ConfigurationError):
    """A persisted file declares a format version this build cannot read."""
