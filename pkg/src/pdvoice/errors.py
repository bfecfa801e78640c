"""Exception hierarchy shared by every pdvoice module."""


class PdVoiceError(Exception):
    """Base class for all library errors."""

    exit_code = 4


class InputError(PdVoiceError):
    """Bad or missing input data (maps to CLI exit code 2)."""

    exit_code = 2


class ConfigError(PdVoiceError):
    exit_code = 3


# signal-io
class MissingFile(InputError):
    pass


class MalformedRiff(InputError):
    pass


class UnsupportedEncoding(InputError):
    pass


class EmptyAudio(InputError):
    pass


class ManifestError(InputError):
    pass


# segmentation
class NoSpeechDetected(PdVoiceError):
    pass


class EmptyTimestamps(InputError):
    pass


class TimestampOutOfRange(InputError):
    pass


class EmptyChunk(InputError):
    pass


# autodiff / model
class ShapeMismatch(PdVoiceError):
    pass


class TapeCorrupted(PdVoiceError):
    pass


class SeedShapeMismatch(PdVoiceError):
    pass


class EmptyBatch(PdVoiceError):
    pass


class ChunkTooShort(ConfigError):
    pass


class VersionMismatch(InputError):
    pass


class CorruptFile(InputError):
    pass


# training / evaluation
class TooFewSubjects(PdVoiceError):
    pass


class EmptyTrainingSet(PdVoiceError):
    pass


class EmptyTestSet(PdVoiceError):
    pass


class DivergenceDetected(PdVoiceError):
    pass


class LengthMismatch(PdVoiceError):
    pass


class EvenK(ConfigError):
    pass


# gradcam
class InvalidClass(PdVoiceError):
    pass


class EmptyInput(PdVoiceError):
    pass


class MixedClasses(PdVoiceError):
    pass


class EmptyRecording(PdVoiceError):
    pass


# synthgen / config
class InvalidConfig(ConfigError):
    pass
