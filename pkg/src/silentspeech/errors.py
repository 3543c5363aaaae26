"""Exception types shared across the package.

Every error raised on purpose derives from :class:`SilentSpeechError` so the
CLI can map failures onto exit codes without catching unrelated bugs.
"""


class SilentSpeechError(Exception):
    """Base class for all deliberate failures."""


class InvalidArgument(SilentSpeechError, ValueError):
    pass


class ChannelNotFound(SilentSpeechError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class EmptyInput(SilentSpeechError, ValueError):
    pass


class InvalidAnnotations(SilentSpeechError, ValueError):
    pass


class NotInVocabulary(SilentSpeechError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class TooShort(SilentSpeechError, ValueError):
    pass


class ShapeError(SilentSpeechError, ValueError):
    pass


class FormatError(SilentSpeechError, ValueError):
    """File does not carry the expected magic number or version."""


class CorruptFile(SilentSpeechError, ValueError):
    """File is truncated or fails its checksum."""


class ConfigError(SilentSpeechError, ValueError):
    pass


class InvalidLabel(SilentSpeechError, ValueError):
    pass


class DivergenceError(SilentSpeechError, ArithmeticError):
    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class InsufficientData(SilentSpeechError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class UnsupportedModel(SilentSpeechError, TypeError):
    pass


class BudgetError(SilentSpeechError, ValueError):
    pass


class EmptyReference(SilentSpeechError, ValueError):
    pass


class LengthMismatch(SilentSpeechError, ValueError):
    pass


class OfflineError(SilentSpeechError, RuntimeError):
    """Raised by the LLM client when networking is disabled."""


class TransportError(SilentSpeechError, RuntimeError):
    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class ProtocolError(SilentSpeechError, RuntimeError):
    pass
