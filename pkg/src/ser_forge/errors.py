"""Exception hierarchy shared by every ser_forge module."""


class SerForgeError(Exception):
    """Base class for all toolkit errors."""


class ParseError(SerForgeError, ValueError):
    """Malformed WAV or checkpoint bytes."""


class UnsupportedFormat(SerForgeError, ValueError):
    pass


class EmptyAudio(SerForgeError, ValueError):
    pass


class TooShort(SerForgeError, ValueError):
    """Input shorter than one analysis window or receptive field."""


class TooSmall(SerForgeError, ValueError):
    pass


class DegenerateFilter(SerForgeError, ValueError):
    pass


class BadStats(SerForgeError, ValueError):
    pass


class ShapeError(SerForgeError, ValueError):
    pass


class NotScalar(SerForgeError, ValueError):
    pass


class ConfigError(SerForgeError, ValueError):
    pass


class TokenOverflow(SerForgeError, ValueError):
    pass


class LabelError(SerForgeError, ValueError):
    pass


class EmptySplit(SerForgeError, ValueError):
    pass


class VersionError(SerForgeError, ValueError):
    pass


class DuplicateId(SerForgeError, ValueError):
    pass


class TooFew(SerForgeError, ValueError):
    pass


class EmptyEval(SerForgeError, ValueError):
    pass


class DivergenceError(SerForgeError, FloatingPointError):
    """Raised when a training step would produce NaN/Inf parameters."""
