"""Error taxonomy shared across the package.

The CLI maps these families onto distinct exit codes, so new error types
should subclass the family they belong to rather than Exception directly.
"""

from __future__ import annotations


class SplitPheError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(SplitPheError):
    """A configuration value is missing, malformed, or inconsistent."""


class CryptoError(SplitPheError):
    """Key material, ciphertext, or encoding is unusable."""


class ScaleError(CryptoError):
    """Fixed-point scales disagree or a ciphertext was scaled twice."""


class MagnitudeError(CryptoError):
    """A value falls outside the range the fixed-point encoding can hold."""


class ProtocolError(SplitPheError):
    """A party received a message it cannot accept in its current state."""


class TransportError(ProtocolError):
    """A frame could not be read or written intact."""


class DataError(SplitPheError):
    """A dataset file is malformed or does not match its declaration."""
