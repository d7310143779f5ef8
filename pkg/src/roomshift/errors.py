"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: DataError -> 3, NumericError -> 4
(usage problems exit 2 via argparse).
"""


class RoomshiftError(Exception):
    """Base class for all package errors."""


class DataError(RoomshiftError):
    """Bad input data: files, formats, manifests, configs."""


class NumericError(RoomshiftError):
    """Numeric failure: non-finite samples, losses or gradients."""


class WavFormatError(DataError):
    """RIFF/WAVE container is malformed."""


class UnsupportedCodecError(DataError):
    """WAV is intact but not PCM16 / float32."""


class ManifestError(DataError):
    """Dataset manifest is malformed; carries the offending line number."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"manifest line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class ConfigError(DataError):
    """Training config failed validation; lists every bad field."""

    def __init__(self, field_errors):
        self.field_errors = dict(field_errors)
        lines = "; ".join(f"{k}: {v}" for k, v in sorted(self.field_errors.items()))
        super().__init__(f"invalid config: {lines}")
