"""Exception types shared across the package."""


class FormatError(ValueError):
    """Malformed binary container (IDX file or model checkpoint).

    `offset` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CalibrationError(RuntimeError):
    """A calibration target is unattainable or a calibrated table is inconsistent."""


class ConfigError(ValueError):
    """Invalid or unknown experiment configuration."""
