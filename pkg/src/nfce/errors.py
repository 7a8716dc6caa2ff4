"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ``ContractError``/``ValidationError`` -> 1,
``NumericError`` -> 2, ``PersistenceError`` and file-format errors -> 3.
"""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class ValidationError(ContractError):
    """A configuration or sweep failed validation before any compute."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where finite numbers are required."""


class GenerationError(ContractError):
    """Simulated geometry became degenerate (e.g. UE inside the array aperture)."""


class PersistenceError(OSError):
    """Reading or writing an artifact file failed."""

    def __init__(self, message: str, path=None):
        super().__init__(message if path is None else f"{message}: {path}")
        self.path = path


class FormatError(PersistenceError):
    """File does not carry the expected magic bytes."""


class UnsupportedVersionError(FormatError):
    """File magic matched but the format version is not understood."""


class CorruptionError(PersistenceError):
    """File is truncated or internally inconsistent."""

    def __init__(self, message: str, path=None, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message, path)
        self.offset = offset
