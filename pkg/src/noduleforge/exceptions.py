"""Exception types shared across the package."""


class NoduleForgeError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(NoduleForgeError, ValueError):
    """An array dimension is inconsistent with what an operation requires."""


class ArchitectureError(NoduleForgeError, ValueError):
    """A network configuration cannot produce a valid layer stack."""


class TransferError(NoduleForgeError, ValueError):
    """Layer transfer between two models failed; destination is unmodified."""


class ModelFormatError(NoduleForgeError, ValueError):
    """A weights file does not start with the expected magic string."""


class ModelVersionError(NoduleForgeError, ValueError):
    """A weights file declares an unsupported format version."""


class ModelTruncatedError(NoduleForgeError, ValueError):
    """A weights file ended before all declared data could be read."""


class MhdParseError(NoduleForgeError, ValueError):
    """A MetaImage header is missing a key, malformed, or unsupported."""


class CsvParseError(NoduleForgeError, ValueError):
    """A CSV file has a bad header, row, or field; message carries the line."""


class ConfigError(NoduleForgeError, ValueError):
    """A run-configuration document has an unknown key or a bad value."""


class PlacementError(NoduleForgeError, RuntimeError):
    """Phantom object placement failed after the bounded retry budget."""


class TrainingDivergedError(NoduleForgeError, RuntimeError):
    """Training hit a non-finite loss; message names the iteration."""
