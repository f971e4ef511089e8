"""Exception hierarchy for hsiAdapt.

Errors that reject caller input also subclass ValueError, so code that only
knows about ValueError still catches them.
"""

from typing import Iterable, Optional


class HsiError(Exception):
    """Base class for all hsiAdapt errors."""


class ArgumentError(HsiError, ValueError):
    """An argument is outside its documented range or shape."""


class CubeIngestError(HsiError):
    """A cube header or payload file is missing or unreadable."""


class CubeFormatError(HsiError, ValueError):
    """Header keys, dimensions or payload length do not agree."""


class CubeDataError(HsiError, ValueError):
    """Cube values violate the data invariants (NaN/Inf, range)."""


class SplitError(HsiError, ValueError):
    """A train/test split cannot satisfy the requested per-class count."""

    def __init__(self, message: str, class_name: Optional[str] = None):
        self.class_name = class_name
        if class_name is not None:
            message = f"class '{class_name}': {message}"
        super().__init__(message)


class PairingError(HsiError, ValueError):
    """Block pairs cannot be formed from the given samples."""


class ParseError(HsiError, ValueError):
    """A network config string contains an unknown token."""

    def __init__(self, token: str, position: int, text: str = ""):
        self.token = token
        self.position = position
        message = f"Unknown token '{token}' at position {position}"
        if text:
            message += f" in '{text}'"
        super().__init__(message)


class StructureError(HsiError, ValueError):
    """A network or model structure breaks a layering rule."""


class UnsupportedStructureError(StructureError):
    """The operation is not defined for this structure (e.g. recurrent decoder)."""


class ShapeError(HsiError, ValueError):
    """Tensor shapes do not match what a layer expects."""

    def __init__(self, message: str, layer_id: Optional[str] = None):
        self.layer_id = layer_id
        if layer_id is not None:
            message = f"layer '{layer_id}': {message}"
        super().__init__(message)


class DegenerateSupportError(HsiError, ValueError):
    """A class ratio has no same-class or no different-class support."""


class StateError(HsiError):
    """An object is not in the state the operation requires."""


class ConfigError(HsiError, ValueError):
    """An experiment config field is missing or invalid."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ReportError(HsiError):
    """Run artifacts needed for a report are missing."""

    def __init__(self, missing: Iterable[str]):
        self.missing = list(missing)
        super().__init__("Missing run artifacts: " + ", ".join(self.missing))


class UnknownDatasetError(HsiError, ValueError):
    """Raised when a dataset descriptor key is not known."""

    def __init__(self, key: str, supported: Iterable[str] = ()):
        self.key = key
        message = f"Unknown dataset descriptor: '{key}'"
        supported = list(supported)
        if supported:
            message += f". Supported: {', '.join(supported)}"
        super().__init__(message)


class TrainingError(HsiError):
    """Training diverged (non-finite loss)."""
