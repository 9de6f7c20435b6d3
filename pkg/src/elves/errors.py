"""Exception hierarchy shared across the package.

Each failure class maps onto a distinct CLI exit code, so callers can tell
corrupt input apart from I/O trouble or a missing compression backend.
"""

from __future__ import annotations


class ElvesError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ModelFormatError(ElvesError):
    """A model file is not a well-formed tensor container."""

    exit_code = 3


class HeaderParseError(ModelFormatError):
    """The length-prefixed JSON header is missing, truncated or not JSON."""


class OverlapError(ModelFormatError):
    """Two tensors claim overlapping byte extents."""


class UnknownDtypeError(ModelFormatError):
    """A dtype string is unknown and its width cannot be inferred."""


class EndOfStream(ElvesError):
    """A bit reader ran out of bits."""

    exit_code = 3


class CorruptionError(ElvesError):
    """Compressed data failed a structural or checksum test.

    ``stage`` names the part of the pipeline that detected the problem
    (``"archive"``, ``"elf"``, ``"de"``, ``"final"``...) and ``where`` the
    model/layer/block it concerns, when known.
    """

    exit_code = 3

    def __init__(self, message: str, *, stage: str = "archive", where: str | None = None):
        self.stage = stage
        self.where = where
        prefix = f"[{stage}]"
        if where:
            prefix += f" {where}:"
        super().__init__(f"{prefix} {message}")


class UnsupportedBackendError(ElvesError):
    """The final-stage backend id is unknown or its library is missing."""

    exit_code = 5


class ManifestMismatchError(ElvesError):
    """Two models being compared do not share names, dtypes and shapes."""

    exit_code = 6
