"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: input problems exit 1, model
problems exit 2, violated internal invariants exit 3.
"""


class MolarScanError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class InputError(MolarScanError, ValueError):
    """Bad user-supplied data: images, boxes, manifests, JSON files."""

    exit_code = 1


class VocabularyError(InputError):
    """A label string is not part of a fixed vocabulary."""


class ModelError(MolarScanError):
    """A model artifact failed to load, validate or execute."""

    exit_code = 2

    def __init__(self, message, stage=None):
        if stage:
            message = f"[{stage}] {message}"
        super().__init__(message)
        self.stage = stage


class InvariantError(MolarScanError):
    """An internal consistency check failed."""

    exit_code = 3
