"""Shared exception hierarchy.

Every failure the toolkit raises deliberately derives from DosekitError so the
CLI can map it to an exit status: ValidationError (bad configuration or input
contract) maps to 2, everything else to 3.
"""


class DosekitError(Exception):
    """Base class for all errors raised by dosekit."""


class ValidationError(DosekitError):
    """Invalid configuration, schema, or input-contract violation."""
