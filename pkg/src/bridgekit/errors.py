"""Shared exception types.

Invalid arguments raise plain ``ValueError``; these classes cover the
remaining failure modes that callers may want to catch separately.
"""


class InvalidStateError(RuntimeError):
    """Operation called on an object whose state does not permit it."""


class UntrainedEncoderError(InvalidStateError):
    """Prior encoder used in strict mode before being fitted."""


class OracleBoundError(ValueError):
    """Brute-force oracle refused an instance above its enumeration bounds."""


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed, wrong version, or fingerprint-mismatched."""
