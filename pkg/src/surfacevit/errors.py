"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors exit 2 (argparse),
numeric failures 3, I/O and validation failures 4.
"""


class ShapeError(ValueError):
    """Array dimensions do not agree with the declared contract."""


class ValidationError(ValueError):
    """Structurally well-formed input violates a semantic constraint."""


class ParseError(ValueError):
    """Malformed file content; message carries line/offset context."""


class StructureError(ValueError):
    """Mesh connectivity violates a topological requirement."""


class ResourceLimitError(ValueError):
    """Requested construction exceeds the configured resource guard."""


class StateError(RuntimeError):
    """Operation requires state that has not been initialized."""


class TrainingDivergence(RuntimeError):
    """Loss became non-finite; message names the failing iteration."""
