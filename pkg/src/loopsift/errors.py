"""Exception classes shared across the package.

The CLI maps these onto exit codes (parse=2, numeric=3, I/O=4), so new
failure modes should subclass one of them rather than raising bare
ValueError/RuntimeError.
"""


class ParseError(ValueError):
    """Malformed input file; message names the file and position."""


class NumericsError(RuntimeError):
    """Numerical failure: singular systems, ambiguous logarithms, etc."""


class DisconnectedGraphError(NumericsError):
    """Pose graph has nodes unreachable from the fixed node."""
