"""Error taxonomy shared by every module.

Each failure mode maps to one exception class so callers (including the
command line front end) can translate outcomes into exit codes without
string matching.
"""


class ChordArcError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ChordArcError, ValueError):
    """Malformed or out-of-range user input (bad curve data, bad radius, ...)."""


class SingularInputError(ChordArcError, ValueError):
    """Input sits on a genuine singularity (point on the curve, coincident source)."""


class ConstructionError(ChordArcError, RuntimeError):
    """A build step could not produce a valid object (guards, parsing, geometry)."""


class ResourceLimitError(ChordArcError, RuntimeError):
    """A configured resource budget (cells, subdivision depth) would be exceeded."""


class InconsistencyError(ChordArcError, RuntimeError):
    """Quantities that must agree by construction failed a consistency check."""
