"""Typed error taxonomy shared across the package.

Every hard failure raised by library code derives from GrassfuseError so
callers (in particular the CLI) can map failures onto exit codes without
string matching.  Soft conditions (clamping, non-convergence with a usable
iterate, degenerate sequences) are reported as flags on return values, not
exceptions.
"""

from __future__ import annotations


class GrassfuseError(Exception):
    """Base class for all library errors."""


class ConfigError(GrassfuseError):
    """Invalid or inconsistent run configuration."""


class NumericalError(GrassfuseError):
    """Base class for numerical failures during computation."""


class DimensionMismatchError(ConfigError):
    """Operands have incompatible shapes for the requested operation."""


class RankDeficientError(NumericalError):
    """A matrix required to have full column rank does not."""


class ConvergenceFailureError(NumericalError):
    """An underlying decomposition failed to converge."""


class NotSymmetricError(NumericalError):
    """Input violated the symmetry precondition."""


class NotPositiveDefiniteError(NumericalError):
    """Input violated the positive-definiteness precondition."""


class EmptyResultError(NumericalError):
    """An operation produced no usable output (e.g. no atoms survived)."""


class CutLocusError(NumericalError):
    """Logarithm requested at or beyond the cut locus."""


class InvalidPError(ConfigError):
    """Requested subspace dimension is out of range."""


class InsufficientAtomsError(NumericalError):
    """Fewer atoms survived orthonormalization than the layer needs."""


class ChainMismatchError(ConfigError):
    """Stacked block dimensions do not chain."""


class LabelOutOfRangeError(ConfigError):
    """A class label falls outside [0, C)."""


class NonFiniteGradientError(NumericalError):
    """A gradient contained NaN or Inf; the step was aborted."""


class RetractionFailureError(NumericalError):
    """A manifold retraction could not be completed."""


class EmptyBatchError(ConfigError):
    """An operation over a batch received no elements."""


class SeparationFailureError(NumericalError):
    """Could not draw sufficiently separated class subspaces."""


class ParseError(GrassfuseError):
    """A file could not be parsed; carries file and line context."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc = f" ({loc})"
        super().__init__(f"{message}{loc}")
        self.path = path
        self.line = line


class InconsistentWidthError(ParseError):
    """Rows in a sequence file disagree on their width."""


class ShapeMismatchError(ConfigError):
    """Checkpoint and dataset/model shapes disagree."""
