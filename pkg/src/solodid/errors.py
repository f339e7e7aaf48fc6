"""Exception types shared across the package."""

from __future__ import annotations


class SolodidError(Exception):
    """Base class for all package errors."""


# ---------------------------------------------------------------------------
# Panel construction
# ---------------------------------------------------------------------------

class PanelError(SolodidError):
    """Invalid panel input or shape."""


class MissingCell(PanelError):
    """Unbalanced input: some (unit, time) pairs never appear.

    The offending pairs are stored on ``pairs``.
    """

    def __init__(self, pairs):
        self.pairs = sorted(pairs)
        shown = ", ".join(f"({u!r}, {t})" for u, t in self.pairs[:8])
        more = "" if len(self.pairs) <= 8 else f" and {len(self.pairs) - 8} more"
        super().__init__(f"missing cells: {shown}{more}")


class DuplicateCell(PanelError):
    """A (unit, time) pair appears more than once in long input."""

    def __init__(self, unit, time):
        self.unit = unit
        self.time = time
        super().__init__(f"duplicate cell ({unit!r}, {time})")


class UnknownTreatedUnit(PanelError):
    """The designated treated unit label is absent from the data."""

    def __init__(self, label):
        self.label = label
        super().__init__(f"treated unit {label!r} not present in the data")


class DegeneratePanel(PanelError):
    """Panel too small for a pre/post comparison.

    Raised when there are fewer than 2 pre-periods, fewer than 1
    post-period, or fewer than 2 control units, or when the treatment
    start falls outside the observed time range.
    """


class EmptyCell(PanelError):
    """A (unit, time) cell holds no micro records."""

    def __init__(self, unit, time):
        self.unit = unit
        self.time = time
        super().__init__(f"cell ({unit!r}, {time}) has no records")


class ZeroWeightCell(PanelError):
    """A (unit, time) cell's sampling weights sum to zero."""

    def __init__(self, unit, time):
        self.unit = unit
        self.time = time
        super().__init__(f"cell ({unit!r}, {time}) has zero total weight")


# ---------------------------------------------------------------------------
# Simplex solver
# ---------------------------------------------------------------------------

class SolverError(SolodidError):
    """Base class for solver errors."""


class NonFiniteInput(SolverError):
    """NaN or infinity in the problem data."""


class NoConvergence(SolverError):
    """Iteration budget exhausted before the duality gap target.

    Carries the best iterate found so the caller can decide whether
    to accept it anyway (``solution`` attribute).
    """

    def __init__(self, solution, message=None):
        self.solution = solution
        super().__init__(
            message
            or f"no convergence: gap {solution.kkt_gap:.3e} after "
            f"{solution.iterations} iterations"
        )


# ---------------------------------------------------------------------------
# Estimation and inference
# ---------------------------------------------------------------------------

class SolverFailure(SolodidError):
    """An estimator's internal weight program failed to converge."""


class RankDeficientDesign(SolodidError):
    """Collinear regression design; offending columns are named."""

    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"rank-deficient design, offending columns: {self.columns}")


class SingularGram(SolodidError):
    """Gram matrix of the regression design is singular."""


class TooFewControls(SolodidError):
    """Not enough control units for placebo reassignment."""


class EmptyResampledCell(SolodidError):
    """Block resampling repeatedly produced an unusable draw."""


class DegenerateDensity(SolodidError):
    """Kernel density estimate vanished at the evaluation point."""


# ---------------------------------------------------------------------------
# CLI / configuration
# ---------------------------------------------------------------------------

class ConfigError(SolodidError):
    """Malformed study configuration file."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"config key {key!r}: {message}")


class IncompatibleFlags(SolodidError):
    """Mutually incompatible command-line options."""
