"""Error taxonomy shared across the package.

Three kinds of failure are distinguished so the CLI can map them onto exit
codes: bad input or configuration (exit 2), state misuse such as normalizing
twice (programming error, exit 1), and training divergence (exit 1 after the
last good checkpoint was kept).
"""


class InvalidInputError(ValueError):
    """Caller supplied data or configuration that violates a precondition."""


class StateError(RuntimeError):
    """Operation applied in the wrong state (e.g. double normalization)."""


class TrainingDivergedError(RuntimeError):
    """Loss or gradients became non-finite; last checkpoint was preserved."""
