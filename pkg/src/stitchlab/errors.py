"""Exception and warning types shared across the package."""


class StitchlabError(Exception):
    """Base class for all stitchlab errors."""


class ConfigError(StitchlabError):
    """Invalid configuration value (unknown arch, bad weights, marker out of bounds, ...)."""


class InvalidTap(StitchlabError):
    """Tap index outside the network's registered tap points."""


class ShapeError(StitchlabError):
    """Tensor shape incompatible with the declared activation space."""


class NumericsError(StitchlabError):
    """Non-finite values encountered where finite numerics are required."""


class LabelError(StitchlabError):
    """Class label outside [0, num_classes)."""


class TrainingError(StitchlabError):
    """Training diverged (NaN loss); carries the epoch index when known."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class RankWarning(UserWarning):
    """Least-squares system has fewer rows than unknowns; solution is minimum-norm."""
