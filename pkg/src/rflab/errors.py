"""Exception hierarchy shared by all rflab modules."""


class RFLabError(Exception):
    """Base class for rflab errors."""


class GridError(RFLabError, ValueError):
    """Invalid grid specification, axis, or mismatched grids."""


class FieldFormatError(RFLabError, ValueError):
    """Malformed or mismatched field container on load."""


class SingularMetricError(RFLabError, ValueError):
    """A metric is not positive definite or is too badly conditioned."""


class StiffFailure(RFLabError):
    """The adaptive time step fell below ``dt_min``."""


class GaugeFailure(RFLabError):
    """The DeTurck diffeomorphism lost orientation."""


class PullbackError(RFLabError):
    """A pulled-back metric is not positive definite."""


class LinearityError(RFLabError):
    """An operator handed to ``assemble`` failed the linearity spot-check."""


class ResolventError(RFLabError):
    """A resolvent solve broke down (lambda too close to the spectrum)."""


class SectorialityViolation(ResolventError):
    """A resolvent solve failed inside the scanned half-plane."""


class QuadratureError(RFLabError):
    """Contour quadrature did not converge under node doubling."""


class ConfigError(RFLabError, ValueError):
    """Invalid experiment configuration."""


class EigenSolverError(RFLabError):
    """The iterative eigensolver did not converge."""
