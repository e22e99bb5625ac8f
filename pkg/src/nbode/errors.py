"""Exception hierarchy shared across the toolkit."""


class NbodeError(Exception):
    """Base class for all toolkit errors."""


class IntegrationError(NbodeError):
    """Numerical integration failed; carries the time of failure when known."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class DivergenceError(IntegrationError):
    """State became non-finite; carries the last finite state and time."""

    def __init__(self, message, t=None, last_state=None):
        super().__init__(message, t=t)
        self.last_state = last_state


class StiffnessError(IntegrationError):
    """Adaptive step size underflowed without producing non-finite states."""


class GenerationError(NbodeError):
    """Dataset generation failed (e.g. burn-in divergence)."""


class EstimationError(NbodeError):
    """Characteristic-timescale estimation failed."""


class SequencingError(NbodeError):
    """Pipeline steps invoked out of order (e.g. val split before train)."""


class CalibrationError(NbodeError):
    """Annulus radius calibration could not meet the occupancy target."""


class CoverError(NbodeError):
    """Neighbor cover construction produced an unusable cover."""


class EngineError(NbodeError):
    """Automatic differentiation engine misuse."""


class UnsupportedPrimitiveError(EngineError):
    """A function handed to the engine used a primitive it does not know."""

    def __init__(self, name):
        super().__init__(f"unsupported primitive: {name}")
        self.name = name


class RolloutError(NbodeError):
    """Model rollout produced a non-finite state; carries the step index."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class TrainingAbortedError(NbodeError):
    """Training hit too many consecutive skipped steps."""


class ConfigError(NbodeError):
    """Invalid experiment configuration."""
