"""Exception hierarchy shared across the pipeline."""


class InvRiskError(Exception):
    """Base class for all package errors."""


class InputError(InvRiskError, ValueError):
    """Malformed or out-of-contract input to a pure operation."""


class ConfigError(InvRiskError, ValueError):
    """Invalid configuration; maps to CLI exit code 2."""


class UnsupportedFeatureError(ConfigError):
    pass


class StageError(InvRiskError, RuntimeError):
    """A pipeline stage failed; the run is resumable (exit code 3)."""


class BackendUnavailable(InvRiskError, RuntimeError):
    """An interpretation backend could not be reached (exit code 4)."""


class ModeCollapseError(StageError):
    pass


class AttackError(StageError):
    pass
