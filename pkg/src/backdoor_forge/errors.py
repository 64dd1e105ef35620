class BackdoorForgeError(Exception):
    pass


class ConfigError(BackdoorForgeError, ValueError):
    pass


class InvalidInputError(BackdoorForgeError, ValueError):
    pass


class TrainingError(BackdoorForgeError, RuntimeError):
    """Raised when a loss becomes non-finite during optimisation."""


class ImplantError(BackdoorForgeError, RuntimeError):
    """The trained detector does not carry a usable backdoor."""

    def __init__(self, message: str, report: dict | None = None):
        super().__init__(message)
        self.report = {} if report is None else report


class SkipSample(BackdoorForgeError):
    """No prediction can be matched to the selected object."""
