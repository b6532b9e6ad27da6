"""Exception hierarchy. Every failure carries a detail message and the exit code the CLI reports."""

CONFIG_ERROR_EXIT = 2
RUNTIME_ABORT_EXIT = 3


class GatedSRError(Exception):
    exit_code = RUNTIME_ABORT_EXIT

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ConfigError(GatedSRError):
    """Invalid configuration, degenerate data or refused file operation"""
    exit_code = CONFIG_ERROR_EXIT


class MalformedTraversalError(GatedSRError):
    pass


class NoLegalActionError(GatedSRError):
    pass


class GateEliminatedError(GatedSRError):
    pass


class NonFiniteError(GatedSRError):
    """Non-finite gradient, loss or recurrent state"""


class NgmTrainingError(GatedSRError):
    pass
