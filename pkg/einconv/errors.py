class EinconvError(Exception):
    """Base class for every error the CLI turns into an exit code."""
    exit_code = 1


class ValidationError(EinconvError, ValueError):
    exit_code = 2


class ConfigError(EinconvError, ValueError):
    exit_code = 2


class IdxFormatError(EinconvError, ValueError):
    exit_code = 2


class BudgetExceededError(EinconvError):
    exit_code = 3

    def __init__(self, message: str, partial_count: int):
        super().__init__(message)
        self.partial_count = partial_count


class DivergenceError(EinconvError):
    exit_code = 4

    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
