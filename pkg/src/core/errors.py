"""Exception hierarchy shared by every poolscreen module.

Validation problems (bad files, infeasible specs) map to CLI exit code 1,
numerical failures (non-convergence, singular refits) to exit code 2.
"""

from typing import Optional


class PoolScreenError(Exception):
    exit_code = 1


class ValidationError(PoolScreenError):
    exit_code = 1


class DesignError(ValidationError):
    pass


class PlateFormatError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class NumericalError(PoolScreenError):
    exit_code = 2


class ConvergenceError(NumericalError):
    def __init__(self, message: str, lam: Optional[float] = None):
        super().__init__(message)
        self.lam = lam


class RankDeficiencyError(NumericalError):
    pass
