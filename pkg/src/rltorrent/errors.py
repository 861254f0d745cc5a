"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument is outside its documented domain."""


class ContractError(RuntimeError):
    """A caller broke a precondition; signals a bug in the caller."""


class ConfigError(ValueError):
    """Configuration failed validation.

    ``field`` names the offending key (dotted for nested keys) when known.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ConvergenceError(RuntimeError):
    """Value iteration hit its sweep cap before the residual fell below eps."""

    def __init__(self, residual, sweeps):
        super().__init__(f"value iteration did not converge after {sweeps} sweeps (residual {residual:.3e})")
        self.residual = residual
        self.sweeps = sweeps
