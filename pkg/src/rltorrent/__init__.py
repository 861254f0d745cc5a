"""Discrete-time BitTorrent swarm simulator with a reinforcement-learning peer selector."""

from rltorrent.errors import ConfigError, ContractError, ConvergenceError, InvalidInputError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "ConvergenceError",
    "InvalidInputError",
    "__version__",
]
