"""
Exception types raised by dppo
"""
from __future__ import absolute_import

__all__ = [
    "DPPOError",
    "ConfigError",
    "ContractError",
    "UndefinedStatError",
    "DivergenceError",
]


class DPPOError(Exception):
    """base class for all package errors"""


class ConfigError(DPPOError, ValueError):
    """invalid configuration value or key

    Parameters
    ----------
    message : str
    key : str, optional
        dotted name of the offending configuration key.
    """

    def __init__(self, message, key=None):
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)
        self.key = key


class ContractError(DPPOError, ValueError):
    """pre-condition of an operation was violated"""


class UndefinedStatError(DPPOError, ValueError):
    """statistic requested with no underlying observations"""


class DivergenceError(DPPOError, RuntimeError):
    """non-finite parameters or diverging loss

    Parameters
    ----------
    message : str
    phase : str, optional
        phase in which the failure happened ("RL", "SFT", ...)
    loop : int, optional
        metaloop index
    """

    def __init__(self, message, phase=None, loop=None):
        where = []
        if loop is not None:
            where.append(f"loop={loop}")
        if phase is not None:
            where.append(f"phase={phase}")
        if where:
            message = f"[{', '.join(where)}] {message}"
        super().__init__(message)
        self.phase = phase
        self.loop = loop
