"""Exception types

Configuration and numerical failures raised by cqlearn. Both derive from builtins so callers
can catch them as ``ValueError`` / ``ArithmeticError``.
"""


class ConfigError(ValueError):
    """invalid experiment, environment or constraint configuration"""


class NumericalError(ArithmeticError):
    """non-finite loss or parameters encountered during training"""


class InstanceTooLargeError(ValueError):
    """enumeration-based oracle refused an instance above its size guard"""
