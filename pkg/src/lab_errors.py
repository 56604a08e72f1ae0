"""

Lab errors

Exception hierarchy shared by every module of the lab. Validation problems
derive from ValueError, runtime faults from RuntimeError/FloatingPointError,
so callers can catch either the lab root or the builtin family.

"""


class LabError(Exception):
    """Root of all lab exceptions"""


class ConfigError(LabError, ValueError):
    """Invalid experiment config, override or command line input"""


class DimensionError(LabError, ValueError):
    """Shapes of tables, vectors or networks do not agree"""


class InvalidDistributionError(LabError, ValueError):
    """A table that must hold probability distributions does not"""


class EnumerationGuardError(LabError, ValueError):
    """Exhaustive enumeration would exceed the allowed number of terms"""


class HomomorphismError(LabError, ValueError):
    """Operation needs a valid homomorphism (surjective maps, consistent blocks)"""


class ConvergenceError(LabError, RuntimeError):
    """An iterative procedure hit its iteration cap"""


class NonFiniteError(LabError, FloatingPointError):
    """A network output or loss became NaN or infinite"""
