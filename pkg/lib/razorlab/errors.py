"""
RazorLab - Error types

Every error the library raises derives from RazorError and carries the
process exit code the CLI reports for it.
"""


class RazorError(Exception):
    """Base class for all RazorLab errors"""

    exit_code = 1


# Input / configuration family (exit 1)

class ConfigError(RazorError):
    """Invalid configuration value, key or combination"""


class SpecError(ConfigError):
    """Invalid dataset split specification"""


class InputError(RazorError, ValueError):
    """Bad user-supplied data (empty batch, out-of-vocabulary token, ...)"""


class DimensionError(RazorError, ValueError):
    """Tensor shapes do not fit the operation"""


class DegenerateInputError(RazorError, ValueError):
    """Input where the operation is undefined, e.g. a zero vector to normalize"""


class ContractError(RazorError):
    """Caller violated an API contract"""


class ComponentLookupError(RazorError, KeyError):
    """ComponentId does not exist for the model config"""

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the plain message
        return str(self.args[0]) if self.args else ''


# Numeric / integrity family (exit 2)

class NumericError(RazorError):
    """Non-finite values or a failed numeric contract"""

    exit_code = 2


class IntegrityError(RazorError):
    """Corrupt or unreadable checkpoint file"""

    exit_code = 2
