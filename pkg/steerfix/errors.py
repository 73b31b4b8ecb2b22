"""Exception hierarchy shared by all steerfix modules.

Every class also derives from the builtin exception a caller would naturally
catch, so ``except ValueError`` keeps working for code that does not know
about steerfix.
"""


class SteerfixError(Exception):
    """Base class of all steerfix errors."""


class DimensionError(SteerfixError, ValueError):
    """Array shapes or kernel sizes do not fit together."""


class DomainError(SteerfixError, ValueError):
    """An argument lies outside the domain of the operation."""


class UnsupportedError(SteerfixError, NotImplementedError):
    """The operation is well defined in general but not for this input."""


class ConfigError(SteerfixError, ValueError):
    """Invalid run configuration or command-line options."""


class GraphError(SteerfixError, ValueError):
    """A network graph failed validation.

    Parameters
    ----------
    code : str
        Machine readable reason, one of ``cycle``, ``channel_mismatch``,
        ``dangling``, ``unknown_node``, ``arity``, ``groups``,
        ``param_shape`` or ``unknown_kind``.
    message : str
        Human readable description.
    """

    def __init__(self, code: str, message: str):
        super().__init__(f'[{code}] {message}')
        self.code = code


class SerializationError(SteerfixError, ValueError):
    """A descriptor/blob pair or dataset file is corrupt or inconsistent."""


class EngineError(SteerfixError, RuntimeError):
    """Misuse of the execution engine (e.g. backward before forward)."""


class DivergenceError(SteerfixError, ArithmeticError):
    """Training produced a non-finite loss."""


class FixedParameterError(SteerfixError, RuntimeError):
    """A tensor flagged as fixed changed during training."""
