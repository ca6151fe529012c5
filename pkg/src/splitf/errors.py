"""Exception hierarchy shared by every module.

Each error carries a short ``category`` string. The server puts it in the
``err`` field of error frames (``"<category>: <message>"``) so the client
can re-raise the matching class on its side.
"""


class SplitError(Exception):
    category = "internal"

    def __str__(self) -> str:
        return f"{self.category}: {super().__str__()}"


class ConfigError(SplitError):
    category = "config"


class InputError(SplitError):
    category = "input"


class CapacityError(SplitError):
    category = "capacity"


class NumericError(SplitError):
    category = "numeric"


class ProtocolError(SplitError):
    """Malformed or inconsistent frame.

    ``kind`` narrows the failure (``truncated``, ``overrun``, ``json``,
    ``schema``, ``trailing``, ``shape``, ``state``).
    """

    category = "protocol"

    def __init__(self, message: str, kind: str = "schema"):
        super().__init__(message)
        self.kind = kind


class EncodeError(ProtocolError):
    category = "encode"


class TransportError(SplitError):
    category = "transport"


class SessionError(SplitError):
    category = "session"


class DesyncError(SplitError):
    category = "desync"


class DecompositionError(SplitError):
    category = "decomposition"


class TrainingError(SplitError):
    category = "training"


_BY_CATEGORY = {
    cls.category: cls
    for cls in (
        SplitError,
        ConfigError,
        InputError,
        CapacityError,
        NumericError,
        ProtocolError,
        EncodeError,
        TransportError,
        SessionError,
        DesyncError,
        DecompositionError,
        TrainingError,
    )
}


def error_from_message(err: str) -> SplitError:
    """Rebuild an exception from an ``err`` header string."""
    category, _, message = err.partition(": ")
    cls = _BY_CATEGORY.get(category, SplitError)
    if issubclass(cls, ProtocolError):
        return cls(message, kind="remote")
    return cls(message)
