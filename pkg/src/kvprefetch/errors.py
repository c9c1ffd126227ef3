"""Exception hierarchy shared across the package."""


class KvPrefetchError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(KvPrefetchError, ValueError):
    pass


class NotPositiveDefiniteError(KvPrefetchError, ArithmeticError):
    pass


class EmptySupportError(KvPrefetchError, ValueError):
    """Softmax asked to normalise over an all-masked vector."""


class BoundError(KvPrefetchError, IndexError):
    pass


class InsufficientHistoryError(KvPrefetchError, ValueError):
    pass


class ContractError(KvPrefetchError, ValueError):
    """A precondition on the inputs of an operation was violated."""


class ValidationError(KvPrefetchError, ValueError):
    """Configuration rejected before any work was done."""


class InfeasibleError(KvPrefetchError, ValueError):
    """No bandwidth can hide the communication (launch overhead too large)."""


class TraceFormatError(KvPrefetchError, ValueError):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset
