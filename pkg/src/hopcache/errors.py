"""Exception hierarchy shared by every layer of the engine."""


class HopcacheError(Exception):
    """Base class for all errors raised by hopcache."""


# -- storage -----------------------------------------------------------------

class TransactionError(HopcacheError):
    pass


class TransactionClosed(TransactionError):
    pass


class ReadOnlyTransaction(TransactionError):
    pass


class ValueTooLarge(TransactionError):
    def __init__(self, size: int, limit: int):
        super().__init__(f"value of {size} bytes exceeds limit of {limit}")
        self.size = size
        self.limit = limit


class Conflict(TransactionError):
    """Commit-time OCC conflict; the caller is expected to retry."""


class TransactionTimeout(TransactionError):
    """Injected fault: the transaction exhausted its operation budget."""


# -- graph -------------------------------------------------------------------

class NotFound(HopcacheError):
    pass


# -- templates / cache -------------------------------------------------------

class BindingMismatch(HopcacheError):
    pass


class MissingWildcardProperty(HopcacheError):
    pass


class MalformedValue(HopcacheError):
    """A cached value failed to decode; treat as a miss."""


# -- query -------------------------------------------------------------------

class QuerySyntaxError(HopcacheError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at offset {position}")
        self.position = position


# -- lifecycle / harness -----------------------------------------------------

class DuplicateTemplate(HopcacheError):
    pass


class LifecycleError(HopcacheError):
    pass


class InvalidWorkload(HopcacheError):
    pass


class DomainError(HopcacheError, ValueError):
    pass
