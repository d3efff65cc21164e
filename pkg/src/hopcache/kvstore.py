"""In-memory ordered, transactional key-value store.

Multi-version values keyed by commit version give every transaction a
consistent snapshot. Read-write transactions buffer their writes at the
client and are validated with optimistic concurrency control at commit:
if any key or prefix range the transaction read was written by a
transaction that committed after its read version, the commit fails with
:class:`~hopcache.errors.Conflict`. Read-only transactions skip all
conflict bookkeeping and never abort.

Conflict granularity is exact keys plus scanned prefixes; a committed
``clear_range`` conflicts with any read key or scanned prefix it overlaps.
"""
from __future__ import annotations

import threading
import time
from collections import Counter, deque
from typing import Callable, Iterator

from sortedcontainers import SortedList

from .errors import (
    Conflict,
    ReadOnlyTransaction,
    TransactionClosed,
    TransactionTimeout,
    ValueTooLarge,
)

MAX_VALUE_SIZE = 100_000

READ_ONLY = "read-only"
READ_WRITE = "read-write"


def prefix_end(prefix: bytes) -> bytes | None:
    """Smallest key greater than every key starting with ``prefix``."""
    p = bytearray(prefix)
    while p:
        if p[-1] != 0xFF:
            p[-1] += 1
            return bytes(p)
        p.pop()
    return None


def _in_range(key: bytes, start: bytes, end: bytes | None) -> bool:
    return key >= start and (end is None or key < end)


def _ranges_overlap(a: tuple[bytes, bytes | None], b: tuple[bytes, bytes | None]) -> bool:
    a0, a1 = a
    b0, b1 = b
    return (a1 is None or b0 < a1) and (b1 is None or a0 < b1)


class _CommitRecord:
    __slots__ = ("version", "keys", "ranges")

    def __init__(self, version, keys, ranges):
        self.version = version
        self.keys = keys
        self.ranges = ranges


class KVStore:
    """Single-process MVCC ordered map with OCC commits.

    ``op_delay`` (seconds) is slept on every storage read and commit to
    stand in for a network round trip; ``max_value_size`` bounds values.
    """

    def __init__(self, max_value_size: int = MAX_VALUE_SIZE, op_delay: float = 0.0):
        self.max_value_size = max_value_size
        self.op_delay = op_delay
        self._versions: dict[bytes, list[tuple[int, bytes | None]]] = {}
        self._keys = SortedList()
        self._version = 0
        self._lock = threading.RLock()
        self._log: deque[_CommitRecord] = deque()
        self._active: Counter[int] = Counter()
        self._rw_active: Counter[int] = Counter()
        self.stats: Counter[str] = Counter()

    @property
    def version(self) -> int:
        return self._version

    def begin(self, mode: str = READ_WRITE, op_budget: int | None = None) -> "Transaction":
        if mode not in (READ_ONLY, READ_WRITE):
            raise ValueError(f"unknown transaction mode {mode!r}")
        with self._lock:
            rv = self._version
            self._active[rv] += 1
            if mode == READ_WRITE:
                self._rw_active[rv] += 1
        return Transaction(self, mode, rv, op_budget)

    def transact(self, fn: Callable[["Transaction"], object], retries: int = 10):
        """Run ``fn(tx)`` in a read-write transaction, retrying on conflict."""
        for attempt in range(retries):
            tx = self.begin(READ_WRITE)
            try:
                result = fn(tx)
                tx.commit()
                return result
            except Conflict:
                if attempt == retries - 1:
                    raise
            finally:
                tx.close()

    # -- snapshot access ---------------------------------------------------

    def _read(self, key: bytes, rv: int) -> bytes | None:
        versions = self._versions.get(key)
        if versions is None:
            return None
        for v, value in reversed(versions):
            if v <= rv:
                return value
        return None

    def _scan(self, start: bytes, end: bytes | None, rv: int) -> list[tuple[bytes, bytes]]:
        with self._lock:
            keys = list(self._keys.irange(start, end, inclusive=(True, False)))
        out = []
        read = self._read
        for k in keys:
            value = read(k, rv)
            if value is not None:
                out.append((k, value))
        return out

    def items(self, prefix: bytes = b"") -> list[tuple[bytes, bytes]]:
        """Latest committed pairs under ``prefix`` (no transaction)."""
        return self._scan(prefix, prefix_end(prefix), self._version)

    def load_items(self, pairs) -> None:
        """Bulk-load committed pairs as one commit; used to restore dumps."""
        tx = self.begin()
        for k, v in pairs:
            tx.set(k, v)
        tx.commit()

    # -- commit ------------------------------------------------------------

    def _commit(self, tx: "Transaction") -> int:
        with self._lock:
            rv = tx.read_version
            if tx._read_keys or tx._read_ranges:
                for rec in self._log:
                    if rec.version > rv and tx._conflicts_with(rec):
                        self.stats["conflicts"] += 1
                        raise Conflict(f"transaction at version {rv} conflicts with commit {rec.version}")
            if not tx._writes and not tx._cleared:
                self._release(tx)
                return self._version
            self._version += 1
            v = self._version
            written: set[bytes] = set()
            for start, end in tx._cleared:
                for k in list(self._keys.irange(start, end, inclusive=(True, False))):
                    versions = self._versions[k]
                    if versions[-1][1] is not None:
                        versions.append((v, None))
                        written.add(k)
            for k, value in tx._writes.items():
                versions = self._versions.get(k)
                if versions is None:
                    if value is None:
                        continue
                    self._versions[k] = [(v, value)]
                    self._keys.add(k)
                else:
                    if versions[-1][1] is None and value is None:
                        continue
                    versions.append((v, value))
                written.add(k)
            self._log.append(_CommitRecord(v, frozenset(tx._writes), tuple(tx._cleared)))
            self.stats["commits"] += 1
            self._release(tx)
            self._gc(written)
            return v

    def _release(self, tx: "Transaction") -> None:
        with self._lock:
            rv = tx.read_version
            self._active[rv] -= 1
            if not self._active[rv]:
                del self._active[rv]
            if tx.mode == READ_WRITE:
                self._rw_active[rv] -= 1
                if not self._rw_active[rv]:
                    del self._rw_active[rv]
            horizon = min(self._rw_active) if self._rw_active else self._version
            log = self._log
            while log and log[0].version <= horizon:
                log.popleft()

    def _gc(self, keys) -> None:
        oldest = min(self._active) if self._active else self._version
        for k in keys:
            versions = self._versions[k]
            if len(versions) == 1:
                if versions[0][1] is None and versions[0][0] <= oldest:
                    del self._versions[k]
                    self._keys.remove(k)
                continue
            # keep the newest version visible at ``oldest`` and all later ones
            i = len(versions) - 1
            while i > 0 and versions[i][0] > oldest:
                i -= 1
            if i > 0:
                versions = versions[i:]
                self._versions[k] = versions
            if len(versions) == 1 and versions[0][1] is None and versions[0][0] <= oldest:
                del self._versions[k]
                self._keys.remove(k)

    def __len__(self) -> int:
        return len(self.items())

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.RLock()


class Transaction:
    """Snapshot view plus client-side write buffer."""

    def __init__(self, store: KVStore, mode: str, read_version: int, op_budget: int | None = None):
        self.store = store
        self.mode = mode
        self.read_version = read_version
        self.op_budget = op_budget
        self.ops = 0
        self.annotations: dict = {}
        self.on_commit: list[Callable[[], None]] = []
        self.committed_version: int | None = None
        self._writes: dict[bytes, bytes | None] = {}
        self._cleared: list[tuple[bytes, bytes | None]] = []
        self._read_keys: set[bytes] = set()
        self._read_ranges: list[tuple[bytes, bytes | None]] = []
        self._closed = False

    @property
    def closed(self) -> bool:
        return self._closed

    @property
    def read_only(self) -> bool:
        return self.mode == READ_ONLY

    def _tick(self, delay: bool) -> None:
        if self._closed:
            raise TransactionClosed("transaction is closed")
        self.ops += 1
        if self.op_budget is not None and self.ops > self.op_budget:
            self.close()
            raise TransactionTimeout(f"exceeded budget of {self.op_budget} operations")
        if delay and self.store.op_delay:
            time.sleep(self.store.op_delay)

    def _writable(self) -> None:
        if self.mode != READ_WRITE:
            raise ReadOnlyTransaction("write on a read-only transaction")

    def _buffered_clear(self, key: bytes) -> bool:
        for start, end in self._cleared:
            if _in_range(key, start, end):
                return True
        return False

    # -- reads -------------------------------------------------------------

    def get(self, key: bytes) -> bytes | None:
        self._tick(True)
        writes = self._writes
        if key in writes:
            return writes[key]
        if self.mode == READ_WRITE:
            self._read_keys.add(key)
        if self._cleared and self._buffered_clear(key):
            return None
        return self.store._read(key, self.read_version)

    def range_scan(self, prefix: bytes) -> list[tuple[bytes, bytes]]:
        self._tick(True)
        end = prefix_end(prefix)
        if self.mode == READ_WRITE:
            self._read_ranges.append((prefix, end))
        pairs = self.store._scan(prefix, end, self.read_version)
        if not self._writes and not self._cleared:
            return pairs
        merged = {}
        for k, v in pairs:
            if not (self._cleared and self._buffered_clear(k)):
                merged[k] = v
        for k, v in self._writes.items():
            if k.startswith(prefix):
                if v is None:
                    merged.pop(k, None)
                else:
                    merged[k] = v
        return sorted(merged.items())

    def scan_keys(self, prefix: bytes) -> Iterator[bytes]:
        for k, _ in self.range_scan(prefix):
            yield k

    # -- writes ------------------------------------------------------------

    def set(self, key: bytes, value: bytes) -> None:
        self._tick(False)
        self._writable()
        if not key:
            raise ValueError("keys must be non-empty")
        if len(value) > self.store.max_value_size:
            raise ValueTooLarge(len(value), self.store.max_value_size)
        self._writes[key] = bytes(value)

    def delete(self, key: bytes) -> None:
        self._tick(False)
        self._writable()
        self._writes[key] = None

    def clear_range(self, prefix: bytes) -> None:
        self._tick(False)
        self._writable()
        end = prefix_end(prefix)
        for k in [k for k in self._writes if k.startswith(prefix)]:
            del self._writes[k]
        self._cleared.append((prefix, end))

    # -- termination -------------------------------------------------------

    def _conflicts_with(self, rec: _CommitRecord) -> bool:
        read_keys = self._read_keys
        ranges = self._read_ranges
        for k in rec.keys:
            if k in read_keys:
                return True
            for start, end in ranges:
                if _in_range(k, start, end):
                    return True
        for r in rec.ranges:
            for k in read_keys:
                if _in_range(k, r[0], r[1]):
                    return True
            for rr in ranges:
                if _ranges_overlap(r, rr):
                    return True
        return False

    def commit(self) -> int:
        if self._closed:
            raise TransactionClosed("transaction is closed")
        if self.mode == READ_ONLY:
            self.close()
            return self.store.version
        if self.store.op_delay:
            time.sleep(self.store.op_delay)
        try:
            v = self.store._commit(self)
        except Conflict:
            self.close()
            raise
        self._closed = True
        self.committed_version = v
        for fn in self.on_commit:
            fn()
        return v

    def close(self) -> None:
        """Abandon the transaction, discarding buffered writes."""
        if not self._closed:
            self._closed = True
            self.store._release(self)

    abort = close

    def __enter__(self) -> "Transaction":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
