"""Cache subspace: encoded, compressed, chunked leaf-id lists.

An entry for key ``k`` lives at ``C/<k>/000000``, ``C/<k>/000001``, ... so
that reading it is one prefix scan and deleting it one clear-range. The
``/`` after the rendered key keeps ``...Status=1`` from matching
``...Status=10``.

Value layout before chunking: one codec tag byte, then the codec's encoding
of ``u64 count`` followed by ``count`` big-endian u64 ids.
"""
from __future__ import annotations

import logging
import struct
import threading
import zlib
from collections import Counter, deque
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .errors import Conflict, MalformedValue
from .graphstore import GraphStore
from .kvstore import KVStore, Transaction
from .templates import CacheKey, SubQueryTemplate, build_key, execute_instance, template_prefix

log = logging.getLogger(__name__)

CACHE_PREFIX = b"C/"
CHUNK_DIGITS = 6
_COUNT = struct.Struct(">Q")


# -- codecs ------------------------------------------------------------------

@dataclass(frozen=True)
class Codec:
    name: str
    tag: int
    compress: Callable[[bytes], bytes]
    decompress: Callable[[bytes], bytes]


def _identity(b: bytes) -> bytes:
    return b


CODECS: dict[str, Codec] = {
    "none": Codec("none", 0, _identity, _identity),
    "zlib": Codec("zlib", 1, lambda b: zlib.compress(b, 1), zlib.decompress),
}

try:
    import zstandard

    _zc = zstandard.ZstdCompressor(level=3)
    _zd = zstandard.ZstdDecompressor()
    CODECS["zstd"] = Codec("zstd", 2, _zc.compress, lambda b: _zd.decompress(b))
except ImportError:  # pragma: no cover - optional dependency
    pass

DEFAULT_CODEC = "zstd" if "zstd" in CODECS else "zlib"
_BY_TAG = {c.tag: c for c in CODECS.values()}


def get_codec(name: str) -> Codec:
    try:
        return CODECS[name]
    except KeyError:
        raise ValueError(f"unknown codec {name!r}; available: {sorted(CODECS)}") from None


def encode(leaf_ids: Iterable[int], codec: str = DEFAULT_CODEC) -> bytes:
    ids = leaf_ids if isinstance(leaf_ids, list) else list(leaf_ids)
    n = len(ids)
    if n > 512:
        body = _COUNT.pack(n) + np.asarray(ids, dtype=">u8").tobytes()
    else:
        body = struct.pack(f">Q{n}Q", n, *ids)
    c = get_codec(codec)
    return bytes([c.tag]) + c.compress(body)


def decode(data: bytes) -> list[int]:
    if not data:
        raise MalformedValue("empty value")
    c = _BY_TAG.get(data[0])
    if c is None:
        raise MalformedValue(f"unknown codec tag {data[0]}")
    try:
        body = c.decompress(data[1:])
    except Exception as exc:
        raise MalformedValue(f"decompression failed: {exc}") from None
    if len(body) < 8:
        raise MalformedValue("truncated header")
    (n,) = _COUNT.unpack_from(body)
    if len(body) != 8 + 8 * n:
        raise MalformedValue(f"header says {n} ids, body holds {(len(body) - 8) / 8}")
    if n > 512:
        return np.frombuffer(body, dtype=">u8", offset=8).tolist()
    return list(struct.unpack_from(f">{n}Q", body, 8))


# -- chunking ----------------------------------------------------------------

def chunk_count(size: int, limit: int) -> int:
    return max(1, -(-size // limit))


def split_chunks(payload: bytes, limit: int) -> list[bytes]:
    if not payload:
        return [b""]
    return [payload[i:i + limit] for i in range(0, len(payload), limit)]


def chunk_key(base: bytes, i: int) -> bytes:
    return base + b"/" + b"%06d" % i


def write_blob(tx: Transaction, base: bytes, payload: bytes) -> int:
    """Replace whatever is stored under ``base`` with ``payload``; returns chunk count."""
    tx.clear_range(base + b"/")
    chunks = split_chunks(payload, tx.store.max_value_size)
    for i, chunk in enumerate(chunks):
        tx.set(chunk_key(base, i), chunk)
    return len(chunks)


def read_blob(tx: Transaction, base: bytes) -> bytes | None:
    pairs = tx.range_scan(base + b"/")
    if not pairs:
        return None
    for i, (k, _) in enumerate(pairs):
        if k != chunk_key(base, i):
            raise MalformedValue(f"chunk sequence broken at {k!r}")
    return b"".join(v for _, v in pairs)


# -- entries -----------------------------------------------------------------

def key_bytes(key: CacheKey | str) -> bytes:
    text = key.render() if isinstance(key, CacheKey) else key
    return CACHE_PREFIX + text.encode()


class CacheStore:
    """Transactional get/put/delete of cache entries."""

    def __init__(self, kv: KVStore, codec: str = DEFAULT_CODEC):
        get_codec(codec)
        self.kv = kv
        self.codec = codec
        self.counters: Counter[str] = Counter()

    def put_entry(self, tx: Transaction, key: CacheKey, leaf_ids: Iterable[int]) -> int:
        self.counters["puts"] += 1
        return write_blob(tx, key_bytes(key), encode(list(leaf_ids), self.codec))

    def get_entry(self, tx: Transaction, key: CacheKey) -> list[int] | None:
        """``None`` is a miss; an empty list is a cached empty result."""
        self.counters["reads"] += 1
        blob = read_blob(tx, key_bytes(key))
        if blob is None:
            return None
        return decode(blob)

    def delete_entry(self, tx: Transaction, key: CacheKey) -> None:
        tx.clear_range(key_bytes(key) + b"/")

    def clear_prefix(self, tx: Transaction, prefix: str) -> None:
        tx.clear_range(CACHE_PREFIX + prefix.encode())

    def clear_template(self, tx: Transaction, template: SubQueryTemplate | str) -> None:
        self.clear_prefix(tx, template_prefix(template))

    def entries(self, tx: Transaction, prefix: str = "") -> dict[str, bytes]:
        """Raw reassembled values keyed by rendered cache key."""
        out: dict[str, bytearray] = {}
        for k, v in tx.range_scan(CACHE_PREFIX + prefix.encode()):
            base = k[len(CACHE_PREFIX):-(CHUNK_DIGITS + 1)].decode()
            out.setdefault(base, bytearray()).extend(v)
        return {k: bytes(v) for k, v in out.items()}


# -- cache populate ----------------------------------------------------------

@dataclass
class PopulateRequest:
    template: SubQueryTemplate
    root: int
    edge_values: tuple = ()
    leaf_values: tuple = ()
    attempts_remaining: int = 3


@dataclass
class PopulateStats:
    populated: int = 0
    conflicts: int = 0
    discarded: int = 0
    skipped: int = 0

    def merge(self, other: "PopulateStats") -> None:
        self.populated += other.populated
        self.conflicts += other.conflicts
        self.discarded += other.discarded
        self.skipped += other.skipped


class PopulateQueue:
    """Bounded FIFO; a full queue drops the request and counts it."""

    def __init__(self, capacity: int = 4096):
        self.capacity = capacity
        self._items: deque[PopulateRequest] = deque()
        self._cv = threading.Condition()
        self.dropped = 0

    def put(self, req: PopulateRequest) -> bool:
        with self._cv:
            if len(self._items) >= self.capacity:
                self.dropped += 1
                return False
            self._items.append(req)
            self._cv.notify()
            return True

    def get(self, timeout: float | None = None) -> PopulateRequest | None:
        with self._cv:
            if not self._items:
                self._cv.wait(timeout)
            return self._items.popleft() if self._items else None

    def get_nowait(self) -> PopulateRequest | None:
        with self._cv:
            return self._items.popleft() if self._items else None

    def __len__(self) -> int:
        return len(self._items)


class PendingPopulate:
    """A populate transaction that has done its reads but not committed."""

    def __init__(self, tx: Transaction | None, key: CacheKey | None):
        self.tx = tx
        self.key = key

    def commit(self) -> bool:
        """True on success or no-op, False on conflict."""
        if self.tx is None:
            return True
        try:
            self.tx.commit()
            return True
        except Conflict:
            return False
        finally:
            self.tx.close()


class CachePopulator:
    """Runs each populate request as its own read-write transaction.

    ``is_active(name)`` is consulted inside the transaction; a template whose
    cache is no longer maintained on this node is skipped, so a late request
    can never resurrect entries after the template is removed.
    """

    def __init__(
        self,
        kv: KVStore,
        graph: GraphStore,
        cache: CacheStore,
        queue: PopulateQueue | None = None,
        retries: int = 3,
        is_active: Callable[[str], bool] = lambda name: True,
    ):
        self.kv = kv
        self.graph = graph
        self.cache = cache
        self.queue = queue if queue is not None else PopulateQueue()
        self.retries = retries
        self.is_active = is_active
        self.stats = PopulateStats()
        self._workers: list[threading.Thread] = []
        self._stop = threading.Event()
        self._stats_lock = threading.Lock()

    def enqueue(self, template: SubQueryTemplate, root: int, we=(), wl=()) -> bool:
        return self.queue.put(PopulateRequest(template, root, tuple(we), tuple(wl), self.retries))

    def begin(self, req: PopulateRequest, *, repair: bool = False) -> PendingPopulate:
        """Do the reads and buffer the write of one populate attempt."""
        tx = self.kv.begin()
        if not self.is_active(req.template.name):
            tx.close()
            return PendingPopulate(None, None)
        key = build_key(req.template, req.root, req.edge_values, req.leaf_values)
        # read the key first so a concurrent clear of it conflicts this commit
        if repair:
            tx.range_scan(key_bytes(key) + b"/")  # a corrupt entry is overwritten unread
        else:
            try:
                self.cache.get_entry(tx, key)
            except MalformedValue:
                tx.close()
                raise
        root = self.graph.get_vertex(tx, req.root)
        if root is None or not req.template.root.matches(root):
            tx.close()
            return PendingPopulate(None, None)
        ids = execute_instance(
            tx, self.graph, req.template, req.root, req.edge_values, req.leaf_values, check_root=False
        )
        self.cache.put_entry(tx, key, ids)
        return PendingPopulate(tx, key)

    def populate(self, req: PopulateRequest) -> PopulateStats:
        stats = PopulateStats()
        while req.attempts_remaining > 0:
            req.attempts_remaining -= 1
            try:
                pending = self.begin(req)
            except MalformedValue:
                pending = self.begin(req, repair=True)
            if pending.key is None:
                stats.skipped += 1
                return stats
            if pending.commit():
                stats.populated += 1
                return stats
            stats.conflicts += 1
        stats.discarded += 1
        log.debug("discarding populate of %s root %s after retries", req.template.name, req.root)
        return stats

    def drain(self) -> PopulateStats:
        """Process every queued request inline."""
        total = PopulateStats()
        while True:
            req = self.queue.get_nowait()
            if req is None:
                break
            total.merge(self.populate(req))
        with self._stats_lock:
            self.stats.merge(total)
        return total

    # -- background workers ------------------------------------------------

    def start(self, workers: int = 1) -> None:
        self._stop.clear()
        for i in range(workers):
            t = threading.Thread(target=self._run, name=f"cache-populate-{i}", daemon=True)
            t.start()
            self._workers.append(t)

    def _run(self) -> None:
        while not self._stop.is_set():
            req = self.queue.get(timeout=0.05)
            if req is None:
                continue
            s = self.populate(req)
            with self._stats_lock:
                self.stats.merge(s)

    def stop(self) -> None:
        self._stop.set()
        for t in self._workers:
            t.join()
        self._workers.clear()

    @property
    def running(self) -> bool:
        return bool(self._workers)


cp_drain = CachePopulator.drain
