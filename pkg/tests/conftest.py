import json

import pytest

from hopcache.graphstore import GraphStore, load_jsonl
from hopcache.harness.fixtures import build_fig1, default_templates, desk_graph_records
from hopcache.kvstore import KVStore
from hopcache.queryengine import QueryEngine

SMALL_LABELS = {"watch-list": 30, "listing": 140, "seller": 20, "category": 10}
SMALL_EDGES = {"includes": 600, "sells": 260, "in_category": 140}


@pytest.fixture
def kv():
    return KVStore()


@pytest.fixture
def fig1():
    return build_fig1()


@pytest.fixture
def engine_factory():
    made = []

    def make(kv, **kw):
        kw.setdefault("cp_mode", "deferred")
        e = QueryEngine(kv, **kw)
        made.append(e)
        return e

    yield make
    for e in made:
        e.close()


def load_records(records, kv=None):
    kv = KVStore() if kv is None else kv
    aliases = load_jsonl(GraphStore(kv), [json.dumps(r) for r in records])
    return kv, aliases


@pytest.fixture
def small_desk():
    """A tenth-scale desk graph: (records, kv, aliases, templates)."""
    recs = desk_graph_records(7, SMALL_LABELS, SMALL_EDGES)
    kv, aliases = load_records(recs)
    return recs, kv, aliases, default_templates()


# -- acceptance summary ----------------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one summary line per acceptance criterion: ``criterion(n, ok, detail)``."""

    def record(n: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
