"""Graphs and templates used by the tests, notebooks and the command line."""
from __future__ import annotations

import json
import random
from dataclasses import dataclass

from ..graphstore import IN, OUT, GraphStore
from ..kvstore import KVStore
from ..templates import WILDCARD, Predicate, SubQueryTemplate

# -- the watch-list example ------------------------------------------------------

WATCH_LIST = 10
ACTIVE_STATUS0 = tuple(range(11, 36))     # 25 listings, active edge, Status 0
ACTIVE_STATUS1 = tuple(range(36, 41))     # 5 listings, active edge, Status 1
INACTIVE_STATUS0 = tuple(range(41, 51))   # 10 listings, inactive edge, Status 0
INACTIVE_STATUS1 = tuple(range(51, 61))   # 10 listings, inactive edge, Status 1
SPARE_LISTING = 105                       # Status 0, not on the watch-list yet

SQ1 = SubQueryTemplate(
    "SQ1",
    Predicate("watch-list"),
    Predicate("includes", (("IsActive", WILDCARD),)),
    Predicate(None, (("Status", WILDCARD),)),
    OUT,
)

FIG1_QUERY = 'g.V(10).outE("includes").has("IsActive",true).inV().has("Status",0).valueMap()'
FIG1_IDS_QUERY = 'g.V(10).outE("includes").has("IsActive",true).inV().has("Status",0).id()'


@dataclass
class Fig1:
    kv: KVStore
    graph: GraphStore
    edges: dict[int, int]  # listing id -> id of the includes edge from the watch-list


def build_fig1(kv: KVStore | None = None, graph: GraphStore | None = None) -> Fig1:
    """Watch-list 10 ("BF To-Buys") including 50 listings, plus listing 105.

    30 of the ``includes`` edges are active; 25 of those lead to a listing
    with ``Status`` 0. The inactive edges reach both statuses, so every
    ``IsActive`` x ``Status`` combination has a cache key.
    """
    if kv is None:
        kv = KVStore() if graph is None else graph.kv
    if graph is None:
        graph = GraphStore(kv)
    edges = {}
    tx = kv.begin()
    graph.add_vertex(tx, "watch-list", {"name": "BF To-Buys", "uid": "W10"}, vid=WATCH_LIST)
    groups = (
        (ACTIVE_STATUS0, True, 0),
        (ACTIVE_STATUS1, True, 1),
        (INACTIVE_STATUS0, False, 0),
        (INACTIVE_STATUS1, False, 1),
    )
    for ids, active, status in groups:
        for vid in ids:
            graph.add_vertex(tx, "listing", {"Status": status, "uid": f"L{vid}"}, vid=vid)
            edges[vid] = graph.add_edge(tx, WATCH_LIST, vid, "includes", {"IsActive": active}).id
    graph.add_vertex(tx, "listing", {"Status": 0, "uid": f"L{SPARE_LISTING}"}, vid=SPARE_LISTING)
    tx.commit()
    return Fig1(kv, graph, edges)


# -- desk-scale graph --------------------------------------------------------------

LABEL_COUNTS = {"watch-list": 300, "listing": 1400, "seller": 200, "category": 100}
EDGE_COUNTS = {"includes": 6000, "sells": 2600, "in_category": 1400}

STATUSES = (0, 1, 2)
TIERS = ("free", "plus", "premium")
REGIONS = ("us", "eu", "apac")


def default_templates() -> list[SubQueryTemplate]:
    """Six templates: two traverse outgoing edges, four incoming."""
    return [
        SQ1,
        SubQueryTemplate(
            "SQ2",
            Predicate("seller"),
            Predicate("sells", (("IsActive", True),)),
            Predicate("listing"),
            OUT,
        ),
        SubQueryTemplate(
            "SQ3",
            Predicate("listing"),
            Predicate("includes", (("IsActive", WILDCARD),)),
            Predicate("watch-list"),
            IN,
        ),
        SubQueryTemplate(
            "SQ4",
            Predicate("listing"),
            Predicate("sells"),
            Predicate(None, (("region", WILDCARD),)),
            IN,
        ),
        SubQueryTemplate(
            "SQ5",
            Predicate("category"),
            Predicate("in_category", (("primary", WILDCARD),)),
            Predicate(None, (("Status", WILDCARD),)),
            IN,
        ),
        SubQueryTemplate(
            "SQ6",
            Predicate("listing"),
            Predicate("includes", (("IsActive", True),)),
            Predicate(None, (("tier", WILDCARD),)),
            IN,
        ),
    ]


def templates_jsonl(templates=None) -> str:
    return "\n".join(json.dumps(t.to_json()) for t in (templates or default_templates())) + "\n"


def desk_graph_records(
    seed: int = 0,
    label_counts: dict[str, int] | None = None,
    edge_counts: dict[str, int] | None = None,
) -> list[dict]:
    """Ingest records (see :func:`hopcache.graphstore.load_jsonl`) for a random desk graph.

    Every vertex carries a unique ``uid``, which doubles as its file id.
    Some properties are left out at random so wildcard-presence checks are
    exercised.
    """
    rng = random.Random(seed)
    label_counts = label_counts or LABEL_COUNTS
    edge_counts = edge_counts or EDGE_COUNTS
    recs = []
    by_label: dict[str, list[str]] = {}
    prefix = {"watch-list": "W", "listing": "L", "seller": "S", "category": "C"}
    for label, n in label_counts.items():
        for i in range(n):
            uid = f"{prefix.get(label, label[0].upper())}{i}"
            props: dict = {"uid": uid}
            if label == "listing":
                if rng.random() < 0.97:
                    props["Status"] = rng.choice(STATUSES)
                props["tier"] = rng.choice(TIERS)
            elif label == "watch-list":
                props["tier"] = rng.choice(TIERS)
                if rng.random() < 0.2:
                    props["Status"] = rng.choice(STATUSES)
            elif label == "seller":
                if rng.random() < 0.95:
                    props["region"] = rng.choice(REGIONS)
            recs.append({"t": "v", "id": uid, "label": label, "props": props})
            by_label.setdefault(label, []).append(uid)
    spec = {
        "includes": ("watch-list", "listing"),
        "sells": ("seller", "listing"),
        "in_category": ("listing", "category"),
    }
    for label, n in edge_counts.items():
        src, dst = spec[label]
        for _ in range(n):
            out = _skewed(rng, by_label[src])
            props: dict = {}
            if label == "includes":
                if rng.random() < 0.98:
                    props["IsActive"] = rng.random() < 0.7
                props["last_seen"] = rng.randrange(1_000_000)
            elif label == "sells":
                props["IsActive"] = rng.random() < 0.8
            elif label == "in_category":
                if rng.random() < 0.9:
                    props["primary"] = rng.random() < 0.5
            recs.append({"t": "e", "out": out, "in": rng.choice(by_label[dst]), "label": label, "props": props})
    return recs


def _skewed(rng: random.Random, items: list[str]) -> str:
    # a few heavy vertices so some roots fan out widely
    i = int(len(items) * rng.random() ** 2)
    return items[min(i, len(items) - 1)]


def desk_graph_jsonl(seed: int = 0, **kw) -> str:
    return "".join(json.dumps(r) + "\n" for r in desk_graph_records(seed, **kw))
