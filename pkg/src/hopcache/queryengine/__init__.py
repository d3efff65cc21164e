"""Traversal parsing, planning and cache-aware execution."""
from .engine import QueryEngine, TemplateSlot, WriteResult
from .parser import EdgeTraverse, Has, HasId, HasLabel, ToVertex, Traversal, parse, parse_template
from .plan import EdgeStep, Hop, Match, QueryPlan, VertexFilter, decompose, group, match_hop
from .rewrite import amdahl_speedup, naive_intersection, rewrite_id_filter, sorted_intersection
from .rmw import delete_edges, update_last_seen, upsert_subgraph

__all__ = [
    "QueryEngine", "TemplateSlot", "WriteResult",
    "EdgeTraverse", "Has", "HasId", "HasLabel", "ToVertex", "Traversal", "parse", "parse_template",
    "EdgeStep", "Hop", "Match", "QueryPlan", "VertexFilter", "decompose", "group", "match_hop",
    "amdahl_speedup", "naive_intersection", "rewrite_id_filter", "sorted_intersection",
    "delete_edges", "update_last_seen", "upsert_subgraph",
]
