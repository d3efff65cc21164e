"""Transactional one-hop sub-query result cache for a property graph.

The graph and the cache live as two subspaces of one ordered, transactional
key-value store, so cache maintenance commits atomically with the graph
writes that require it.
"""
from .cache import CachePopulator, CacheStore, decode, encode
from .errors import *  # noqa: F401,F403
from .graphstore import BOTH, IN, OUT, Edge, GraphChange, GraphStore, Vertex
from .kvstore import MAX_VALUE_SIZE, KVStore, Transaction
from .maintenance import ImpactReport, MaintenancePolicy, Maintainer, impact_bound_check
from .queryengine import QueryEngine, parse, parse_template
from .templates import WILDCARD, CacheKey, Predicate, SubQueryTemplate, build_key

__version__ = "0.1.0"
