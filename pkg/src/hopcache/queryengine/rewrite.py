"""Query rewrites and the small analytical helpers that go with them."""
from __future__ import annotations

import functools
from typing import Mapping, MutableMapping, Sequence

import numpy as np

from ..errors import DomainError
from .parser import EdgeTraverse, Has, HasId, ToVertex, Traversal


def rewrite_id_filter(
    traversal: Traversal,
    aliases: Mapping[str, int],
    alias_property: str = "uid",
) -> Traversal:
    """Turn ``has(<alias_property>, neq(A))`` into ``hasId(neq(id(A)))`` when A is the start vertex.

    The start is identified either as ``g.V("A")`` or by a start filter
    ``has(<alias_property>, "A")``; its built-in id comes from the alias
    table, so the rewritten filter needs no property fetch. Only
    inequality filters are rewritten: equality terms take part in template
    matching, and changing them could change which templates serve a hop.

    The rewrite assumes every vertex carries the alias property (it is the
    unique external key the alias table is built from).
    """
    anchor = traversal.start if isinstance(traversal.start, str) else None
    if anchor is None and traversal.start is None:
        for s in traversal.steps:
            if isinstance(s, (EdgeTraverse, ToVertex)):
                break
            if isinstance(s, Has) and not s.negate and s.name == alias_property and isinstance(s.value, str):
                anchor = s.value
                break
    if anchor is None or anchor not in aliases:
        return traversal
    vid = aliases[anchor]
    steps = []
    changed = False
    for s in traversal.steps:
        if isinstance(s, Has) and s.negate and s.name == alias_property and s.value == anchor and isinstance(s.value, str):
            steps.append(HasId(vid, negate=True))
            changed = True
        else:
            steps.append(s)
    if not changed:
        return traversal
    return Traversal(traversal.start, tuple(steps), traversal.final)


# -- sort before merge ---------------------------------------------------------

def sorted_intersection(
    a: Sequence[int], b: Sequence[int], stats: MutableMapping[str, int] | None = None
) -> list[int]:
    """Intersect by sorting both inputs and merging; counts every comparison."""
    comparisons = 0

    def cmp(x, y):
        nonlocal comparisons
        comparisons += 1
        return (x > y) - (x < y)

    key = functools.cmp_to_key(cmp)
    xs = sorted(a, key=key)
    ys = sorted(b, key=key)
    out: list[int] = []
    i = j = 0
    while i < len(xs) and j < len(ys):
        x, y = xs[i], ys[j]
        comparisons += 1
        if x < y:
            i += 1
        elif x > y:
            comparisons += 1
            j += 1
        else:
            comparisons += 1
            if not out or out[-1] != x:
                out.append(x)
            i += 1
            j += 1
    if stats is not None:
        stats["comparisons"] = stats.get("comparisons", 0) + comparisons
    return out


def naive_intersection(
    a: Sequence[int], b: Sequence[int], stats: MutableMapping[str, int] | None = None
) -> list[int]:
    """Nested-loop intersection: each element of ``a`` is searched linearly in ``b``.

    Comparisons are counted as the linear search would perform them
    (stopping at the first hit); the search itself is vectorized.
    """
    bb = np.asarray(b, dtype=np.int64)
    n = len(bb)
    comparisons = 0
    found = set()
    for x in a:
        hits = np.flatnonzero(bb == x)
        if hits.size:
            comparisons += int(hits[0]) + 1
            found.add(int(x))
        else:
            comparisons += n
    if stats is not None:
        stats["comparisons"] = stats.get("comparisons", 0) + comparisons
    return sorted(found)


def amdahl_speedup(f: float, k: float) -> float:
    """Overall speedup when a fraction ``f`` of the work is sped up ``k`` times."""
    if not (0.0 <= f <= 1.0):
        raise DomainError(f"fraction must lie in [0, 1], got {f}")
    if not k > 0:
        raise DomainError(f"speedup must be positive, got {k}")
    return 1.0 / ((1.0 - f) + f / k)
