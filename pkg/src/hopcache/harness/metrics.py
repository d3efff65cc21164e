"""Run metrics: latency percentiles, hit rates, impacted-key histograms, errors."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path


def percentile(values, p: float) -> float:
    """Nearest-rank percentile: the smallest value with at least ``p``% of values at or below it."""
    if not 0 < p <= 100:
        raise ValueError("p must lie in (0, 100]")
    xs = sorted(values)
    if not xs:
        raise ValueError("percentile of an empty sample")
    rank = max(1, math.ceil(p / 100.0 * len(xs)))
    return xs[rank - 1]


def summarize(values) -> dict | None:
    if not values:
        return None
    return {
        "n": len(values),
        "mean": sum(values) / len(values),
        "p50": percentile(values, 50),
        "p95": percentile(values, 95),
        "p99": percentile(values, 99),
        "max": max(values),
    }


@dataclass
class RunMetrics:
    workload: str = ""
    config: dict = field(default_factory=dict)
    ops: int = 0
    elapsed_s: float = 0.0
    latencies_us: dict[str, list[float]] = field(default_factory=lambda: {"read": [], "write": []})
    hits: Counter = field(default_factory=Counter)
    misses: Counter = field(default_factory=Counter)
    impacted_keys: dict[str, Counter] = field(default_factory=dict)  # write kind -> {keys: count}
    errors: Counter = field(default_factory=Counter)
    diffs: int = 0
    diff_examples: list = field(default_factory=list)
    oracle_checks: int = 0
    oracle_violations: list = field(default_factory=list)
    populate: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    loaded_summary: dict = field(default_factory=dict, repr=False)  # percentiles read back from JSON

    def record(self, kind: str, micros: float) -> None:
        self.latencies_us.setdefault(kind, []).append(micros)

    def record_impact(self, write_kind: str, keys: int) -> None:
        self.impacted_keys.setdefault(write_kind, Counter())[keys] += 1

    def hit_rate(self, template: str | None = None) -> float | None:
        if template is None:
            h, m = sum(self.hits.values()), sum(self.misses.values())
        else:
            h, m = self.hits[template], self.misses[template]
        return h / (h + m) if h + m else None

    def percentiles(self, kind: str = "read") -> dict | None:
        if kind == "all":
            return summarize([x for v in self.latencies_us.values() for x in v])
        return summarize(self.latencies_us.get(kind, []))

    def to_json(self, raw: bool = False) -> dict:
        names = sorted(set(self.hits) | set(self.misses))
        out = {
            "workload": self.workload,
            "config": self.config,
            "ops": self.ops,
            "elapsed_s": self.elapsed_s,
            "latency_us": {k: self.percentiles(k) for k in ("read", "write", "all")},
            "hit_rate": self.hit_rate(),
            "templates": {n: {"hits": self.hits[n], "misses": self.misses[n], "hit_rate": self.hit_rate(n)}
                          for n in names},
            "impacted_keys": {k: {str(n): c for n, c in sorted(v.items())} for k, v in self.impacted_keys.items()},
            "errors": dict(self.errors),
            "diffs": self.diffs,
            "diff_examples": self.diff_examples,
            "oracle_checks": self.oracle_checks,
            "oracle_violations": self.oracle_violations,
            "populate": self.populate,
            "counters": self.counters,
        }
        if raw:
            out["latencies_us"] = self.latencies_us
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "RunMetrics":
        m = cls(obj.get("workload", ""), obj.get("config", {}), obj.get("ops", 0), obj.get("elapsed_s", 0.0))
        if "latencies_us" in obj:
            m.latencies_us = {k: list(v) for k, v in obj["latencies_us"].items()}
        for n, t in obj.get("templates", {}).items():
            m.hits[n], m.misses[n] = t["hits"], t["misses"]
        m.impacted_keys = {k: Counter({int(n): c for n, c in v.items()}) for k, v in obj.get("impacted_keys", {}).items()}
        m.errors = Counter(obj.get("errors", {}))
        m.diffs = obj.get("diffs", 0)
        m.diff_examples = obj.get("diff_examples", [])
        m.oracle_checks = obj.get("oracle_checks", 0)
        m.oracle_violations = obj.get("oracle_violations", [])
        m.populate = obj.get("populate", {})
        m.counters = obj.get("counters", {})
        m.loaded_summary = obj.get("latency_us") or {}
        return m

    def summary(self, kind: str) -> dict | None:
        """Percentiles, from raw latencies when present, else from a loaded summary."""
        if self.latencies_us.get(kind) or kind == "all" and any(self.latencies_us.values()):
            return self.percentiles(kind)
        return self.loaded_summary.get(kind)

    def save(self, path: str | Path, raw: bool = False) -> None:
        Path(path).write_text(json.dumps(self.to_json(raw), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunMetrics":
        return cls.from_json(json.loads(Path(path).read_text()))
