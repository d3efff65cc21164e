"""Compare two runs of the same trace: improvement factors over a baseline."""
from __future__ import annotations

from dataclasses import dataclass

from .metrics import RunMetrics

STATS = ("p50", "p95", "p99")


@dataclass
class Comparison:
    workload: str
    candidate: str
    baseline: str
    rows: list[dict]  # {"ops", "stat", "candidate_us", "baseline_us", "factor"}

    def factor(self, stat: str = "p95", ops: str = "read") -> float | None:
        for r in self.rows:
            if r["ops"] == ops and r["stat"] == stat:
                return r["factor"]
        return None

    def to_json(self) -> dict:
        return {"workload": self.workload, "candidate": self.candidate, "baseline": self.baseline, "rows": self.rows}

    def to_text(self) -> str:
        head = ("ops", "stat", f"{self.candidate} (us)", f"{self.baseline} (us)", "factor")
        body = [
            (r["ops"], r["stat"], f"{r['candidate_us']:.1f}", f"{r['baseline_us']:.1f}",
             "n/a" if r["factor"] is None else f"{r['factor']:.2f}x")
            for r in self.rows
        ]
        widths = [max(len(str(x[i])) for x in [head, *body]) for i in range(len(head))]
        lines = [f"workload: {self.workload or '-'}"]
        for row in [head, *body]:
            lines.append("  ".join(str(x).rjust(w) if i >= 2 else str(x).ljust(w)
                                   for i, (x, w) in enumerate(zip(row, widths))))
        return "\n".join(lines)


def _as_metrics(m) -> RunMetrics:
    return m if isinstance(m, RunMetrics) else RunMetrics.from_json(m)


def report(candidate, baseline) -> Comparison:
    """Factor of improvement = baseline latency / candidate latency, per percentile."""
    if baseline is None:
        raise ValueError("a baseline run is required")
    if candidate is None:
        raise ValueError("a candidate run is required")
    a, b = _as_metrics(candidate), _as_metrics(baseline)
    rows = []
    for ops in ("read", "write", "all"):
        sa, sb = a.summary(ops), b.summary(ops)
        if not sa or not sb:
            continue
        for stat in STATS:
            x, y = sa[stat], sb[stat]
            rows.append({"ops": ops, "stat": stat, "candidate_us": x, "baseline_us": y,
                         "factor": y / x if x > 0 else None})
    return Comparison(a.workload or b.workload, a.config.get("label", "run"), b.config.get("label", "run"), rows)
