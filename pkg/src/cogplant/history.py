"""Subscription-driven time-series store and KPI computation.

The store is an append-only log of numeric points plus an in-memory index
per ``(entityId, attribute)``. Each point is persisted as one line::

    <entityId>\\t<attr>\\t<observedAt>\\t<value>\\t<unit>\\n
"""

from __future__ import annotations

import bisect
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from cogplant.errors import HistoryError
from cogplant.model import PROPERTY, format_number, format_ts, is_number, parse_ts

AGGS = ("raw", "min", "max", "avg", "sum", "count")

KPI_ROLES = {
    "energy_per_unit": ("energy", "output"),
    "waste_percentage": ("waste", "total"),
    "defect_ratio": ("defects", "produced"),
    "productivity": ("output", "hours"),
}
_KPI_SCALE = {"waste_percentage": 100.0}


@dataclass(frozen=True)
class SeriesPoint:
    entity_id: str
    attribute: str
    observed_at: int
    value: float
    unit: str | None = None

    def record_line(self) -> str:
        return (f"{self.entity_id}\t{self.attribute}\t{format_ts(self.observed_at)}\t"
                f"{format_number(self.value)}\t{self.unit or ''}\n")

    @classmethod
    def from_line(cls, line: str) -> SeriesPoint:
        eid, attr, ts, value, unit = line.rstrip("\n").split("\t")
        return cls(eid, attr, parse_ts(ts), float(value), unit or None)


@dataclass(frozen=True)
class Bucket:
    start: int
    value: float


@dataclass(frozen=True)
class SeriesQuery:
    entity_id: str
    attribute: str
    start: int
    end: int
    agg: str = "raw"
    bucket_ms: int | None = None

    def check(self) -> None:
        if self.start >= self.end:
            raise HistoryError("empty-window", "from must be before to")
        if self.agg not in AGGS:
            raise HistoryError("bad-agg", self.agg)
        if self.bucket_ms is not None:
            if self.agg == "raw":
                raise HistoryError("bucket-with-raw", "raw queries are not bucketed")
            if self.bucket_ms <= 0:
                raise HistoryError("bad-bucket", "bucket must be positive")


@dataclass(frozen=True)
class KpiReport:
    name: str
    start: int
    end: int
    value: float
    inputs: Mapping[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "from": format_ts(self.start),
            "to": format_ts(self.end),
            "value": self.value,
            "inputs": dict(self.inputs),
        }


def aggregate(values: list[float], agg: str) -> float:
    if agg == "count":
        return len(values)
    if agg == "min":
        return min(values)
    if agg == "max":
        return max(values)
    total = 0.0
    for v in values:
        total += v
    if agg == "sum":
        return total
    return total / len(values)


class HistoryStore:
    def __init__(self, path: str | Path | None = None) -> None:
        self._series: dict[tuple[str, str], tuple[list[int], list[SeriesPoint]]] = {}
        self.log: list[SeriesPoint] = []
        self._lock = threading.Lock()
        self.path = Path(path) if path else None
        self._fh = None
        if self.path is not None and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        self._index(SeriesPoint.from_line(line))
        if self.path is not None:
            self._fh = self.path.open("a", encoding="utf-8", newline="\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def _index(self, p: SeriesPoint) -> bool:
        times, points = self._series.setdefault((p.entity_id, p.attribute), ([], []))
        i = bisect.bisect_left(times, p.observed_at)
        if i < len(times) and times[i] == p.observed_at:
            return False
        times.insert(i, p.observed_at)
        points.insert(i, p)
        self.log.append(p)
        return True

    def append(self, p: SeriesPoint) -> bool:
        with self._lock:
            added = self._index(p)
            if added and self._fh is not None:
                self._fh.write(p.record_line())
                self._fh.flush()
            return added

    def ingest(self, n: Any) -> int:
        """Append one point per numeric changed attribute of a notification."""
        count = 0
        for name in sorted(n.changed):
            a = n.entity.attrs.get(name)
            if a is None or a.kind != PROPERTY or not is_number(a.value):
                continue
            if self.append(SeriesPoint(n.entity.id, name, a.observed_at, a.value, a.unit)):
                count += 1
        return count

    def points(self, entity_id: str, attribute: str, start: int, end: int) -> list[SeriesPoint]:
        with self._lock:
            entry = self._series.get((entity_id, attribute))
            if entry is None:
                return []
            times, points = entry
            lo = bisect.bisect_left(times, start)
            hi = bisect.bisect_left(times, end)
            return points[lo:hi]

    def series_keys(self) -> list[tuple[str, str]]:
        return sorted(self._series)

    def query_series(self, q: SeriesQuery) -> list[SeriesPoint] | list[Bucket]:
        q.check()
        pts = self.points(q.entity_id, q.attribute, q.start, q.end)
        if q.agg == "raw":
            return pts
        if not pts:
            return []
        if q.bucket_ms is None:
            return [Bucket(q.start, aggregate([p.value for p in pts], q.agg))]
        groups: dict[int, list[float]] = {}
        for p in pts:
            k = (p.observed_at - q.start) // q.bucket_ms
            groups.setdefault(k, []).append(p.value)
        return [Bucket(q.start + k * q.bucket_ms, aggregate(vs, q.agg)) for k, vs in sorted(groups.items())]

    def window_sum(self, entity_id: str, attribute: str, start: int, end: int) -> float:
        total = 0.0
        for p in self.points(entity_id, attribute, start, end):
            total += p.value
        return total

    def compute_kpi(
        self, name: str, start: int, end: int, bindings: Mapping[str, tuple[str, str]]
    ) -> KpiReport:
        if name not in KPI_ROLES:
            raise HistoryError("unknown-kpi", name)
        if start >= end:
            raise HistoryError("empty-window", "from must be before to")
        num_role, den_role = KPI_ROLES[name]
        missing = [r for r in (num_role, den_role) if r not in bindings]
        if missing:
            raise HistoryError("missing-binding", f"{name} needs {missing}")
        num = self.window_sum(*bindings[num_role], start, end)
        den = self.window_sum(*bindings[den_role], start, end)
        if den == 0:
            raise HistoryError("undefined-kpi", f"{name}: zero {den_role}")
        value = _KPI_SCALE.get(name, 1.0) * num / den
        if not math.isfinite(value):
            raise HistoryError("undefined-kpi", f"{name}: non-finite")
        return KpiReport(name, start, end, value, {num_role: num, den_role: den})


def points_to_json(items: Iterable[SeriesPoint | Bucket]) -> list[dict[str, Any]]:
    out = []
    for it in items:
        if isinstance(it, Bucket):
            out.append({"bucketStart": format_ts(it.start), "value": it.value})
        else:
            out.append({"observedAt": format_ts(it.observed_at), "value": it.value})
    return out
