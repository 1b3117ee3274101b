"""Edge/cloud component placement as a penalty-minimizing assignment."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping

from cogplant import _kernels

LATENCY_CLASSES = ("Critical", "Normal", "Batch")
NODES = ("Edge", "Cloud")
MAX_COMPONENTS = 20

DEFAULT_PENALTIES: dict[str, dict[str, float]] = {
    "Critical": {"Edge": 0, "Cloud": 100},
    "Normal": {"Edge": 0, "Cloud": 10},
    "Batch": {"Edge": 10, "Cloud": 0},
}


class PlacementError(ValueError):
    pass


@dataclass(frozen=True)
class Component:
    name: str
    cpu: float
    mem: float
    latency_class: str = "Normal"


@dataclass(frozen=True)
class Capacity:
    cpu: float
    mem: float


@dataclass(frozen=True)
class PlacementProblem:
    components: tuple[Component, ...]
    edge: Capacity
    cloud: Capacity
    penalties: Mapping[str, Mapping[str, float]] = field(default_factory=lambda: DEFAULT_PENALTIES)

    def check(self) -> None:
        if len(self.components) > MAX_COMPONENTS:
            raise PlacementError(f"at most {MAX_COMPONENTS} components are supported")
        names = [c.name for c in self.components]
        if len(set(names)) != len(names):
            raise PlacementError("component names must be unique")
        for c in self.components:
            if c.latency_class not in LATENCY_CLASSES:
                raise PlacementError(f"{c.name}: unknown latency class {c.latency_class!r}")
            if c.cpu < 0 or c.mem < 0:
                raise PlacementError(f"{c.name}: negative demand")
        for cap in (self.edge, self.cloud):
            if cap.cpu < 0 or cap.mem < 0:
                raise PlacementError("negative capacity")
        for cls in LATENCY_CLASSES:
            for node in NODES:
                if self.penalty(cls, node) < 0:
                    raise PlacementError("penalties must be >= 0")

    def penalty(self, latency_class: str, node: str) -> float:
        return self.penalties.get(latency_class, {}).get(node, 0)


@dataclass(frozen=True)
class PlacementPlan:
    assignment: dict[str, str]
    total_cost: float
    feasible: bool

    def to_dict(self) -> dict[str, Any]:
        return {"assignment": self.assignment, "totalCost": self.total_cost if self.feasible else None,
                "feasible": self.feasible}


def plan_placement(p: PlacementProblem) -> PlacementPlan:
    """Exact minimum-penalty placement under both nodes' cpu/mem capacities.

    Ties go to the lexicographically smallest assignment in component order
    with Edge before Cloud.
    """
    p.check()
    comps = p.components
    cost, assign = _kernels.place_bnb(
        [float(c.cpu) for c in comps],
        [float(c.mem) for c in comps],
        [float(p.penalty(c.latency_class, "Edge")) for c in comps],
        [float(p.penalty(c.latency_class, "Cloud")) for c in comps],
        float(p.edge.cpu), float(p.edge.mem), float(p.cloud.cpu), float(p.cloud.mem),
    )
    if assign is None:
        return PlacementPlan({}, 0.0, False)
    return PlacementPlan({c.name: NODES[a] for c, a in zip(comps, assign)}, cost, True)


def problem_from_dict(d: Mapping[str, Any]) -> PlacementProblem:
    comps = tuple(
        Component(c["name"], c.get("cpu", 0), c.get("mem", 0), c.get("latencyClass", "Normal"))
        for c in d.get("components", ())
    )
    penalties = {cls: dict(DEFAULT_PENALTIES[cls]) for cls in LATENCY_CLASSES}
    for cls, per_node in d.get("penalties", {}).items():
        penalties.setdefault(cls, {}).update(per_node)
    return PlacementProblem(
        comps,
        Capacity(d["edge"]["cpu"], d["edge"]["mem"]),
        Capacity(d["cloud"]["cpu"], d["cloud"]["mem"]),
        penalties,
    )


def load_problem(path: str) -> PlacementProblem:
    with open(path, encoding="utf-8") as fh:
        return problem_from_dict(json.load(fh))
