"""Stream cognition: declarative processor chains and batch model fitting.

Fast path: each notification is run through an ordered chain of processors
(thresholds, EWMA, sliding statistics, z-score detection, rate of change,
linear soft sensors). Slow path: ordinary least squares over history, whose
coefficients deploy back into the fast path as a ``SoftSensor``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence, Union

from cogplant import _kernels
from cogplant.errors import PipelineError
from cogplant.model import (
    Attribute,
    EntitySelector,
    Patch,
    format_ts,
    is_number,
    selector_from_dict,
    selector_to_dict,
)

log = logging.getLogger(__name__)


# --- processor specs ----------------------------------------------------------


@dataclass(frozen=True)
class Threshold:
    limit: float
    direction: str = "above"


@dataclass(frozen=True)
class Ewma:
    alpha: float


@dataclass(frozen=True)
class SlidingStats:
    n: int


@dataclass(frozen=True)
class ZScoreDetector:
    n: int
    k: float
    epsilon: float


@dataclass(frozen=True)
class RateOfChange:
    pass


@dataclass(frozen=True)
class SoftSensor:
    coefficients: tuple[float, ...]
    inputs: tuple[str, ...]


ProcessorSpec = Union[Threshold, Ewma, SlidingStats, ZScoreDetector, RateOfChange, SoftSensor]


@dataclass(frozen=True)
class WriteAttribute:
    attribute: str
    entity_id: str | None = None  # None writes back to the source entity
    entity_type: str | None = None


@dataclass(frozen=True)
class EmitAlert:
    alert_type: str


Sink = Union[WriteAttribute, EmitAlert]


@dataclass(frozen=True)
class PipelineSpec:
    id: str
    selector: EntitySelector
    attribute: str | None
    processors: tuple[ProcessorSpec, ...]
    sink: Sink

    @property
    def inputs(self) -> tuple[str, ...]:
        first = self.processors[0]
        if isinstance(first, SoftSensor):
            return first.inputs
        return (self.attribute,) if self.attribute else ()


def check_processor(p: ProcessorSpec) -> None:
    if isinstance(p, Ewma):
        if not (0 < p.alpha <= 1):
            raise PipelineError("alpha-out-of-range", f"alpha={p.alpha} must be in (0, 1]")
    elif isinstance(p, (SlidingStats, ZScoreDetector)):
        if int(p.n) != p.n or p.n < 2:
            raise PipelineError("window-too-small", f"n={p.n} must be an integer >= 2")
        if isinstance(p, ZScoreDetector):
            if not p.k > 0:
                raise PipelineError("k-out-of-range", f"k={p.k} must be > 0")
            if not p.epsilon > 0:
                raise PipelineError("epsilon-out-of-range", f"epsilon={p.epsilon} must be > 0")
    elif isinstance(p, Threshold):
        if p.direction not in ("above", "below"):
            raise PipelineError("bad-direction", p.direction)
        if not math.isfinite(p.limit):
            raise PipelineError("bad-limit", "limit must be finite")
    elif isinstance(p, SoftSensor):
        if not p.inputs:
            raise PipelineError("arity-mismatch", "soft sensor needs at least one input")
        if len(p.coefficients) != len(p.inputs) + 1:
            raise PipelineError(
                "arity-mismatch",
                f"{len(p.coefficients)} coefficients for {len(p.inputs)} inputs (need inputs + 1)",
            )


def _num(d: dict, key: str, kind: str) -> float:
    if key not in d:
        raise PipelineError("missing-field", f"{kind} needs {key!r}")
    v = d[key]
    if not is_number(v):
        raise PipelineError("bad-field", f"{kind}.{key} must be a number")
    return v


def processor_from_dict(d: dict) -> ProcessorSpec:
    kind = d.get("kind")
    if kind == "Threshold":
        p: ProcessorSpec = Threshold(_num(d, "limit", kind), d.get("direction", "above"))
    elif kind == "Ewma":
        p = Ewma(_num(d, "alpha", kind))
    elif kind == "SlidingStats":
        p = SlidingStats(_num(d, "n", kind))
    elif kind == "ZScoreDetector":
        p = ZScoreDetector(_num(d, "n", kind), _num(d, "k", kind), d.get("epsilon", 1e-6))
    elif kind == "RateOfChange":
        p = RateOfChange()
    elif kind == "SoftSensor":
        p = SoftSensor(tuple(float(b) for b in d.get("coefficients", ())), tuple(d.get("inputs", ())))
    else:
        raise PipelineError("unknown-kind", f"unknown processor kind {kind!r}")
    check_processor(p)
    return p


def processor_to_dict(p: ProcessorSpec) -> dict[str, Any]:
    if isinstance(p, Threshold):
        return {"kind": "Threshold", "limit": p.limit, "direction": p.direction}
    if isinstance(p, Ewma):
        return {"kind": "Ewma", "alpha": p.alpha}
    if isinstance(p, SlidingStats):
        return {"kind": "SlidingStats", "n": p.n}
    if isinstance(p, ZScoreDetector):
        return {"kind": "ZScoreDetector", "n": p.n, "k": p.k, "epsilon": p.epsilon}
    if isinstance(p, RateOfChange):
        return {"kind": "RateOfChange"}
    return {"kind": "SoftSensor", "coefficients": list(p.coefficients), "inputs": list(p.inputs)}


def parse_spec(text: str | bytes | dict) -> PipelineSpec:
    """Parse and check a JSON pipeline definition."""
    if isinstance(text, dict):
        doc = text
    else:
        try:
            doc = json.loads(text)
        except ValueError as exc:
            raise PipelineError("malformed-spec", str(exc)) from None
    if not isinstance(doc, dict):
        raise PipelineError("malformed-spec", "pipeline spec must be an object")
    pid = doc.get("id")
    if not pid or not isinstance(pid, str):
        raise PipelineError("missing-field", "pipeline needs an id")
    src = doc.get("source")
    if not isinstance(src, dict):
        raise PipelineError("missing-field", "pipeline needs a source")
    try:
        selector = selector_from_dict(src)
    except Exception as exc:
        raise PipelineError("bad-source", str(exc)) from None
    raw_procs = doc.get("processors")
    if not isinstance(raw_procs, list) or not raw_procs:
        raise PipelineError("empty-processors", "pipeline needs at least one processor")
    procs = tuple(processor_from_dict(p) for p in raw_procs)
    for i, p in enumerate(procs):
        if isinstance(p, SoftSensor) and i != 0 and len(p.inputs) != 1:
            raise PipelineError("arity-mismatch", "a multi-input SoftSensor must be the first processor")
    attribute = src.get("attribute")
    if not isinstance(procs[0], SoftSensor) and not attribute:
        raise PipelineError("missing-field", "source needs an attribute")
    sink_doc = doc.get("sink")
    if not isinstance(sink_doc, dict):
        raise PipelineError("bad-sink", "pipeline needs a sink")
    if sink_doc.get("kind") == "EmitAlert" and sink_doc.get("alertType"):
        sink: Sink = EmitAlert(sink_doc["alertType"])
    elif sink_doc.get("kind") == "WriteAttribute" and sink_doc.get("attribute"):
        sink = WriteAttribute(sink_doc["attribute"], sink_doc.get("entityId"), sink_doc.get("entityType"))
        if sink.entity_id and not sink.entity_type:
            raise PipelineError("bad-sink", "WriteAttribute to another entity needs entityType")
    else:
        raise PipelineError("bad-sink", f"unsupported sink {sink_doc!r}")
    return PipelineSpec(pid, selector, attribute, procs, sink)


def spec_to_dict(spec: PipelineSpec) -> dict[str, Any]:
    src = selector_to_dict(spec.selector)
    src.pop("watchedAttributes", None)
    if spec.attribute:
        src["attribute"] = spec.attribute
    if isinstance(spec.sink, EmitAlert):
        sink: dict[str, Any] = {"kind": "EmitAlert", "alertType": spec.sink.alert_type}
    else:
        sink = {"kind": "WriteAttribute", "attribute": spec.sink.attribute}
        if spec.sink.entity_id:
            sink["entityId"] = spec.sink.entity_id
            sink["entityType"] = spec.sink.entity_type
    return {"id": spec.id, "source": src, "processors": [processor_to_dict(p) for p in spec.processors], "sink": sink}


# --- streaming step -------------------------------------------------------------


@dataclass(frozen=True)
class StepOutput:
    value: float | None
    alert: float | None = None
    details: str = ""
    dropped: bool = False


NONE = StepOutput(None)


def initial_state(spec: ProcessorSpec) -> Any:
    if isinstance(spec, (SlidingStats, ZScoreDetector)):
        return ()
    return None


def _finite(x: Any) -> bool:
    if isinstance(x, tuple):
        return all(isinstance(v, (int, float)) and math.isfinite(v) for v in x)
    return isinstance(x, (int, float)) and math.isfinite(x)


def step(state: Any, spec: ProcessorSpec, x: float | tuple[float, ...], t: int) -> tuple[Any, StepOutput]:
    """Advance one processor by one sample. Pure: ``state`` is never mutated."""
    if not _finite(x):
        return state, StepOutput(None, dropped=True)
    if isinstance(spec, Threshold):
        over = x > spec.limit if spec.direction == "above" else x < spec.limit
        if over:
            score = x - spec.limit if spec.direction == "above" else spec.limit - x
            return state, StepOutput(x, score, f"{x} {spec.direction} limit {spec.limit}")
        return state, StepOutput(x)
    if isinstance(spec, Ewma):
        y = x if state is None else spec.alpha * x + (1.0 - spec.alpha) * state
        return y, StepOutput(y)
    if isinstance(spec, SlidingStats):
        window = (state + (x,))[-spec.n:]
        total = 0.0
        for v in window:
            total += v
        return window, StepOutput(total / len(window))
    if isinstance(spec, ZScoreDetector):
        if len(state) < spec.n:
            return state + (x,), NONE
        mu, s, z = _kernels.window_zscore(state, x, spec.epsilon)
        nxt = state[1:] + (x,)
        if abs(z) > spec.k:
            return nxt, StepOutput(x, z, f"z={z:.4f} mean={mu:.6g} sd={s:.6g} k={spec.k}")
        return nxt, StepOutput(x)
    if isinstance(spec, RateOfChange):
        if state is None:
            return (x, t), NONE
        px, pt = state
        dt = (t - pt) / 1000.0
        if dt <= 0:
            return (x, t), NONE
        return (x, t), StepOutput((x - px) / dt)
    if isinstance(spec, SoftSensor):
        xs = x if isinstance(x, tuple) else (x,)
        if len(xs) != len(spec.inputs):
            raise PipelineError("arity-mismatch", f"expected {len(spec.inputs)} inputs")
        y = spec.coefficients[0]
        for b, v in zip(spec.coefficients[1:], xs):
            y += b * v
        return state, StepOutput(y)
    raise PipelineError("unknown-kind", type(spec).__name__)


# --- runtime ----------------------------------------------------------------------


@dataclass(frozen=True)
class Alert:
    pipeline_id: str
    alert_type: str
    entity_id: str
    attribute: str
    observed_at: int
    score: float
    details: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "pipelineId": self.pipeline_id,
            "alertType": self.alert_type,
            "entityId": self.entity_id,
            "attribute": self.attribute,
            "observedAt": format_ts(self.observed_at),
            "score": self.score,
            "details": self.details,
        }

    def to_patch(self, seq: int) -> Patch:
        t = self.observed_at
        return Patch(
            f"urn:cap:Alert:{self.pipeline_id}-{seq}",
            "Alert",
            {
                "alertType": Attribute.prop(self.alert_type, observed_at=t),
                "attribute": Attribute.prop(self.attribute, observed_at=t),
                "details": Attribute.prop(self.details, observed_at=t),
                "score": Attribute.prop(self.score, observed_at=t),
                "source": Attribute.rel(self.entity_id, observed_at=t),
            },
        )


Effect = Union[Patch, Alert]


class PipelineRuntime:
    """One pipeline instance; feed it notifications strictly in order."""

    def __init__(self, spec: PipelineSpec) -> None:
        self.spec = spec
        self.states = [initial_state(p) for p in spec.processors]
        self.latest: dict[tuple[str, str], tuple[float, int]] = {}
        self.dropped = 0
        self.ticks = 0

    def _extract(self, n: Any) -> tuple[Any, int, str] | None:
        spec = self.spec
        attrs = n.entity.attrs
        first = spec.processors[0]
        if isinstance(first, SoftSensor):
            if not any(name in n.changed for name in first.inputs):
                return None
            for name in first.inputs:
                a = attrs.get(name)
                if a is not None and is_number(a.value):
                    self.latest[(n.entity.id, name)] = (a.value, a.observed_at)
            joined = [self.latest.get((n.entity.id, name)) for name in first.inputs]
            if any(j is None for j in joined):
                return None
            return tuple(v for v, _ in joined), max(t for _, t in joined), first.inputs[0]
        name = spec.attribute
        a = attrs.get(name) if name in n.changed else None
        if a is None or not is_number(a.value):
            return None
        return a.value, a.observed_at, name

    def run_tick(self, n: Any) -> list[Effect]:
        got = self._extract(n)
        if got is None:
            return []
        x, t, attr_name = got
        self.ticks += 1
        alerts: list[tuple[float, str]] = []
        value: Any = x
        for i, proc in enumerate(self.spec.processors):
            self.states[i], out = step(self.states[i], proc, value, t)
            if out.dropped:
                self.dropped += 1
                return []
            if out.alert is not None:
                alerts.append((out.alert, out.details))
            if out.value is None:
                value = None
                break
            value = out.value
        sink = self.spec.sink
        if isinstance(sink, EmitAlert):
            return [Alert(self.spec.id, sink.alert_type, n.entity.id, attr_name, t, score, details)
                    for score, details in alerts]
        if value is None:
            return []
        target = sink.entity_id or n.entity.id
        target_type = sink.entity_type or n.entity.type
        return [Patch(target, target_type, {sink.attribute: Attribute.prop(value, observed_at=t)})]


@dataclass
class PipelineHost:
    """Wires pipeline runtimes to a broker through internal subscriptions."""

    broker: Any
    upsert_alerts: bool = True
    alert_sink: Callable[[Alert], None] | None = None
    runtimes: dict[str, PipelineRuntime] = field(default_factory=dict)
    alerts: list[Alert] = field(default_factory=list)

    def add(self, spec: PipelineSpec) -> PipelineRuntime:
        from cogplant.broker import InternalEndpoint, Subscription

        if spec.id in self.runtimes:
            raise PipelineError("duplicate-pipeline", spec.id)
        rt = self.runtimes[spec.id] = PipelineRuntime(spec)
        channel = f"pipeline:{spec.id}"
        self.broker.channel(channel, lambda n, rt=rt: self._on_notification(rt, n))
        selector = EntitySelector(spec.selector.entity_type, spec.selector.id_pattern, frozenset(spec.inputs))
        self.broker.subscribe(Subscription(channel, selector, InternalEndpoint(channel)))
        return rt

    def _on_notification(self, rt: PipelineRuntime, n: Any) -> None:
        for effect in rt.run_tick(n):
            if isinstance(effect, Alert):
                self.alerts.append(effect)
                if self.upsert_alerts:
                    self.broker.upsert(effect.to_patch(len(self.alerts)), effect.observed_at)
                if self.alert_sink is not None:
                    self.alert_sink(effect)
            else:
                self.broker.upsert(effect, n.fired_at)


# --- slow thinking ------------------------------------------------------------------

PIVOT_TOL = 1e-10


@dataclass(frozen=True)
class FittedModel:
    coefficients: tuple[float, ...]
    inputs: tuple[str, ...]
    target: str
    residual_rmse: float
    fitted_at: int
    sample_count: int

    def to_soft_sensor(self) -> SoftSensor:
        return SoftSensor(self.coefficients, self.inputs)

    def to_dict(self) -> dict[str, Any]:
        return {
            "coefficients": list(self.coefficients),
            "inputs": list(self.inputs),
            "target": self.target,
            "residualRmse": self.residual_rmse,
            "fittedAt": format_ts(self.fitted_at),
            "sampleCount": self.sample_count,
        }


def solve_gauss(a: list[list[float]], b: list[float]) -> list[float]:
    """Solve ``a x = b`` by Gaussian elimination with partial pivoting."""
    n = len(b)
    m = [row[:] + [b[i]] for i, row in enumerate(a)]
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(m[r][col]))
        if abs(m[piv][col]) < PIVOT_TOL:
            raise PipelineError("degenerate-design", f"pivot {m[piv][col]:.3g} in column {col}")
        if piv != col:
            m[col], m[piv] = m[piv], m[col]
        pivot_row = m[col]
        for r in range(col + 1, n):
            f = m[r][col] / pivot_row[col]
            if f:
                row = m[r]
                for c in range(col, n + 1):
                    row[c] -= f * pivot_row[c]
    x = [0.0] * n
    for i in range(n - 1, -1, -1):
        acc = m[i][n]
        for j in range(i + 1, n):
            acc -= m[i][j] * x[j]
        x[i] = acc / m[i][i]
    return x


def fit_linear(
    rows: Sequence[tuple[Sequence[float], float]],
    inputs: Sequence[str] | None = None,
    target: str = "y",
    fitted_at: int = 0,
) -> FittedModel:
    """Ordinary least squares with an intercept via the normal equations."""
    if not rows:
        raise PipelineError("too-few-samples", "no samples")
    m = len(rows[0][0])
    if len(rows) < m + 1:
        raise PipelineError("too-few-samples", f"{len(rows)} samples for {m + 1} coefficients")
    p = m + 1
    xtx = [[0.0] * p for _ in range(p)]
    xty = [0.0] * p
    for xs, y in rows:
        if len(xs) != m:
            raise PipelineError("arity-mismatch", "ragged design")
        row = (1.0, *xs)
        for i in range(p):
            ri = row[i]
            xty[i] += ri * y
            xi = xtx[i]
            for j in range(p):
                xi[j] += ri * row[j]
    coef = solve_gauss(xtx, xty)
    ss = 0.0
    for xs, y in rows:
        pred = coef[0]
        for b, v in zip(coef[1:], xs):
            pred += b * v
        ss += (y - pred) ** 2
    names = tuple(inputs) if inputs is not None else tuple(f"x{i + 1}" for i in range(m))
    return FittedModel(tuple(coef), names, target, math.sqrt(ss / len(rows)), fitted_at, len(rows))


def fit_from_history(
    store: Any, entity_id: str, target: str, inputs: Sequence[str], start: int, end: int, fitted_at: int = 0
) -> FittedModel:
    """Join input and target series on identical ``observedAt`` and fit."""
    series = {name: {p.observed_at: p.value for p in store.points(entity_id, name, start, end)}
              for name in (*inputs, target)}
    common = sorted(set.intersection(*(set(s) for s in series.values())))
    rows = [(tuple(series[name][t] for name in inputs), series[target][t]) for t in common]
    return fit_linear(rows, inputs, target, fitted_at)
