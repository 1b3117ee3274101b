"""South-bound ingestion: device provisioning, payload decoders, measure mapping.

Topic grammar::

    /ul/<apiKey>/<deviceId>/attrs     line protocol   t|182.5|rpm|7
    /json/<apiKey>/<deviceId>/attrs   flat JSON       {"t":182.5,"rpm":7}
"""

from __future__ import annotations

import json
import logging
import math
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Mapping

from cogplant.errors import AgentError
from cogplant.model import Attribute, Patch, is_number

log = logging.getLogger(__name__)

VALUE_TYPES = ("number", "string", "boolean")
LINE = "line"
JSON = "json"


@dataclass(frozen=True)
class AttributeMapping:
    name: str
    unit: str | None = None
    value_type: str = "number"
    scale: float = 1.0
    offset: float = 0.0


@dataclass(frozen=True)
class DeviceProvision:
    api_key: str
    device_id: str
    entity_id: str
    entity_type: str
    attribute_map: Mapping[str, AttributeMapping]

    def check(self) -> None:
        if not self.api_key or not self.device_id:
            raise AgentError("bad-provision", "apiKey and deviceId are required")
        if not self.entity_id.startswith("urn:"):
            raise AgentError("bad-provision", f"entity id {self.entity_id!r}")
        if not self.attribute_map:
            raise AgentError("bad-provision", "attributeMap is empty")
        for short, m in self.attribute_map.items():
            if m.value_type not in VALUE_TYPES:
                raise AgentError("bad-provision", f"{short}: valueType {m.value_type!r}")
            if m.scale == 0:
                raise AgentError("zero-scale", f"{short}: transform scale must be non-zero")


@dataclass(frozen=True)
class Measure:
    device_id: str
    readings: Mapping[str, Any]
    received_at: int


def provision_from_dict(d: Mapping[str, Any]) -> DeviceProvision:
    amap = {}
    transforms = d.get("transforms", {})
    for short, spec in d["attributeMap"].items():
        if isinstance(spec, (list, tuple)):
            name, unit, vtype = (list(spec) + [None, "number"])[:3]
        else:
            name, unit, vtype = spec["name"], spec.get("unit"), spec.get("valueType", "number")
        t = transforms.get(short, {})
        amap[short] = AttributeMapping(name, unit, vtype, float(t.get("scale", 1.0)), float(t.get("offset", 0.0)))
    return DeviceProvision(d["apiKey"], d["deviceId"], d["entityId"], d["entityType"], amap)


def provision_to_dict(p: DeviceProvision) -> dict[str, Any]:
    return {
        "apiKey": p.api_key,
        "deviceId": p.device_id,
        "entityId": p.entity_id,
        "entityType": p.entity_type,
        "attributeMap": {
            s: {"name": m.name, "unit": m.unit, "valueType": m.value_type}
            for s, m in p.attribute_map.items()
        },
        "transforms": {
            s: {"scale": m.scale, "offset": m.offset}
            for s, m in p.attribute_map.items()
            if (m.scale, m.offset) != (1.0, 0.0)
        },
    }


class DeviceRegistry:
    def __init__(self) -> None:
        self._devices: dict[tuple[str, str], DeviceProvision] = {}
        self._lock = threading.Lock()
        self.errors: dict[tuple[str, str], Counter[str]] = {}

    def provision(self, p: DeviceProvision) -> None:
        p.check()
        key = (p.api_key, p.device_id)
        with self._lock:
            if key in self._devices:
                raise AgentError("duplicate-device", f"{p.api_key}/{p.device_id}")
            self._devices[key] = p
            self.errors[key] = Counter()

    def lookup(self, api_key: str, device_id: str) -> DeviceProvision:
        try:
            return self._devices[(api_key, device_id)]
        except KeyError:
            raise AgentError("unknown-device", f"{api_key}/{device_id}") from None

    def list(self) -> list[DeviceProvision]:
        return sorted(self._devices.values(), key=lambda p: (p.api_key, p.device_id))


def decode_line(payload: str) -> dict[str, str]:
    tokens = payload.strip().split("|") if payload.strip() else []
    if not tokens or len(tokens) % 2:
        raise AgentError("malformed-line", f"odd token count in {payload!r}")
    out = {}
    for key, value in zip(tokens[::2], tokens[1::2]):
        if not key:
            raise AgentError("empty-key", f"empty key in {payload!r}")
        out[key] = value
    return out


def encode_line(readings: Mapping[str, Any]) -> str:
    return "|".join(f"{k}|{v}" for k, v in readings.items())


def decode_json_measure(payload: bytes) -> dict[str, Any]:
    try:
        doc = json.loads(payload)
    except (ValueError, UnicodeDecodeError) as exc:
        raise AgentError("malformed-json", str(exc)) from None
    if not isinstance(doc, dict):
        raise AgentError("non-flat-measure", "measure must be a JSON object")
    if not doc:
        raise AgentError("empty-measure", "measure has no readings")
    for k, v in doc.items():
        if isinstance(v, (dict, list)):
            raise AgentError("non-flat-measure", f"reading {k!r} is nested")
    return doc


def route_topic(topic: str) -> tuple[str, str, str]:
    parts = topic.split("/")
    if len(parts) == 5 and parts[0] == "" and parts[4] == "attrs" and parts[2] and parts[3]:
        if parts[1] == "ul":
            return LINE, parts[2], parts[3]
        if parts[1] == "json":
            return JSON, parts[2], parts[3]
    raise AgentError("unroutable-topic", topic)


def coerce(raw: Any, value_type: str) -> float | str | bool:
    if value_type == "number":
        if isinstance(raw, bool):
            raise ValueError("boolean is not a number")
        x = float(raw)
        if not math.isfinite(x):
            raise ValueError("non-finite")
        return x
    if value_type == "boolean":
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("true", "1"):
            return True
        if text in ("false", "0"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return raw if isinstance(raw, str) else json.dumps(raw)


def measure_to_patch(p: DeviceProvision, m: Measure, errors: Counter[str] | None = None) -> Patch:
    changes: dict[str, Attribute] = {}
    for short in sorted(m.readings):
        mapping = p.attribute_map.get(short)
        if mapping is None:
            log.warning("device %s: unknown reading %r dropped", p.device_id, short)
            continue
        try:
            value = coerce(m.readings[short], mapping.value_type)
        except (TypeError, ValueError):
            if errors is not None:
                errors[short] += 1
            continue
        if mapping.value_type == "number":
            value = value * mapping.scale + mapping.offset
        changes[mapping.name] = Attribute.prop(value, mapping.unit, m.received_at)
    if not changes:
        raise AgentError("empty-patch", f"no usable readings from {p.device_id}")
    return Patch(p.entity_id, p.entity_type, changes)


@dataclass
class IoTAgent:
    """Routes published frames to provisioned devices and upserts the result."""

    registry: DeviceRegistry
    broker: Any
    upserts: int = 0
    rejected: Counter[str] = field(default_factory=Counter)

    def handle(self, topic: str, payload: bytes | str, received_at: int) -> Patch | None:
        try:
            protocol, api_key, device_id = route_topic(topic)
            prov = self.registry.lookup(api_key, device_id)
            raw = payload if isinstance(payload, bytes) else payload.encode("utf-8")
            readings = decode_line(raw.decode("utf-8")) if protocol == LINE else decode_json_measure(raw)
            patch = measure_to_patch(
                prov, Measure(device_id, readings, received_at), self.registry.errors[(api_key, device_id)]
            )
        except AgentError as exc:
            self.rejected[exc.code] += 1
            log.info("frame on %s rejected: %s", topic, exc)
            return None
        self.broker.upsert(patch, received_at)
        self.upserts += 1
        return patch
