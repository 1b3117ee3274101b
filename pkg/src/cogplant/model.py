"""Context information model.

Entities carry typed, timestamped attributes (Properties and Relationships).
Everything that moves between components is expressed in these types, and the
canonical byte form defined here is what idempotency keys, digests and golden
fixtures are computed over.

Timestamps are integer milliseconds since the Unix epoch, UTC.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import lru_cache
from typing import Any, Iterable, Mapping, NamedTuple, Union

from cogplant.errors import ModelError, ParseError

Scalar = Union[float, int, str, bool]

PROPERTY = "Property"
RELATIONSHIP = "Relationship"

_TS_RE = re.compile(r"^(\d{4})-(\d{2})-(\d{2})T(\d{2}):(\d{2}):(\d{2})\.(\d{3})Z$")
_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


def format_ts(ms: int) -> str:
    """Render epoch milliseconds as ``YYYY-MM-DDThh:mm:ss.mmmZ``."""
    secs, millis = divmod(int(ms), 1000)
    dt = datetime.fromtimestamp(secs, tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%S") + f".{millis:03d}Z"


def parse_ts(text: str) -> int:
    m = _TS_RE.match(text) if isinstance(text, str) else None
    if m is None:
        raise ModelError("bad-timestamp", f"bad timestamp {text!r}")
    y, mo, d, h, mi, s, ms = (int(g) for g in m.groups())
    try:
        dt = datetime(y, mo, d, h, mi, s, tzinfo=timezone.utc)
    except ValueError as exc:
        raise ModelError("bad-timestamp", str(exc)) from None
    delta = dt - _EPOCH
    return (delta.days * 86400 + delta.seconds) * 1000 + ms


def format_number(x: float | int) -> str:
    """Shortest round-trip decimal; integral floats drop the fraction."""
    return json.dumps(_norm_number(x), allow_nan=False)


def _norm_number(x: Any) -> Any:
    if isinstance(x, float) and x.is_integer() and abs(x) < 2**53:
        return int(x)
    return x


def is_scalar(v: Any) -> bool:
    return isinstance(v, (bool, int, float, str))


def is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


@dataclass(frozen=True)
class Attribute:
    kind: str
    value: Scalar | None = None
    object: str | None = None
    unit: str | None = None
    observed_at: int | None = None

    @classmethod
    def prop(cls, value: Scalar, unit: str | None = None, observed_at: int | None = None) -> Attribute:
        return cls(PROPERTY, value=value, unit=unit, observed_at=observed_at)

    @classmethod
    def rel(cls, obj: str, observed_at: int | None = None) -> Attribute:
        return cls(RELATIONSHIP, object=obj, observed_at=observed_at)

    def stamped(self, observed_at: int) -> Attribute:
        return Attribute(self.kind, self.value, self.object, self.unit, observed_at)


@dataclass(frozen=True)
class Entity:
    id: str
    type: str
    attrs: Mapping[str, Attribute] = field(default_factory=dict)


@dataclass(frozen=True)
class EntitySelector:
    entity_type: str | None = None
    id_pattern: str | None = None
    watched: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if not self.entity_type and not self.id_pattern:
            raise ModelError("empty-selector", "selector needs entityType or idPattern")
        object.__setattr__(self, "watched", frozenset(self.watched))


@dataclass(frozen=True)
class Patch:
    entity_id: str
    entity_type: str
    changes: Mapping[str, Attribute]

    def __post_init__(self) -> None:
        if not self.changes:
            raise ModelError("empty-patch", "patch has no changes")


class Violation(NamedTuple):
    code: str
    where: str = ""

    def __str__(self) -> str:
        return self.code


# --- validation -------------------------------------------------------------


def _id_violations(value: Any, where: str) -> list[Violation]:
    if not isinstance(value, str) or not value:
        return [Violation("empty-id", where)]
    out = []
    if not value.startswith("urn:"):
        out.append(Violation("bad-id-prefix", where))
    if any(c.isspace() for c in value):
        out.append(Violation("id-whitespace", where))
    return out


def _attr_violations(name: str, a: Attribute) -> list[Violation]:
    out: list[Violation] = []
    if a.kind == PROPERTY:
        if a.object is not None:
            out.append(Violation("property-has-object", name))
        if a.value is None:
            out.append(Violation("property-missing-value", name))
        elif not is_scalar(a.value):
            out.append(Violation("non-scalar-value", name))
        elif isinstance(a.value, float) and not math.isfinite(a.value):
            out.append(Violation("non-finite", name))
        if a.unit is not None and (not isinstance(a.unit, str) or not a.unit):
            out.append(Violation("bad-unit", name))
    elif a.kind == RELATIONSHIP:
        if a.value is not None:
            out.append(Violation("relationship-has-value", name))
        if a.unit is not None:
            out.append(Violation("relationship-has-unit", name))
        if a.object is None:
            out.append(Violation("relationship-missing-object", name))
        else:
            out.extend(Violation("bad-object-id", name) for _ in _id_violations(a.object, name)[:1])
    else:
        out.append(Violation("bad-kind", name))
    if a.observed_at is None:
        out.append(Violation("missing-observedAt", name))
    return out


def validate_entity(e: Entity) -> list[Violation]:
    """Return every invariant violation of ``e``; an empty list means well-formed."""
    out = _id_violations(e.id, "id")
    if not isinstance(e.type, str) or not e.type:
        out.append(Violation("empty-type", "type"))
    for name, a in e.attrs.items():
        if not isinstance(name, str) or not name:
            out.append(Violation("empty-attr-name", str(name)))
        out.extend(_attr_violations(name, a))
    return out


def validate_patch(p: Patch, require_observed: bool = False) -> list[Violation]:
    out = _id_violations(p.entity_id, "id")
    if not p.entity_type:
        out.append(Violation("empty-type", "type"))
    for name, a in p.changes.items():
        if not name:
            out.append(Violation("empty-attr-name", ""))
        out.extend(
            v for v in _attr_violations(name, a)
            if require_observed or v.code != "missing-observedAt"
        )
    return out


# --- canonical form ---------------------------------------------------------


def attr_to_dict(a: Attribute) -> dict[str, Any]:
    d: dict[str, Any] = {"kind": a.kind}
    if a.observed_at is not None:
        d["observedAt"] = format_ts(a.observed_at)
    if a.kind == RELATIONSHIP:
        d["object"] = a.object
    else:
        d["value"] = _norm_number(a.value)
        if a.unit is not None:
            d["unit"] = a.unit
    return d


def entity_to_dict(e: Entity) -> dict[str, Any]:
    return {
        "attrs": {name: attr_to_dict(a) for name, a in e.attrs.items()},
        "id": e.id,
        "type": e.type,
    }


def dumps_canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def canonical_serialize(e: Entity) -> bytes:
    violations = validate_entity(e)
    if violations:
        if any(v.code == "non-finite" for v in violations):
            raise ModelError("non-finite", "non-finite numeric value")
        raise ModelError("invalid-entity", ", ".join(f"{v.code}@{v.where}" for v in violations))
    return dumps_canonical(entity_to_dict(e)).encode("utf-8")


class _Pairs(list):
    """Marker for a decoded JSON object kept as its raw key/value pairs."""


def _reject_constant(name: str) -> Any:
    raise ValueError(f"non-finite constant {name}")


def attr_from_dict(name: str, d: Any, require_observed: bool = True) -> Attribute:
    if not isinstance(d, dict):
        raise ModelError("bad-attribute", f"attribute {name} is not an object")
    allowed = {"kind", "value", "object", "unit", "observedAt"}
    extra = set(d) - allowed
    if extra:
        raise ModelError("unknown-field", f"attribute {name}: unknown fields {sorted(extra)}")
    kind = d.get("kind")
    if kind not in (PROPERTY, RELATIONSHIP):
        raise ModelError("bad-kind", f"attribute {name}: kind {kind!r}")
    observed = d.get("observedAt")
    if observed is None:
        if require_observed:
            raise ModelError("missing-observedAt", f"attribute {name}")
        ts = None
    else:
        ts = parse_ts(observed)
    value = d.get("value")
    if value is not None and not is_scalar(value):
        raise ModelError("non-scalar-value", f"attribute {name}")
    return Attribute(kind, value=value, object=d.get("object"), unit=d.get("unit"), observed_at=ts)


def _unpair(obj: Any) -> Any:
    if isinstance(obj, _Pairs):
        out = {}
        for k, v in obj:
            if k in out:
                raise ModelError("duplicate-key", k)
            out[k] = _unpair(v)
        return out
    if isinstance(obj, list):
        return [_unpair(v) for v in obj]
    return obj


def _key_offset(raw: bytes, key: str) -> int:
    token = json.dumps(key, ensure_ascii=False).encode("utf-8")
    first = raw.find(token)
    second = raw.find(token, first + 1)
    return second if second >= 0 else max(first, 0)


def canonical_parse(raw: bytes) -> Entity:
    """Parse canonical entity bytes. Errors carry the byte offset of the fault."""
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("bad-utf8", exc.start) from None
    try:
        doc = json.loads(text, object_pairs_hook=_Pairs, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ParseError("malformed", offset, f"malformed JSON at byte {offset}: {exc.msg}") from None
    except ValueError as exc:
        raise ParseError("non-finite", max(raw.find(b"NaN"), raw.find(b"Infinity"), 0), str(exc)) from None
    if not isinstance(doc, _Pairs):
        raise ParseError("not-an-object", 0)
    top: dict[str, Any] = {}
    for k, v in doc:
        if k in top:
            raise ParseError("duplicate-key", _key_offset(raw, k), f"duplicate key {k!r}")
        top[k] = v
    if set(top) != {"attrs", "id", "type"}:
        raise ParseError("bad-shape", 0, f"entity keys {sorted(top)}")
    if not isinstance(top["attrs"], _Pairs):
        raise ParseError("bad-shape", 0, "attrs is not an object")
    attrs: dict[str, Attribute] = {}
    for name, ad in top["attrs"]:
        if name in attrs:
            raise ParseError("duplicate-attr", _key_offset(raw, name), f"duplicate attribute {name!r}")
        try:
            attrs[name] = attr_from_dict(name, _unpair(ad))
        except ModelError as exc:
            raise ParseError(exc.code, _key_offset(raw, name), str(exc)) from None
    e = Entity(top["id"], top["type"], attrs)
    if not isinstance(e.id, str) or not isinstance(e.type, str):
        raise ParseError("bad-shape", 0, "id and type must be strings")
    violations = validate_entity(e)
    if violations:
        raise ParseError(violations[0].code, 0, f"invalid entity: {violations[0].code}")
    return e


def patch_to_dict(p: Patch) -> dict[str, Any]:
    return {
        "attrs": {name: attr_to_dict(a) for name, a in p.changes.items()},
        "id": p.entity_id,
        "type": p.entity_type,
    }


def patch_from_dict(d: Any) -> Patch:
    if not isinstance(d, dict) or not isinstance(d.get("attrs"), dict):
        raise ModelError("bad-patch", "patch must be an object with attrs")
    changes = {name: attr_from_dict(name, ad, require_observed=False) for name, ad in d["attrs"].items()}
    return Patch(str(d.get("id", "")), str(d.get("type", "")), changes)


def selector_to_dict(s: EntitySelector) -> dict[str, Any]:
    d: dict[str, Any] = {}
    if s.entity_type:
        d["entityType"] = s.entity_type
    if s.id_pattern:
        d["idPattern"] = s.id_pattern
    if s.watched:
        d["watchedAttributes"] = sorted(s.watched)
    return d


def selector_from_dict(d: Mapping[str, Any]) -> EntitySelector:
    return EntitySelector(
        entity_type=d.get("entityType") or d.get("type"),
        id_pattern=d.get("idPattern"),
        watched=frozenset(d.get("watchedAttributes", ())),
    )


# --- selectors ----------------------------------------------------------------


@lru_cache(maxsize=4096)
def _glob_regex(pattern: str) -> re.Pattern[str]:
    parts = []
    for ch in pattern:
        if ch == "*":
            parts.append(".*")
        elif ch == "?":
            parts.append(".")
        else:
            parts.append(re.escape(ch))
    return re.compile("".join(parts), re.DOTALL)


def glob_match(pattern: str, text: str) -> bool:
    """Glob with ``*`` (any run) and ``?`` (any one char); nothing else is special."""
    return _glob_regex(pattern).fullmatch(text) is not None


def match_selector(s: EntitySelector, e: Entity, changed: Iterable[str]) -> bool:
    if s.entity_type and s.entity_type != e.type:
        return False
    if s.id_pattern and not glob_match(s.id_pattern, e.id):
        return False
    if s.watched:
        return not s.watched.isdisjoint(changed)
    return True


# --- merge --------------------------------------------------------------------


def merge_patch(e: Entity, p: Patch) -> tuple[Entity, frozenset[str]]:
    """Last-write-wins per attribute on ``observedAt``; equal timestamps overwrite."""
    if p.entity_id != e.id:
        raise ModelError("wrong-entity", f"patch for {p.entity_id} applied to {e.id}")
    attrs = dict(e.attrs)
    applied = []
    for name, incoming in p.changes.items():
        if incoming.observed_at is None:
            raise ModelError("missing-observedAt", name)
        current = attrs.get(name)
        if current is None or incoming.observed_at >= current.observed_at:
            attrs[name] = incoming
            applied.append(name)
    if not applied:
        return e, frozenset()
    return Entity(e.id, e.type, attrs), frozenset(applied)


def entity_from_patch(p: Patch) -> Entity:
    return Entity(p.entity_id, p.entity_type, dict(p.changes))
