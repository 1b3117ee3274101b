import itertools
import math
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cogplant.errors import ModelError, ParseError
from cogplant.model import (
    Attribute,
    Entity,
    EntitySelector,
    Patch,
    canonical_parse,
    canonical_serialize,
    format_number,
    format_ts,
    glob_match,
    match_selector,
    merge_patch,
    parse_ts,
    validate_entity,
)

T0 = parse_ts("2024-01-01T00:00:00.000Z")
finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


def dryer(temp=182.5, at=T0):
    return Entity("urn:cap:DryerDrum:dryer01", "DryerDrum", {
        "temperature": Attribute.prop(temp, "CEL", at),
        "plant": Attribute.rel("urn:cap:Plant:gerena", at),
    })


def codes(e):
    return [v.code for v in validate_entity(e)]


class TestValidate:
    def test_well_formed(self):
        assert validate_entity(dryer()) == []

    def test_property_with_object(self):
        e = Entity("urn:cap:X:1", "X", {"a": Attribute("Property", 1.0, "urn:cap:Y:1", None, T0)})
        assert codes(e) == ["property-has-object"]

    def test_missing_urn_prefix(self):
        assert "bad-id-prefix" in codes(Entity("dryer01", "DryerDrum", {}))

    @pytest.mark.parametrize("attr,code", [
        (Attribute.prop(float("nan"), None, T0), "non-finite"),
        (Attribute.prop(None, None, T0), "property-missing-value"),
        (Attribute.prop(1.0, None, None), "missing-observedAt"),
        (Attribute("Relationship", 1.0, "urn:cap:Y:1", None, T0), "relationship-has-value"),
        (Attribute("Relationship", None, None, None, T0), "relationship-missing-object"),
        (Attribute("Relationship", None, "urn:cap:Y:1", "CEL", T0), "relationship-has-unit"),
        (Attribute("Thing", 1.0, None, None, T0), "bad-kind"),
    ])
    def test_attribute_violations(self, attr, code):
        assert code in codes(Entity("urn:cap:X:1", "X", {"a": attr}))

    def test_whitespace_and_empty(self):
        assert "id-whitespace" in codes(Entity("urn:cap:X 1", "X", {}))
        assert "empty-type" in codes(Entity("urn:cap:X:1", "", {}))


class TestCanonical:
    def test_wire_format(self):
        e = Entity("urn:cap:DryerDrum:dryer01", "DryerDrum", {"temperature": Attribute.prop(182.50, "CEL", T0)})
        assert canonical_serialize(e) == (
            b'{"attrs":{"temperature":{"kind":"Property","observedAt":"2024-01-01T00:00:00.000Z",'
            b'"unit":"CEL","value":182.5}},"id":"urn:cap:DryerDrum:dryer01","type":"DryerDrum"}'
        )

    def test_relationship_form(self):
        raw = canonical_serialize(dryer())
        assert b'"plant":{"kind":"Relationship","object":"urn:cap:Plant:gerena","observedAt":"2024-01-01T00:00:00.000Z"}' in raw

    def test_insertion_order(self):
        a = dryer()
        b = Entity(a.id, a.type, dict(reversed(list(a.attrs.items()))))
        assert canonical_serialize(a) == canonical_serialize(b)

    def test_non_finite(self):
        with pytest.raises(ModelError) as ei:
            canonical_serialize(dryer(temp=math.inf))
        assert ei.value.code == "non-finite"

    def test_truncated_has_offset(self):
        raw = canonical_serialize(dryer())
        with pytest.raises(ParseError) as ei:
            canonical_parse(raw[:40])
        assert ei.value.code == "malformed"
        assert 0 <= ei.value.offset <= 40

    def test_duplicate_attr(self):
        raw = (b'{"attrs":{"a":{"kind":"Property","observedAt":"2024-01-01T00:00:00.000Z","value":1},'
               b'"a":{"kind":"Property","observedAt":"2024-01-01T00:00:00.000Z","value":2}},'
               b'"id":"urn:cap:X:1","type":"X"}')
        with pytest.raises(ParseError) as ei:
            canonical_parse(raw)
        assert ei.value.code == "duplicate-attr"
        assert raw[ei.value.offset:].startswith(b'"a"')

    @pytest.mark.parametrize("x,text", [(182.50, "182.5"), (1.0, "1"), (0.1, "0.1"), (-0.0, "0"), (7, "7")])
    def test_number_rendering(self, x, text):
        assert format_number(x) == text

    @given(finite)
    def test_number_round_trips(self, x):
        assert float(format_number(x)) == x

    def test_timestamps(self):
        assert format_ts(0) == "1970-01-01T00:00:00.000Z"
        assert parse_ts("2024-02-29T23:59:59.999Z") - parse_ts("2024-02-29T00:00:00.000Z") == 86_399_999
        with pytest.raises(ModelError):
            parse_ts("2024-01-01T00:00:00Z")


names = st.from_regex(r"[a-z][a-zA-Z0-9]{0,8}", fullmatch=True)
scalars = st.one_of(finite, st.integers(-(2 ** 53), 2 ** 53), st.booleans(), st.text(max_size=12))
stamps = st.integers(0, 4_102_444_800_000)
props = st.builds(Attribute.prop, scalars, st.one_of(st.none(), st.sampled_from(["CEL", "KWH", "TNE"])), stamps)
rels = st.builds(Attribute.rel, st.from_regex(r"urn:cap:[A-Z][a-z]{1,6}:[a-z0-9]{1,6}", fullmatch=True), stamps)
entities = st.builds(
    Entity,
    st.from_regex(r"urn:cap:[A-Za-z]{1,8}:[a-z0-9]{1,8}", fullmatch=True),
    st.sampled_from(["DryerDrum", "BilletCaster", "TabletPress"]),
    st.dictionaries(names, st.one_of(props, rels), max_size=6),
)


@settings(max_examples=300)
@given(entities)
def test_round_trip(e):
    assert validate_entity(e) == []
    raw = canonical_serialize(e)
    back = canonical_parse(raw)
    assert canonical_serialize(back) == raw
    for k, a in e.attrs.items():
        b = back.attrs[k]
        assert (a.kind, a.object, a.unit, a.observed_at) == (b.kind, b.object, b.unit, b.observed_at)
        assert a.value == b.value and isinstance(a.value, bool) == isinstance(b.value, bool)


@given(entities)
def test_serialize_is_order_independent(e):
    shuffled = Entity(e.id, e.type, dict(sorted(e.attrs.items(), reverse=True)))
    assert canonical_serialize(shuffled) == canonical_serialize(e)


def _naive_glob(pattern, text):
    # character-level recursive matcher, independent of the regex translation
    if not pattern:
        return not text
    if pattern[0] == "*":
        return any(_naive_glob(pattern[1:], text[i:]) for i in range(len(text) + 1))
    if not text:
        return False
    return (pattern[0] == "?" or pattern[0] == text[0]) and _naive_glob(pattern[1:], text[1:])


def _naive_match(s, e, changed):
    if s.entity_type is not None and s.entity_type != e.type:
        return False
    if s.id_pattern is not None and not _naive_glob(s.id_pattern, e.id):
        return False
    return not s.watched or bool(set(s.watched) & set(changed))


class TestSelector:
    def test_examples(self):
        e = dryer()
        s = EntitySelector("DryerDrum", "urn:*:dryer*", frozenset({"temperature"}))
        assert match_selector(s, e, {"temperature"})
        assert not match_selector(EntitySelector("DryerDrum", None, frozenset({"pressure"})), e, {"temperature"})

    def test_empty_selector(self):
        with pytest.raises(ModelError):
            EntitySelector()

    def test_glob_has_no_regex_meaning(self):
        assert glob_match("urn:a.b", "urn:a.b")
        assert not glob_match("urn:a.b", "urn:axb")
        assert glob_match("a[1]", "a[1]")
        assert glob_match("a?c", "abc") and not glob_match("a?c", "ac")

    def test_random_against_naive(self):
        import random

        rng = random.Random(11)
        alpha = "ab:"
        attrs = ["t", "p", "q"]
        types = ["A", "B"]
        sels, ents = [], []
        for _ in range(50):
            pat = "".join(rng.choice(alpha + "*?") for _ in range(rng.randint(1, 6))) if rng.random() < 0.8 else None
            typ = rng.choice(types) if rng.random() < 0.5 or pat is None else None
            watched = frozenset(a for a in attrs if rng.random() < 0.3)
            sels.append(EntitySelector(typ, pat, watched))
            eid = "urn:" + "".join(rng.choice(alpha) for _ in range(rng.randint(0, 5)))
            ents.append((Entity(eid, rng.choice(types), {}), {a for a in attrs if rng.random() < 0.5}))
        checked = 0
        for s, (e, changed) in itertools.product(sels, ents):
            assert match_selector(s, e, changed) == _naive_match(s, e, changed)
            checked += 1
        assert checked == 2500


class TestMerge:
    def test_newer_applies(self):
        e = dryer()
        new, applied = merge_patch(e, Patch(e.id, e.type, {"temperature": Attribute.prop(190.0, "CEL", T0 + 1)}))
        assert applied == {"temperature"} and new.attrs["temperature"].value == 190.0

    def test_older_ignored(self):
        e = dryer()
        new, applied = merge_patch(e, Patch(e.id, e.type, {"temperature": Attribute.prop(1.0, "CEL", T0 - 1)}))
        assert applied == frozenset() and new == e

    def test_tie_overwrites(self):
        e = dryer()
        new, applied = merge_patch(e, Patch(e.id, e.type, {"temperature": Attribute.prop(1.0, "CEL", T0)}))
        assert applied == {"temperature"} and new.attrs["temperature"].value == 1.0

    def test_wrong_entity(self):
        with pytest.raises(ModelError) as ei:
            merge_patch(dryer(), Patch("urn:cap:Other:1", "DryerDrum", {"x": Attribute.prop(1, None, T0)}))
        assert ei.value.code == "wrong-entity"


patches = st.dictionaries(st.sampled_from(["a", "b", "c", "d"]),
                          st.builds(Attribute.prop, finite, st.none(), st.integers(0, 50)), min_size=1)


@given(patches, patches)
def test_merge_idempotent_and_disjoint_commutative(c1, c2):
    base = Entity("urn:cap:X:1", "X", {"a": Attribute.prop(0.0, None, 10)})
    p1 = Patch(base.id, base.type, c1)
    once, _ = merge_patch(base, p1)
    twice, _ = merge_patch(once, p1)
    assert canonical_serialize(once) == canonical_serialize(twice)
    c2 = {k: v for k, v in c2.items() if k not in c1}
    if c2:
        p2 = Patch(base.id, base.type, c2)
        ab = merge_patch(merge_patch(base, p1)[0], p2)[0]
        ba = merge_patch(merge_patch(base, p2)[0], p1)[0]
        assert canonical_serialize(ab) == canonical_serialize(ba)
