import random
import threading

import pytest

from cogplant.broker import (
    Broker,
    Deliverer,
    HttpEndpoint,
    InternalEndpoint,
    Registration,
    Subscription,
    backoff_delays,
)
from cogplant.errors import BrokerError
from cogplant.model import Attribute, Entity, EntitySelector, Patch, canonical_serialize, match_selector

T0 = 1_704_067_200_000


def temp_patch(value, at=None, eid="urn:cap:DryerDrum:dryer01"):
    return Patch(eid, "DryerDrum", {"temperature": Attribute.prop(value, "CEL", at)})


def sub(sid="s1", throttle=0, **sel):
    sel = sel or {"entity_type": "DryerDrum"}
    return Subscription(sid, EntitySelector(**sel), InternalEndpoint(sid), throttle)


def test_create_notifies_once():
    b = Broker()
    b.subscribe(sub())
    r = b.upsert(temp_patch(180.0, T0), T0)
    assert r.created and len(r.notifications) == 1
    assert r.notifications[0].changed == {"temperature"}


def test_older_patch_is_silent():
    b = Broker()
    b.subscribe(sub())
    b.upsert(temp_patch(180.0, T0 + 10), T0)
    r = b.upsert(temp_patch(1.0, T0), T0 + 20)
    assert r.applied == frozenset() and r.notifications == []
    assert b.get("urn:cap:DryerDrum:dryer01").attrs["temperature"].value == 180.0


def test_missing_observed_at_is_stamped():
    b = Broker()
    b.upsert(temp_patch(1.0), T0 + 5)
    assert b.get("urn:cap:DryerDrum:dryer01").attrs["temperature"].observed_at == T0 + 5


def test_throttle_scripted_clock():
    b = Broker()
    b.subscribe(sub(throttle=500))
    fired = [len(b.upsert(temp_patch(float(i), T0 + 100 * i), T0 + 100 * i).notifications) for i in range(2)]
    assert fired == [1, 0]


def test_throttle_is_per_entity():
    b = Broker()
    b.subscribe(sub(throttle=500))
    a = b.upsert(temp_patch(1.0, T0, "urn:cap:DryerDrum:a"), T0)
    c = b.upsert(temp_patch(1.0, T0, "urn:cap:DryerDrum:c"), T0)
    assert len(a.notifications) == len(c.notifications) == 1


def _throttle_oracle(times, throttle):
    count, last = 0, None
    for t in times:
        if last is None or t - last >= throttle:
            count, last = count + 1, t
    return count


def test_throttle_random_timelines():
    rng = random.Random(3)
    for _ in range(50):
        throttle = rng.choice([0, 100, 250, 1000])
        times = sorted(T0 + rng.randrange(0, 5000) for _ in range(30))
        b = Broker()
        b.subscribe(sub(throttle=throttle))
        got = sum(len(b.upsert(temp_patch(float(i), t), t).notifications) for i, t in enumerate(times))
        assert got == _throttle_oracle(times, throttle)


def test_query_ordering_and_filter():
    b = Broker()
    assert b.query(EntitySelector(id_pattern="*")) == []
    b.upsert(Patch("urn:cap:B:2", "B", {"x": Attribute.prop(1, None, T0)}), T0)
    b.upsert(Patch("urn:cap:A:9", "A", {"x": Attribute.prop(1, None, T0)}), T0)
    b.upsert(Patch("urn:cap:A:1", "A", {"x": Attribute.prop(1, None, T0)}), T0)
    assert [e.id for e in b.query(EntitySelector("A"))] == ["urn:cap:A:1", "urn:cap:A:9"]
    # watched attributes do not restrict queries
    assert len(b.query(EntitySelector("A", None, frozenset({"nope"})))) == 2


def test_query_random_against_scan():
    rng = random.Random(5)
    b = Broker()
    ents = []
    for i in range(200):
        typ = rng.choice("ABC")
        eid = f"urn:cap:{typ}:{rng.choice(['x', 'y', 'z'])}{i}"
        b.upsert(Patch(eid, typ, {"v": Attribute.prop(float(i), None, T0)}), T0)
        ents.append(b.get(eid))
    for _ in range(20):
        typ = rng.choice([None, "A", "B", "C"])
        pat = rng.choice(["urn:cap:*:x*", "*1?", "urn:cap:A:*", None] if typ else ["*y*", "*:z1*"])
        s = EntitySelector(typ, pat)
        expect = sorted((e for e in ents
                         if (typ is None or e.type == typ) and (pat is None or match_selector(EntitySelector(None, pat), e, ()))),
                        key=lambda e: e.id)
        assert b.query(s) == expect


def test_delete_lifecycle():
    b = Broker()
    b.upsert(temp_patch(1.0, T0), T0)
    assert b.delete_entity("urn:cap:DryerDrum:dryer01")
    assert b.query(EntitySelector("DryerDrum")) == []
    assert not b.delete_entity("urn:cap:DryerDrum:dryer01")
    assert b.upsert(temp_patch(1.0, T0), T0).created


def test_no_replay_for_new_subscription():
    b = Broker()
    b.upsert(temp_patch(1.0, T0), T0)
    b.subscribe(sub())
    queue = b.channel("s1")
    b.pump()
    assert queue.drain() == []
    b.upsert(temp_patch(2.0, T0 + 1), T0 + 1)
    b.pump()
    assert [n.entity.attrs["temperature"].value for n in b.channels["s1"].drain()] == [2.0]


def test_duplicates_rejected():
    b = Broker()
    b.subscribe(sub())
    with pytest.raises(BrokerError) as ei:
        b.subscribe(sub())
    assert ei.value.code == "duplicate-subscription"
    reg = Registration("r1", EntitySelector("SteelBillet"), "http://cloud:8080")
    b.register_source(reg)
    assert b.registrations["r1"] == reg
    with pytest.raises(BrokerError) as ei:
        b.register_source(reg)
    assert ei.value.code == "duplicate-registration"
    with pytest.raises(BrokerError):
        b.register_source(Registration("r2", EntitySelector("X"), "no provider"))


def test_invalid_patch_leaves_state():
    b = Broker()
    with pytest.raises(BrokerError):
        b.upsert(Patch("dryer01", "DryerDrum", {"t": Attribute.prop(1.0, None, T0)}), T0)
    assert b.entities == {}


def test_internal_delivery_in_sequence_order():
    b = Broker()
    b.subscribe(sub())
    for i in range(20):
        b.upsert(temp_patch(float(i), T0 + i), T0 + i)
    assert b.pump() == 20
    assert [n.sequence for n in b.channels["s1"].drain()] == list(range(1, 21))


def test_backoff_schedule():
    assert backoff_delays() == [100, 200, 400, 800]


class Flaky:
    def __init__(self, failures):
        self.failures = failures
        self.calls = []

    def __call__(self, url, body):
        self.calls.append(body)
        if len(self.calls) <= self.failures:
            raise ConnectionError("down")
        return 204


def test_http_retry_then_success():
    http, slept = Flaky(2), []
    d = Deliverer(http=http, sleep=slept.append)
    b = Broker(d)
    b.subscribe(Subscription("h", EntitySelector("DryerDrum"), HttpEndpoint("http://x/notify")))
    n = b.upsert(temp_patch(1.0, T0), T0).notifications[0]
    result = d.deliver(n, HttpEndpoint("http://x/notify"))
    assert result.delivered and result.attempts == 3
    assert slept == [0.1, 0.2]
    assert http.calls[0] == n.body()


def test_dead_letter_after_five():
    http, slept = Flaky(99), []
    d = Deliverer(http=http, sleep=slept.append)
    b = Broker(d)
    b.subscribe(Subscription("h", EntitySelector("DryerDrum"), HttpEndpoint("http://x/notify")))
    b.upsert(temp_patch(1.0, T0), T0)
    assert b.pump() == 0
    assert len(http.calls) == 5 and slept == [0.1, 0.2, 0.4, 0.8]
    assert len(d.dead_letters) == 1 and d.dead_letters[0].attempts == 5
    assert not b.outbox


def test_reentrant_handler():
    b = Broker()

    def mirror(n):
        t = n.entity.attrs["temperature"]
        b.upsert(Patch("urn:cap:Mirror:1", "Mirror", {"copy": Attribute.prop(t.value, "CEL", t.observed_at)}), n.fired_at)

    b.channel("mirror", mirror)
    b.subscribe(Subscription("mirror", EntitySelector("DryerDrum"), InternalEndpoint("mirror")))
    b.subscribe(sub("m", entity_type="Mirror"))
    b.upsert(temp_patch(7.0, T0), T0)
    b.pump()
    assert b.get("urn:cap:Mirror:1").attrs["copy"].value == 7.0
    assert len(b.channels["m"].drain()) == 1


def test_sequences_gapless_under_threads():
    b = Broker()
    b.subscribe(sub(id_pattern="*"))

    def worker(k):
        for i in range(200):
            b.upsert(temp_patch(float(i), T0 + i, f"urn:cap:DryerDrum:{k}"), T0 + i)

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    b.pump()
    seqs = [n.sequence for n in b.channels["s1"].drain()]
    assert seqs == list(range(1, 1601))


def test_same_entity_concurrent_upserts_total_order():
    b = Broker()

    def worker(k):
        for i in range(300):
            b.upsert(Patch("urn:cap:C:1", "C", {f"a{k}": Attribute.prop(float(i), None, T0 + i)}), T0 + i)

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    e = b.get("urn:cap:C:1")
    assert {k: a.value for k, a in e.attrs.items()} == {f"a{k}": 299.0 for k in range(4)}


def test_notification_body_key_order():
    b = Broker()
    b.subscribe(sub())
    n = b.upsert(temp_patch(182.5, T0), T0).notifications[0]
    body = n.body().decode()
    assert body.startswith('{"subscriptionId":"s1","sequence":1,"changed":["temperature"],"entity":{"attrs":')
    assert body.endswith(canonical_serialize(n.entity).decode() + "}")
