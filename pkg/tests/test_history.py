import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cogplant.broker import Notification
from cogplant.errors import HistoryError
from cogplant.history import Bucket, HistoryStore, SeriesPoint, SeriesQuery, points_to_json
from cogplant.model import Attribute, Entity

EID = "urn:cap:ProductionMeter:m1"


def note(attrs, changed=None, seq=1):
    e = Entity(EID, "ProductionMeter", attrs)
    return Notification("h", e, frozenset(changed or attrs), 0, seq)


def test_ingest_numeric_only_and_idempotent():
    h = HistoryStore()
    n = note({"energy": Attribute.prop(100.0, "KWH", 1), "output": Attribute.prop(10, "TNE", 1),
              "site": Attribute.rel("urn:cap:Plant:p", 1), "mode": Attribute.prop("auto", None, 1)})
    assert h.ingest(n) == 2
    assert h.ingest(n) == 0
    assert [p.attribute for p in h.log] == ["energy", "output"]


def test_only_changed_attributes():
    h = HistoryStore()
    n = note({"energy": Attribute.prop(1.0, None, 1), "output": Attribute.prop(2.0, None, 1)}, {"energy"})
    assert h.ingest(n) == 1


def fill(h, values, attr="energy"):
    for t, v in values:
        h.append(SeriesPoint(EID, attr, t, v))


def test_bucket_example():
    h = HistoryStore()
    fill(h, [(1, 10.0), (2, 10.0), (3, 10.0)])
    assert h.query_series(SeriesQuery(EID, "energy", 0, 10, "avg", 10)) == [Bucket(0, 10.0)]
    assert h.query_series(SeriesQuery(EID, "energy", 20, 30)) == []


def test_windows_are_half_open():
    h = HistoryStore()
    fill(h, [(0, 1.0), (10, 2.0)])
    assert [p.observed_at for p in h.query_series(SeriesQuery(EID, "energy", 0, 10))] == [0]


@pytest.mark.parametrize("q,code", [
    (SeriesQuery(EID, "energy", 5, 5), "empty-window"),
    (SeriesQuery(EID, "energy", 0, 5, "median"), "bad-agg"),
    (SeriesQuery(EID, "energy", 0, 5, "raw", 2), "bucket-with-raw"),
    (SeriesQuery(EID, "energy", 0, 5, "sum", 0), "bad-bucket"),
])
def test_query_errors(q, code):
    with pytest.raises(HistoryError) as ei:
        HistoryStore().query_series(q)
    assert ei.value.code == code


def _naive(points, q):
    sel = sorted((p for p in points if p.entity_id == q.entity_id and p.attribute == q.attribute
                  and q.start <= p.observed_at < q.end), key=lambda p: p.observed_at)
    if q.agg == "raw":
        return [(p.observed_at, p.value) for p in sel]
    out = []
    b = q.start
    width = q.bucket_ms or (q.end - q.start)
    while b < q.end:
        vs = [p.value for p in sel if b <= p.observed_at < b + width]
        if vs:
            acc = 0.0
            for v in vs:
                acc += v
            val = {"sum": acc, "avg": acc / len(vs), "min": min(vs), "max": max(vs), "count": len(vs)}[q.agg]
            out.append((b, val))
        b += width
    return out


def test_random_queries_against_scan():
    rng = random.Random(9)
    h = HistoryStore()
    pts = {}
    for _ in range(1000):
        attr = rng.choice(["energy", "output"])
        t = rng.randrange(0, 10_000)
        p = SeriesPoint(EID, attr, t, round(rng.uniform(-50, 50), 3))
        if (attr, t) not in pts:
            pts[(attr, t)] = p
        h.append(p)
    assert len(h.log) == len(pts)
    for _ in range(300):
        a, b = sorted(rng.sample(range(-100, 10_100), 2))
        agg = rng.choice(["raw", "sum", "avg", "min", "max", "count"])
        bucket = None if agg == "raw" else rng.choice([None, 7, 100, 999])
        q = SeriesQuery(EID, rng.choice(["energy", "output"]), a, b, agg, bucket)
        got = h.query_series(q)
        got = [(x.observed_at, x.value) if isinstance(x, SeriesPoint) else (x.start, x.value) for x in got]
        assert got == _naive(pts.values(), q)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(0, 999), st.integers(-1000, 1000)), max_size=60),
       st.integers(1, 998))
def test_partition_additivity(raw, cut):
    h = HistoryStore()
    fill(h, [(t, float(v)) for t, v in raw])
    total = h.query_series(SeriesQuery(EID, "energy", 0, 1000, "sum"))
    left = h.query_series(SeriesQuery(EID, "energy", 0, cut, "sum"))
    right = h.query_series(SeriesQuery(EID, "energy", cut, 1000, "sum"))
    tv = total[0].value if total else 0.0
    assert tv == pytest.approx(sum(b.value for b in left + right), abs=1e-9)
    cnt = lambda a, b: sum(x.value for x in h.query_series(SeriesQuery(EID, "energy", a, b, "count")))
    assert cnt(0, 1000) == cnt(0, cut) + cnt(cut, 1000)
    if total:
        avg = h.query_series(SeriesQuery(EID, "energy", 0, 1000, "avg"))[0].value
        assert avg == pytest.approx(tv / cnt(0, 1000))


@given(st.lists(st.tuples(st.integers(0, 50), st.integers(-5, 5)), max_size=30))
def test_ingest_multiset_equals_set(items):
    a, b = HistoryStore(), HistoryStore()
    notes = [note({"energy": Attribute.prop(float(v), None, t)}) for t, v in items]
    for n in notes + notes:
        a.ingest(n)
    seen = set()
    for n in notes:
        key = n.entity.attrs["energy"].observed_at
        if key not in seen:
            seen.add(key)
            b.ingest(n)
    assert a.points(EID, "energy", 0, 100) == b.points(EID, "energy", 0, 100)


class TestKpi:
    def setup_method(self):
        self.h = HistoryStore()
        fill(self.h, [(1, 100.0), (2, 50.0)], "energy")
        fill(self.h, [(1, 10.0), (2, 5.0)], "output")
        fill(self.h, [(1, 5.0)], "waste")
        fill(self.h, [(1, 100.0)], "total")

    def test_energy_per_unit(self):
        r = self.h.compute_kpi("energy_per_unit", 0, 10, {"energy": (EID, "energy"), "output": (EID, "output")})
        assert r.value == 10.0 and r.inputs == {"energy": 150.0, "output": 15.0}

    def test_waste_percentage(self):
        r = self.h.compute_kpi("waste_percentage", 0, 10, {"waste": (EID, "waste"), "total": (EID, "total")})
        assert r.value == 5.0

    def test_other_kpis(self):
        assert self.h.compute_kpi("defect_ratio", 0, 10, {"defects": (EID, "waste"), "produced": (EID, "total")}).value == 0.05
        assert self.h.compute_kpi("productivity", 0, 10, {"output": (EID, "output"), "hours": (EID, "waste")}).value == 3.0

    @pytest.mark.parametrize("name,bindings,code", [
        ("energy_per_unit", {"energy": (EID, "energy"), "output": (EID, "none")}, "undefined-kpi"),
        ("energy_per_unit", {"energy": (EID, "energy")}, "missing-binding"),
        ("oee", {}, "unknown-kpi"),
    ])
    def test_errors(self, name, bindings, code):
        with pytest.raises(HistoryError) as ei:
            self.h.compute_kpi(name, 0, 10, bindings)
        assert ei.value.code == code


def test_record_line_and_reload(tmp_path):
    path = tmp_path / "history.log"
    h = HistoryStore(path)
    h.append(SeriesPoint("urn:cap:DryerDrum:dryer01", "temperature", 1_704_067_200_000, 182.5, "CEL"))
    h.append(SeriesPoint("urn:cap:DryerDrum:dryer01", "temperature", 1_704_067_200_000, 999.0, "CEL"))
    h.append(SeriesPoint("urn:cap:M:1", "count", 1_704_067_201_000, 3.0))
    h.close()
    assert path.read_bytes() == (
        b"urn:cap:DryerDrum:dryer01\ttemperature\t2024-01-01T00:00:00.000Z\t182.5\tCEL\n"
        b"urn:cap:M:1\tcount\t2024-01-01T00:00:01.000Z\t3\t\n"
    )
    again = HistoryStore(path)
    assert again.log == h.log
    again.close()


def test_points_json():
    assert points_to_json([SeriesPoint(EID, "e", 0, 1.5), Bucket(1000, 2.0)]) == [
        {"observedAt": "1970-01-01T00:00:00.000Z", "value": 1.5},
        {"bucketStart": "1970-01-01T00:00:01.000Z", "value": 2.0},
    ]
