import gzip
import json
import random
import threading
import urllib.request

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fleetbed.backend import Backend, OtaCatalog, QueryRequest, Store, decode_upload, tag_table
from fleetbed.backend.http import make_server
from fleetbed.core import Level, LogRecord, TagCategory, TagRegistry, format_record, hash_device_id, parse_stored
from fleetbed.errors import InvalidArgument, MalformedUploadError, SeqConflictError, UnknownDeviceError
from fleetbed.lifecycle import Cohort, Release
from fleetbed.ota import Image

DEV = hash_device_id("A0000011111111")
DEV2 = hash_device_id("A0000022222222")


def payload(records):
    return "".join(format_record(r) + "\n" for r in records).encode()


def recs(n, ts0=1_000_000, tag="T"):
    return [LogRecord(ts0 + i, 7, Level.INFO, tag, f"m{i}") for i in range(n)]


@pytest.fixture
def store(tmp_path):
    s = Store(tmp_path / "store")
    s.enroll(DEV)
    s.enroll(DEV2)
    yield s
    s.close()


def test_reupload_is_all_duplicates(store):
    body = payload(recs(5))
    assert store.ingest(DEV, body, 10, 1).accepted == 5
    again = store.ingest(DEV, body, 11, 1)
    assert (again.accepted, again.duplicates) == (0, 5)
    assert store.record_count() == 5


def test_overlapping_upload(store):
    rs = recs(6)
    store.ingest(DEV, payload(rs[:4]), 10, 1)
    rep = store.ingest(DEV, payload(rs[2:]), 11, 3)
    assert (rep.accepted, rep.duplicates) == (2, 2)


def test_seq_conflict_rejects_envelope(store):
    store.ingest(DEV, payload(recs(3)), 10, 1)
    other = recs(3, ts0=5)
    with pytest.raises(SeqConflictError):
        store.ingest(DEV, payload(other), 11, 3)
    assert store.record_count() == 3


def test_unknown_device(store):
    with pytest.raises(UnknownDeviceError):
        store.ingest(hash_device_id("nobody"), payload(recs(1)), 1, 1)


def test_malformed_envelope_rejected_whole(store):
    body = payload(recs(3)) + b"garbage line\n"
    with pytest.raises(MalformedUploadError) as exc:
        store.ingest(DEV, body, 1, 1)
    assert exc.value.malformed == 1
    assert store.record_count() == 0
    with pytest.raises(MalformedUploadError):
        decode_upload(b"1\t1\tI\tT\tno newline")


def test_gzip_detected(store):
    body = gzip.compress(payload(recs(3)))
    assert store.ingest(DEV, body, 1, 1).accepted == 3


def test_day_boundary_split(store):
    last = 1457395199999999
    rs = [LogRecord(last, 1, Level.INFO, "T", "a"), LogRecord(last + 1, 1, Level.INFO, "T", "b")]
    store.ingest(DEV, payload(rs), 5, 1)
    files = sorted(p.name for p in (store.root / DEV).iterdir() if p.suffix == ".log")
    assert files == ["2016-03-07.log", "2016-03-08.log"]


def test_reload_keeps_dedup(tmp_path):
    root = tmp_path / "s"
    with Store(root) as s:
        s.enroll(DEV)
        s.ingest(DEV, payload(recs(4)), 1, 1)
    with Store(root) as s:
        assert DEV in s.enrolled
        assert s.record_count() == 4
        assert s.ingest(DEV, payload(recs(4)), 2, 1).duplicates == 4


def test_compressed_store(tmp_path):
    with Store(tmp_path / "z", compress=True) as s:
        s.enroll(DEV)
        s.ingest(DEV, payload(recs(4)), 1, 1)
        assert any(p.name.endswith(".log.gz") for p in (s.root / DEV).iterdir())
        assert len(list(s.query(QueryRequest(0, 10**12)))) == 4


def test_empty_store_query(store):
    assert list(store.query(QueryRequest(0, 1, tags={"X"}))) == []


def test_query_request_validation():
    with pytest.raises(InvalidArgument):
        QueryRequest(5, 5)
    with pytest.raises(InvalidArgument):
        QueryRequest(-1, 5)


def _random_store(store, rng, n_files=12):
    reg = TagRegistry.of(phonelab=[("PhoneLab", "Core")], experiments=[("UB", "Watt")])
    store.registry = reg
    tags = ["Kernel-Trace", "SurfaceFlinger", "PhoneLab-Core-Wifi", "UB-Watt-E"]
    seqs = {DEV: 1, DEV2: 1}
    total = 0
    for _ in range(n_files):
        dev = rng.choice([DEV, DEV2])
        n = rng.randint(1, 30)
        rs = [
            LogRecord(rng.randrange(0, 3 * 86_400_000_000), rng.randrange(100), Level.DEBUG, rng.choice(tags), "x")
            for _ in range(n)
        ]
        store.ingest(dev, payload(rs), 1, seqs[dev])
        seqs[dev] += n
        total += n
    return total


def _brute(store, req):
    rows = [
        (s.record.timestamp, s.record.device, s.seq, s)
        for s in (parse_stored(line, seq) for seq, line in store.iter_lines())
        if req.matches(s, store.registry)
    ]
    rows.sort(key=lambda r: r[:3])
    return [r[3] for r in rows]


@settings(max_examples=25)
@given(st.integers(0, 2**32), st.data())
def test_query_matches_scan(tmp_path_factory, seed, data):
    rng = random.Random(seed)
    with Store(tmp_path_factory.mktemp("q")) as store:
        store.enroll(DEV)
        store.enroll(DEV2)
        total = _random_store(store, rng)
        assert len(list(store.query(QueryRequest(0, 10**15)))) == total
        a = data.draw(st.integers(0, 3 * 86_400_000_000))
        b = data.draw(st.integers(a + 1, 3 * 86_400_000_000 + 1))
        tags = data.draw(st.sets(st.sampled_from(["Kernel-Trace", "UB-Watt-E", "PhoneLab-Core-Wifi"])))
        cats = data.draw(st.sets(st.sampled_from(list(TagCategory))))
        devs = data.draw(st.sets(st.sampled_from([DEV, DEV2])))
        req = QueryRequest(a, b, tags=tags, devices=devs, categories=cats)
        assert list(store.query(req)) == _brute(store, req)


def test_tag_stats_example(store):
    store.registry = TagRegistry.of(phonelab=[("PhoneLab", "Core")])
    rs = [LogRecord(i, 1, Level.INFO, "PhoneLab-Core-A" if i < 4 else "PhoneLab-Core-B", "{}") for i in range(10)]
    rs += [LogRecord(100 + i, 1, Level.INFO, "Kernel-Trace", "x") for i in range(5)]
    store.ingest(DEV, payload(rs), 1, 1)
    table = store.tag_stats()
    assert [(r["tag_count"], r["line_count"]) for r in table["rows"]] == [(2, 10), (0, 0), (1, 5)]
    assert table["total"] == {"tag_count": 3, "line_count": 15}
    store.ingest(DEV, payload(rs), 2, 1)
    assert store.tag_stats() == table


def test_tag_table_shape():
    rows = {TagCategory.PHONELAB: [55, 8_674_766_791], TagCategory.EXPERIMENTS: [58, 2_471_169_521],
            TagCategory.OTHER: [12_691, 137_714_283_583]}
    t = tag_table(rows)
    assert [r["category"] for r in t["rows"]] == ["PhoneLab", "Experiments", "Other"]
    assert t["total"] == {"tag_count": 12_804, "line_count": 148_860_219_895}


def hb(device, sent_at=1):
    return {
        "device": device, "sent_at": sent_at, "agent_version": "a", "battery_pct": 50, "charging": True,
        "platform_version": {"version": 1, "fingerprint": "0" * 64}, "buffered_bytes": 0,
        "outbox_bytes": 0, "dropped_count": 0, "pending_ota_target": None,
    }


def test_heartbeats(store):
    be = Backend(store, clock=lambda: 99)
    r = be.handle("POST", "/v1/heartbeat", body=json.dumps(hb(DEV)).encode())
    assert r.status == 200 and len(store.heartbeats) == 1
    assert store.heartbeats[0]["received_at"] == 99
    be.handle("POST", "/v1/heartbeat", body=json.dumps(hb(DEV)).encode())
    assert len(store.heartbeats) == 2
    r = be.handle("POST", "/v1/heartbeat", body=json.dumps(hb(hash_device_id("zz"))).encode())
    assert r.status == 403 and len(store.heartbeats) == 2
    bad = hb(DEV)
    bad["extra"] = 1
    assert be.handle("POST", "/v1/heartbeat", body=json.dumps(bad).encode()).status == 400


def test_routes(store):
    be = Backend(store, clock=lambda: 5)
    body = payload(recs(3))
    r = be.handle("POST", "/v1/upload", f"device={DEV}&seq=1", {"Content-Encoding": "gzip"}, gzip.compress(body))
    assert r.status == 200 and r.json()["accepted"] == 3
    assert be.handle("POST", "/v1/upload", f"device={DEV}&seq=1", body=b"zz\n").status == 400
    assert be.handle("POST", "/v1/upload", f"device={DEV}&seq=2", body=payload(recs(1, ts0=3))).status == 409
    assert be.handle("POST", "/v1/upload", "device=abc&seq=1", body=body).status == 403
    assert be.handle("POST", "/v1/upload", f"device={DEV}", body=body).status == 400
    q = be.handle("GET", "/v1/query", "start=0&end=2000000000&tags=T")
    assert q.status == 200 and q.body.count(b"\n") == 3
    assert be.handle("GET", "/v1/stats/tags").json()["total"]["line_count"] == 3
    assert be.handle("GET", "/nope").status == 404


def test_ota_route(store):
    cat = OtaCatalog(developers={DEV2})
    v1 = Image(1, bytes(range(256)) * 64)
    v2 = Image(2, v1.data[:8192] + b"\1" * 8192)
    v3 = Image(3, v2.data[:4096] + b"\2" * 12288)
    cat.add_release(Release(1, frozenset(), Cohort.ALL, 0), v1)
    cat.add_release(Release(2, frozenset(), Cohort.ALL, 1), v2)
    cat.add_release(Release(3, frozenset(), Cohort.DEVELOPERS, 2), v3)
    be = Backend(store, cat)
    r = be.handle("GET", "/v1/ota", f"device={DEV}&version=1")
    assert r.status == 200
    assert be.handle("GET", "/v1/ota", f"device={DEV}&version=2").status == 204
    assert be.handle("GET", "/v1/ota", f"device={DEV2}&version=2").status == 200
    with pytest.raises(InvalidArgument):
        cat.add_release(Release(4, frozenset(), Cohort.ALL, 3), v3)


def test_http_server_roundtrip(store):
    server = make_server(Backend(store), "127.0.0.1", 0)
    t = threading.Thread(target=server.serve_forever, daemon=True)
    t.start()
    try:
        host, port = server.server_address
        url = f"http://{host}:{port}"
        req = urllib.request.Request(f"{url}/v1/upload?device={DEV}&seq=1", data=payload(recs(2)), method="POST")
        with urllib.request.urlopen(req) as resp:
            assert json.loads(resp.read())["accepted"] == 2
        with urllib.request.urlopen(f"{url}/v1/query?start=0&end=9999999999") as resp:
            assert resp.read().count(b"\n") == 2
    finally:
        server.shutdown()
        server.server_close()


def test_concurrent_ingest(store):
    errors = []

    def worker(dev, base):
        try:
            for k in range(10):
                store.ingest(dev, payload(recs(5, ts0=base + k * 5)), 1, 1 + k * 5)
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(d, b)) for d, b in ((DEV, 0), (DEV2, 10_000))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors and store.record_count() == 100
