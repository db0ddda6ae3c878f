import pytest

from fleetbed.agent import (
    Action,
    AgentPolicy,
    AgentState,
    Conductor,
    DeviceEnv,
    build_heartbeat,
    filter_optout,
    on_tick,
    should_apply_ota,
    upload_due,
)
from fleetbed.backend import HEARTBEAT_FIELDS
from fleetbed.core import Level, LogRecord, TagRegistry
from fleetbed.errors import InvalidArgument
from fleetbed.logbuffer import Source
from fleetbed.ota import generate

from scenarios import S, FakeTransport, deferred_apply_scenario, images

H = 3600 * S
DAY = 24 * H


def state_with_pending():
    base, target = images()
    st = AgentState(device="d" * 64, image=base)
    st.pending_ota = generate(base, target)
    return st


def env_at(hour, minute=0, idle_min=35, charging=True, day=20_000):
    now = day * DAY + hour * H + minute * 60 * S
    return DeviceEnv(now=now, charging=charging, last_interaction=now - idle_min * 60 * S)


def fill(st, nbytes):
    i = 0
    while st.buffer.used_bytes < nbytes:
        st.buffer.append(Source.APP, 1000 + i, 1, "I", "T", "x" * 200)
        i += 1


def test_upload_examples():
    st = AgentState(device="d" * 64, image=images()[0])
    fill(st, 100 * 1024)
    env = DeviceEnv(now=10 * S, charging=True, network_up=True)
    assert Action.UPLOAD_FILE in on_tick(st, env)
    assert Action.UPLOAD_FILE not in on_tick(st, DeviceEnv(now=10 * S, charging=False))
    assert on_tick(st, env) == on_tick(st, env)


def test_small_buffer_waits_for_age():
    st = AgentState(device="d" * 64, image=images()[0])
    st.buffer.append(Source.APP, 0, 1, "I", "T", "x")
    assert not upload_due(st, DeviceEnv(now=H, charging=True))
    assert upload_due(st, DeviceEnv(now=6 * H, charging=True))


@pytest.mark.parametrize(
    "hour,charging,idle,expected",
    [(1.5, True, 35, True), (1.5, False, 35, False), (13, True, 35, False), (1.5, True, 10, False)],
)
def test_should_apply_examples(hour, charging, idle, expected):
    st = state_with_pending()
    env = env_at(int(hour), int((hour % 1) * 60), idle_min=idle, charging=charging)
    assert should_apply_ota(st, env) is expected


def test_apply_needs_pending():
    st = AgentState(device="d" * 64, image=images()[0])
    assert not should_apply_ota(st, env_at(1))


def test_local_time_offset():
    st = state_with_pending()
    # 06:00 UTC is 01:00 at UTC-5
    now = 20_000 * DAY + 6 * H
    env = DeviceEnv(now=now, local_time_offset=-5 * 3600, charging=True, last_interaction=now - H)
    assert should_apply_ota(st, env)
    assert env.next_local_midnight() == 20_001 * DAY + 5 * H


def test_on_tick_does_not_mutate():
    st = state_with_pending()
    before = (st.last_heartbeat_at, st.pending_ota, st.ota_prompt_declined_until, len(st.buffer))
    acts = on_tick(st, env_at(1))
    assert Action.APPLY_OTA in acts and Action.PROMPT_USER not in acts
    assert before == (st.last_heartbeat_at, st.pending_ota, st.ota_prompt_declined_until, len(st.buffer))


def test_filter_optout():
    reg = TagRegistry.of(experiments=[("UB", "Watt")])
    rs = [LogRecord(1, 1, Level.INFO, "UB-Watt-Energy", "{}"), LogRecord(2, 1, Level.INFO, "Kernel-Trace", "x")]
    kept, removed = filter_optout(rs, {("UB", "Watt")}, reg)
    assert [r.tag for r in kept] == ["Kernel-Trace"] and removed == 1
    assert filter_optout(rs, set(), reg) == (rs, 0)
    assert filter_optout(rs, {("XX", "Yy")}, reg) == (rs, 0)


def test_conductor_optout_keeps_seqs_contiguous():
    reg = TagRegistry.of(experiments=[("UB", "Watt")])
    st = AgentState(device="d" * 64, image=images()[0], optout={("UB", "Watt")})
    c = Conductor(st, FakeTransport(), reg)
    for i in range(6):
        c.log(Source.APP, i, 1, "I", "UB-Watt-E" if i % 2 else "Other", "{}")
    assert (st.generated, st.optout_filtered, len(st.buffer)) == (6, 3, 3)
    assert [e[0] for e in st.buffer.entries] == [1, 2, 3]


def test_heartbeat_mirror():
    st = state_with_pending()
    hb = build_heartbeat(st, DeviceEnv(now=5))
    assert (hb.buffered_bytes, hb.dropped_count, hb.pending_ota_target) == (0, 0, 2)
    for i in range(3):
        st.buffer.append(Source.APP, i, 1, "I", "T", "m")
    body = build_heartbeat(st, DeviceEnv(now=5)).to_json()
    assert set(body) == set(HEARTBEAT_FIELDS)
    assert body["buffered_bytes"] == st.buffer.used_bytes


def test_upload_backoff_and_recovery():
    st = AgentState(device="d" * 64, image=images()[0])
    tr = FakeTransport()
    tr.fail_uploads = 3
    c = Conductor(st, tr)
    fill(st, 100 * 1024)
    env = DeviceEnv(now=H, charging=True)
    backoffs = []
    for _ in range(3):
        c.execute(Action.UPLOAD_FILE, env)
        backoffs.append(st.retry_backoff)
    assert backoffs == [60, 120, 240]
    assert not upload_due(st, env)
    c.execute(Action.UPLOAD_FILE, env)
    assert st.retry_backoff == 0 and not st.outbox and tr.uploads
    firsts = [f for f, _ in tr.uploads]
    assert firsts == sorted(firsts)


def test_backoff_capped():
    st = AgentState(device="d" * 64, image=images()[0])
    tr = FakeTransport()
    tr.fail_uploads = 100
    c = Conductor(st, tr)
    fill(st, 1024)
    for _ in range(20):
        c.execute(Action.UPLOAD_FILE, DeviceEnv(now=H, charging=True))
    assert st.retry_backoff == 3600


def test_prompt_decline_until_midnight():
    base, target = images()
    st = AgentState(device="d" * 64, image=base)
    c = Conductor(st, FakeTransport([generate(base, target).to_bytes()]), answer_prompt=lambda s, e: False)
    c.tick(env_at(13, 59, idle_min=0, charging=False))
    c.tick(env_at(14, idle_min=0, charging=False))
    assert st.pending_ota is not None and st.ota_prompt_declined_until is None
    c.tick(env_at(14, 1, idle_min=0, charging=False))
    assert st.ota_prompt_declined_until == (20_000 + 1) * DAY
    later = env_at(15, idle_min=0, charging=False)
    assert Action.PROMPT_USER not in on_tick(st, later)


def test_prompt_accept_installs():
    base, target = images()
    st = AgentState(device="d" * 64, image=base)
    c = Conductor(st, FakeTransport([generate(base, target).to_bytes()]), answer_prompt=lambda s, e: True)
    c.tick(env_at(13, 59, idle_min=0, charging=False))
    c.tick(env_at(14, idle_min=0, charging=False))
    c.tick(env_at(14, 1, idle_min=0, charging=False))
    assert st.image.data == target.data and st.pending_ota is None


def test_corrupt_offer_discarded():
    st = AgentState(device="d" * 64, image=images()[0])
    c = Conductor(st, FakeTransport([b"not a package"]))
    c.tick(env_at(14))
    assert st.ota_offer is not None
    c.tick(env_at(14, 1))
    assert st.pending_ota is None and st.ota_offer is None


def test_deferred_apply_local_midnight():
    delta, st = deferred_apply_scenario()
    assert delta == 10 * 60
    assert st.image.version == 2


def test_policy_validation():
    with pytest.raises(InvalidArgument):
        AgentPolicy(apply_window=(5, 5))
    with pytest.raises(InvalidArgument):
        AgentPolicy(heartbeat_interval_s=0)
    with pytest.raises(InvalidArgument):
        DeviceEnv(now=0, last_interaction=5)
    assert AgentPolicy.from_mapping({"apply_window": [0, 100]}).apply_window == (0, 100)
