import pytest

from fleetbed.core import Level, LogRecord, TagCategory
from fleetbed.errors import InvalidArgument, StagingError, StateError
from fleetbed.lifecycle import (
    Cohort,
    DataRequest,
    DecisionStatus,
    Event,
    Experiment,
    Lifecycle,
    State,
    authorize_data_request,
    execute_data_request,
    transition,
)

H = 3600 * 1_000_000


def deployed_lc():
    lc = Lifecycle()
    lc.create("UB", "Watt", now=0)
    for i, ev in enumerate([Event.APPROVE, Event.START_DEV, Event.STAGE]):
        lc.apply("UB-Watt", ev, i + 1)
    return lc


def test_basic_edges():
    exp = Experiment("UB", "Watt")
    exp = transition(exp, Event.APPROVE, 1)
    assert exp.state is State.APPROVED
    with pytest.raises(StateError) as err:
        transition(exp, Event.DEPLOY, 2)
    assert "state-error" in str(err.value)


def test_staged_can_return_to_development():
    lc = deployed_lc()
    assert lc.apply("UB-Watt", Event.START_DEV, 10).state is State.IN_DEVELOPMENT


def test_merge_reclassifies_tags():
    lc = deployed_lc()
    lc.apply("UB-Watt", Event.DEPLOY, 10)
    assert lc.tag_registry().category("UB-Watt-E") is TagCategory.EXPERIMENTS
    lc.apply("UB-Watt", Event.END, 20)
    lc.apply("UB-Watt", Event.MERGE_TO_MASTER, 30)
    assert lc.get("UB-Watt").state is State.MERGED_TO_MASTER
    assert lc.tag_registry().category("UB-Watt-E") is TagCategory.PHONELAB


def test_end_after_start():
    lc = deployed_lc()
    lc.apply("UB-Watt", Event.DEPLOY, 100)
    with pytest.raises(InvalidArgument):
        lc.apply("UB-Watt", Event.END, 100)
    assert lc.apply("UB-Watt", Event.END, 101).end == 101


def test_create_rules():
    lc = Lifecycle()
    lc.create("UB", "Watt")
    with pytest.raises(InvalidArgument):
        lc.create("UB", "Watt")
    with pytest.raises(InvalidArgument):
        lc.create("PhoneLab", "Core")
    with pytest.raises(InvalidArgument):
        lc.create("U-B", "Watt")
    assert lc.get("UB-Watt").tag_namespace == "UB-Watt-*"


def test_soak_rule():
    lc = deployed_lc()
    with pytest.raises(StagingError):
        lc.cut_release(["UB-Watt"], Cohort.ALL, 10)
    dev = lc.cut_release(["UB-Watt"], Cohort.DEVELOPERS, 10)
    with pytest.raises(StagingError):
        lc.cut_release(["UB-Watt"], Cohort.ALL, 10 + 71 * H)
    rel = lc.cut_release(["UB-Watt"], Cohort.ALL, 10 + 72 * H)
    assert rel.version == dev.version + 1
    assert ("UB", "Watt") in rel.included


def test_unstaged_cannot_ship():
    lc = Lifecycle()
    lc.create("UB", "Watt")
    lc.apply("UB-Watt", Event.APPROVE, 1)
    with pytest.raises(StagingError):
        lc.cut_release(["UB-Watt"], Cohort.DEVELOPERS, 2)


def test_ended_excluded_from_release():
    lc = deployed_lc()
    lc.apply("UB-Watt", Event.DEPLOY, 10)
    lc.cut_release(["UB-Watt"], Cohort.ALL, 11)
    lc.apply("UB-Watt", Event.END, 20)
    rel = lc.cut_release(["UB-Watt"], Cohort.ALL, 30)
    assert rel.included == frozenset()


def test_release_time_monotone():
    lc = Lifecycle()
    lc.cut_release([], Cohort.ALL, 100)
    with pytest.raises(InvalidArgument):
        lc.cut_release([], Cohort.ALL, 50)


def test_audit_uses_state_history():
    lc = deployed_lc()
    lc.apply("UB-Watt", Event.DEPLOY, 10)
    lc.apply("UB-Watt", Event.END, 20)
    recs = [LogRecord(t, 1, Level.INFO, "UB-Watt-E", "{}") for t in (0, 15, 25)]
    recs.append(LogRecord(25, 1, Level.INFO, "Kernel", "x"))
    # t=0 is Proposed, t=15 Deployed, t=25 Ended
    assert lc.audit_namespaces(recs) == 2


def test_irb_gate():
    assert authorize_data_request(DataRequest("r", None, irb_letter=True)).status is DecisionStatus.GRANTED
    d = authorize_data_request(DataRequest("r", None))
    assert d.status is DecisionStatus.PREVIEW and d.cap == 10_000
    assert authorize_data_request(DataRequest("", None)).status is DecisionStatus.DENIED
    assert authorize_data_request(DataRequest("r", None), preview_limit=0).status is DecisionStatus.DENIED


class FakeStore:
    def query(self, req):
        return iter(range(25_000))


def test_preview_cap_enforced():
    d, rows = execute_data_request(FakeStore(), DataRequest("r", None))
    assert len(rows) == 10_000 and d.status is DecisionStatus.PREVIEW
    d, rows = execute_data_request(FakeStore(), DataRequest("r", None, irb_letter=True))
    assert len(rows) == 25_000
    d, rows = execute_data_request(FakeStore(), DataRequest("", None))
    assert rows == []


def test_persistence_roundtrip(tmp_path):
    lc = deployed_lc()
    lc.apply("UB-Watt", Event.DEPLOY, 10)
    lc.cut_release(["UB-Watt"], Cohort.ALL, 11)
    path = tmp_path / "registry.json"
    lc.save(path)
    back = Lifecycle.load(path)
    assert back.to_json() == lc.to_json()
    assert back.get("UB-Watt") == lc.get("UB-Watt")
    assert Lifecycle.load(tmp_path / "missing.json").experiments == {}
