"""Experiment workflow, staged releases and the data-request gate."""

from __future__ import annotations

import enum
import itertools
import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

from .core import TagRegistry, split_tag
from .errors import InvalidArgument, StagingError, StateError

US_PER_HOUR = 3_600_000_000
DEFAULT_SOAK_HOURS = 72
DEFAULT_PREVIEW_LIMIT = 10_000
DEFAULT_PHONELAB_NAMESPACES = (("PhoneLab", "Core"),)


class State(str, enum.Enum):
    PROPOSED = "Proposed"
    APPROVED = "Approved"
    IN_DEVELOPMENT = "InDevelopment"
    STAGED = "Staged"
    DEPLOYED = "Deployed"
    ENDED = "Ended"
    REMOVED = "Removed"
    MERGED_TO_MASTER = "MergedToMaster"

    def __str__(self):
        return self.value


class Event(str, enum.Enum):
    APPROVE = "Approve"
    START_DEV = "StartDev"
    STAGE = "Stage"
    DEPLOY = "Deploy"
    END = "End"
    REMOVE = "Remove"
    MERGE_TO_MASTER = "MergeToMaster"

    def __str__(self):
        return self.value


class Cohort(str, enum.Enum):
    DEVELOPERS = "Developers"
    ALL = "All"

    def __str__(self):
        return self.value

    @classmethod
    def parse(cls, text: str) -> "Cohort":
        for member in cls:
            if member.value.lower() == text.lower():
                return member
        raise InvalidArgument(f"unknown cohort {text!r}")


# Staged -> InDevelopment covers a failed developer soak.
TRANSITIONS = {
    (State.PROPOSED, Event.APPROVE): State.APPROVED,
    (State.APPROVED, Event.START_DEV): State.IN_DEVELOPMENT,
    (State.IN_DEVELOPMENT, Event.STAGE): State.STAGED,
    (State.STAGED, Event.START_DEV): State.IN_DEVELOPMENT,
    (State.STAGED, Event.DEPLOY): State.DEPLOYED,
    (State.DEPLOYED, Event.END): State.ENDED,
    (State.ENDED, Event.REMOVE): State.REMOVED,
    (State.ENDED, Event.MERGE_TO_MASTER): State.MERGED_TO_MASTER,
}

# States in which records from an experiment's namespace are expected.
LIVE_STATES = frozenset({State.STAGED, State.DEPLOYED, State.MERGED_TO_MASTER})


def experiment_id(institution: str, code: str) -> str:
    return f"{institution}-{code}"


def parse_experiment_id(text: str) -> tuple[str, str]:
    parts = text.split("-")
    if len(parts) != 2 or not all(p.isalnum() and p.isascii() for p in parts):
        raise InvalidArgument(f"experiment id must look like Institution-Code, got {text!r}")
    return parts[0], parts[1]


@dataclass(frozen=True)
class Experiment:
    institution: str
    code: str
    description: str = ""
    state: State = State.PROPOSED
    start: int | None = None
    end: int | None = None
    irb_approved: bool = False
    permissive_toggle: bool = False
    history: tuple = ()  # (timestamp_us, State) entries, oldest first

    @property
    def key(self) -> tuple[str, str]:
        return (self.institution, self.code)

    @property
    def id(self) -> str:
        return experiment_id(self.institution, self.code)

    @property
    def tag_namespace(self) -> str:
        return f"{self.institution}-{self.code}-*"

    def state_at(self, timestamp: int) -> State:
        state = State.PROPOSED
        for at, st in self.history:
            if at > timestamp:
                break
            state = st
        return state

    def to_json(self) -> dict:
        return {
            "institution": self.institution,
            "code": self.code,
            "description": self.description,
            "state": self.state.value,
            "tag_namespace": self.tag_namespace,
            "start": self.start,
            "end": self.end,
            "irb_approved": self.irb_approved,
            "permissive_toggle": self.permissive_toggle,
            "history": [[at, st.value] for at, st in self.history],
        }

    @classmethod
    def from_json(cls, obj) -> "Experiment":
        return cls(
            institution=obj["institution"],
            code=obj["code"],
            description=obj.get("description", ""),
            state=State(obj["state"]),
            start=obj.get("start"),
            end=obj.get("end"),
            irb_approved=bool(obj.get("irb_approved", False)),
            permissive_toggle=bool(obj.get("permissive_toggle", False)),
            history=tuple((int(at), State(st)) for at, st in obj.get("history", ())),
        )


def transition(exp: Experiment, event, now: int = 0) -> Experiment:
    """Return ``exp`` advanced by ``event``; the input is never modified."""
    event = Event(event)
    new_state = TRANSITIONS.get((exp.state, event))
    if new_state is None:
        raise StateError(exp.state.value, event.value)
    changes = {"state": new_state, "history": exp.history + ((now, new_state),)}
    if event is Event.DEPLOY:
        changes["start"] = now
        changes["end"] = None
    elif event is Event.END:
        if exp.start is not None and now <= exp.start:
            raise InvalidArgument("end must be later than start")
        changes["end"] = now
    return replace(exp, **changes)


@dataclass(frozen=True)
class Release:
    version: int
    included: frozenset
    cohort: Cohort
    cut_at: int

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "included_experiments": sorted(experiment_id(*k) for k in self.included),
            "cohort": self.cohort.value,
            "cut_at": self.cut_at,
        }

    @classmethod
    def from_json(cls, obj) -> "Release":
        return cls(
            int(obj["version"]),
            frozenset(parse_experiment_id(e) for e in obj["included_experiments"]),
            Cohort(obj["cohort"]),
            int(obj["cut_at"]),
        )


class DecisionStatus(str, enum.Enum):
    GRANTED = "Granted"
    PREVIEW = "PreviewGranted"
    DENIED = "Denied"


@dataclass(frozen=True)
class Decision:
    status: DecisionStatus
    cap: int | None = None
    reason: str = ""

    def to_json(self) -> dict:
        return {"status": self.status.value, "cap": self.cap, "reason": self.reason}


@dataclass(frozen=True)
class DataRequest:
    requester: str
    query: object  # backend.QueryRequest
    irb_letter: bool = False


def authorize_data_request(req: DataRequest, preview_limit: int = DEFAULT_PREVIEW_LIMIT) -> Decision:
    if not req.requester:
        return Decision(DecisionStatus.DENIED, reason="requester is required")
    if req.irb_letter:
        return Decision(DecisionStatus.GRANTED)
    if preview_limit <= 0:
        return Decision(DecisionStatus.DENIED, reason="IRB approval required and previews are disabled")
    return Decision(DecisionStatus.PREVIEW, cap=preview_limit)


def execute_data_request(store, req: DataRequest, preview_limit: int = DEFAULT_PREVIEW_LIMIT):
    """Authorize and run a request; returns ``(decision, records)``.

    This is the only path from a data request to query results, so an
    unapproved request can never see more than the preview cap.
    """
    decision = authorize_data_request(req, preview_limit)
    if decision.status is DecisionStatus.DENIED:
        return decision, []
    stream = store.query(req.query)
    if decision.status is DecisionStatus.PREVIEW:
        stream = itertools.islice(stream, decision.cap)
    return decision, list(stream)


@dataclass
class Lifecycle:
    """The experiment registry: a single writer, persisted as one JSON file."""

    experiments: dict = field(default_factory=dict)  # id -> Experiment
    releases: list = field(default_factory=list)
    soak_us: int = DEFAULT_SOAK_HOURS * US_PER_HOUR
    preview_limit: int = DEFAULT_PREVIEW_LIMIT
    phonelab_namespaces: tuple = DEFAULT_PHONELAB_NAMESPACES

    def get(self, exp_id: str) -> Experiment:
        try:
            return self.experiments[exp_id]
        except KeyError:
            raise InvalidArgument(f"unknown experiment {exp_id!r}") from None

    def create(self, institution, code, description="", irb_approved=False, permissive_toggle=False, now=0):
        exp_id = experiment_id(institution, code)
        parse_experiment_id(exp_id)
        if exp_id in self.experiments:
            raise InvalidArgument(f"experiment {exp_id} already exists")
        if (institution, code) in set(map(tuple, self.phonelab_namespaces)):
            raise InvalidArgument(f"{exp_id} collides with a platform namespace")
        exp = Experiment(
            institution,
            code,
            description,
            irb_approved=irb_approved,
            permissive_toggle=permissive_toggle,
            history=((now, State.PROPOSED),),
        )
        self.experiments[exp_id] = exp
        return exp

    def apply(self, exp_id: str, event, now: int = 0) -> Experiment:
        exp = transition(self.get(exp_id), event, now)
        self.experiments[exp_id] = exp
        return exp

    @property
    def latest_version(self) -> int:
        return self.releases[-1].version if self.releases else 0

    def latest_release(self, cohort: Cohort | None = None) -> Release | None:
        for rel in reversed(self.releases):
            if cohort is None or rel.cohort is cohort:
                return rel
        return None

    def cut_release(self, exp_ids, cohort, now: int) -> Release:
        cohort = Cohort(cohort)
        if self.releases and now < self.releases[-1].cut_at:
            raise InvalidArgument("release cut time must not go backwards")
        included = set()
        for exp_id in exp_ids:
            exp = self.get(exp_id)
            if exp.state in (State.ENDED, State.REMOVED):
                continue
            self._check_stageable(exp, cohort, now)
            included.add(exp.key)
        release = Release(self.latest_version + 1, frozenset(included), cohort, now)
        self.releases.append(release)
        return release

    def _check_stageable(self, exp: Experiment, cohort: Cohort, now: int):
        ready = (State.STAGED, State.DEPLOYED, State.MERGED_TO_MASTER)
        if exp.state not in ready:
            raise StagingError(f"{exp.id} is {exp.state.value}; it must be Staged before any release")
        if cohort is Cohort.DEVELOPERS or exp.state is not State.STAGED:
            return
        dev_cuts = [
            r.cut_at for r in self.releases if r.cohort is Cohort.DEVELOPERS and exp.key in r.included
        ]
        if not dev_cuts:
            raise StagingError(f"{exp.id} has not been released to developers yet")
        if now - dev_cuts[0] < self.soak_us:
            remaining = (self.soak_us - (now - dev_cuts[0])) / US_PER_HOUR
            raise StagingError(f"{exp.id} is still soaking on developers ({remaining:.1f} h left)")

    def tag_registry(self) -> TagRegistry:
        """Merged experiments count as platform instrumentation from then on."""
        phonelab = set(map(tuple, self.phonelab_namespaces))
        experiments = set()
        for exp in self.experiments.values():
            if exp.state is State.MERGED_TO_MASTER:
                phonelab.add(exp.key)
            else:
                experiments.add(exp.key)
        return TagRegistry(frozenset(phonelab), frozenset(experiments))

    def optout_pairs(self) -> set:
        return {exp.key for exp in self.experiments.values() if exp.permissive_toggle}

    def audit_namespaces(self, records) -> int:
        """Count records from an experiment namespace that were produced while
        the experiment was not live. Audit only; nothing is dropped."""
        by_key = {exp.key: exp for exp in self.experiments.values()}
        flagged = 0
        for rec in records:
            rec = getattr(rec, "record", rec)
            parts = split_tag(rec.tag)
            if parts is None:
                continue
            exp = by_key.get(parts[:2])
            if exp is not None and exp.state_at(rec.timestamp) not in LIVE_STATES:
                flagged += 1
        return flagged

    # --- persistence ------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "soak_seconds": self.soak_us // 1_000_000,
            "preview_limit": self.preview_limit,
            "phonelab_namespaces": [list(p) for p in self.phonelab_namespaces],
            "experiments": [self.experiments[k].to_json() for k in sorted(self.experiments)],
            "releases": [r.to_json() for r in self.releases],
        }

    @classmethod
    def from_json(cls, obj) -> "Lifecycle":
        exps = [Experiment.from_json(e) for e in obj.get("experiments", ())]
        return cls(
            experiments={e.id: e for e in exps},
            releases=[Release.from_json(r) for r in obj.get("releases", ())],
            soak_us=int(obj.get("soak_seconds", DEFAULT_SOAK_HOURS * 3600)) * 1_000_000,
            preview_limit=int(obj.get("preview_limit", DEFAULT_PREVIEW_LIMIT)),
            phonelab_namespaces=tuple(
                tuple(p) for p in obj.get("phonelab_namespaces", DEFAULT_PHONELAB_NAMESPACES)
            ),
        )

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".registry-", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(self.to_json(), fh, indent=2, sort_keys=True)
                fh.write("\n")
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path, **defaults) -> "Lifecycle":
        path = Path(path)
        if not path.exists():
            return cls(**defaults)
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))
