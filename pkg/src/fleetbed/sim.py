"""Deterministic fleet simulator.

Devices are sampled on a fixed tick. At every tick, scheduled operator
actions run first, then each device in device-id order generates its log
records, samples its environment and runs its conductor against an
in-process backend through the same request handler the HTTP server uses.
All randomness comes from per-device streams keyed by ``(seed, device_id)``,
so a report is a pure function of its config.
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import io
import json
import random
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .agent import Action, AgentPolicy, AgentState, Conductor, DeviceEnv
from .backend import Backend, OtaCatalog, Store
from .core import US_PER_DAY, US_PER_SECOND, Level, LogRecord, hash_device_id, parse_stored, split_tag, utc_day
from .errors import InvalidArgument
from .lifecycle import Cohort, Event, Lifecycle, State, experiment_id, parse_experiment_id
from .logbuffer import DEFAULT_CAPACITY_BYTES, KERNEL_TAG, KTRACE_TAG, RingBuffer
from .metrics import daily_active, ratio_cdf
from .ota import Image

EPOCH = dt.date(1970, 1, 1)
US_PER_HOUR = 3600 * US_PER_SECOND
SESSION_MEAN_S = 300

# Pre-existing platform tags and rough relative volumes.
OTHER_TAGS = (
    (KTRACE_TAG, 52.7),
    ("SurfaceFlinger", 6.1),
    ("dalvikvm", 5.4),
    ("MP-Decision", 1.8),
    (KERNEL_TAG, 1.0),
    ("art", 0.3),
)
PHONELAB_DETAILS = ("Location", "Battery", "Wifi", "Telephony")
LEVEL_WEIGHTS = ((Level.VERBOSE, 5), (Level.DEBUG, 40), (Level.INFO, 40), (Level.WARN, 10), (Level.ERROR, 5))
_OTHER_WORDS = ("sched_switch", "cpu_frequency", "GC_CONCURRENT", "vsync", "online", "offline", "thermal")


def _hours_to_s(h) -> int:
    return int(round(float(h) * 3600))


@dataclass(frozen=True)
class DeviceProfile:
    meid: str
    usage_prob: float = 0.9
    charging_windows: tuple = ((23.0, 7.0),)  # local hours, may wrap midnight
    interaction_rate: float = 2.0  # sessions per awake hour
    awake_hours: tuple = (7.0, 23.0)
    network_uptime: float = 1.0
    log_rate: float = 30.0  # records per hour while the device is in use
    tag_mix: tuple = (("other", 0.8), ("phonelab", 0.15), ("experiments", 0.05))
    ota_accept_prob: float = 0.5
    optout: tuple = ()  # experiment ids
    local_time_offset_s: int = 0
    buffer_capacity_bytes: int = DEFAULT_CAPACITY_BYTES
    developer: bool = False

    def __post_init__(self):
        for name in ("usage_prob", "network_uptime", "ota_accept_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidArgument(f"{name} must be within [0, 1]")
        if self.log_rate < 0 or self.interaction_rate < 0:
            raise InvalidArgument("rates must be non-negative")
        spans = []
        for start, end in self.charging_windows:
            s, e = _hours_to_s(start), _hours_to_s(end)
            if not (0 <= s <= 86400 and 0 <= e <= 86400) or s == e:
                raise InvalidArgument("charging window hours must be within [0, 24] and non-empty")
            spans.extend([(s, e)] if s < e else [(s, 86400), (0, e)])
        spans.sort()
        if any(a[1] > b[0] for a, b in zip(spans, spans[1:])):
            raise InvalidArgument("charging windows must not overlap")

    @property
    def device(self) -> str:
        return hash_device_id(self.meid)

    def charging_spans(self):
        out = []
        for start, end in self.charging_windows:
            s, e = _hours_to_s(start), _hours_to_s(end)
            out.extend([(s, e)] if s < e else [(s, 86400), (0, e)])
        return tuple(sorted(out))

    @classmethod
    def from_json(cls, obj) -> "DeviceProfile":
        obj = dict(obj)
        for key in ("charging_windows", "tag_mix"):
            if key in obj:
                obj[key] = tuple(tuple(x) if isinstance(x, list) else x for x in (
                    obj[key].items() if isinstance(obj[key], dict) else obj[key]))
        for key in ("awake_hours", "optout"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)

    def to_json(self) -> dict:
        return {
            "meid": self.meid,
            "usage_prob": self.usage_prob,
            "charging_windows": [list(w) for w in self.charging_windows],
            "interaction_rate": self.interaction_rate,
            "awake_hours": list(self.awake_hours),
            "network_uptime": self.network_uptime,
            "log_rate": self.log_rate,
            "tag_mix": [list(t) for t in self.tag_mix],
            "ota_accept_prob": self.ota_accept_prob,
            "optout": list(self.optout),
            "local_time_offset_s": self.local_time_offset_s,
            "buffer_capacity_bytes": self.buffer_capacity_bytes,
            "developer": self.developer,
        }


@dataclass
class FleetConfig:
    profiles: list
    duration_days: int
    seed: int = 0
    tick_s: int = 60
    start: str = "2015-02-02"
    policy: AgentPolicy = field(default_factory=AgentPolicy)
    phonelab_namespaces: tuple = (("PhoneLab", "Core"),)
    experiments: list = field(default_factory=list)  # {"id", "state", "tags", "permissive"}
    schedule: list = field(default_factory=list)  # {"at_hours", "event"|"release", ...}
    image_bytes: int = 256 * 1024
    soak_hours: int = 72
    duplicate_prob: float = 0.0
    upload_fail_prob: float = 0.0

    def __post_init__(self):
        if not self.profiles:
            raise InvalidArgument("fleet needs at least one device profile")
        if self.duration_days < 1:
            raise InvalidArgument("duration must be at least one day")
        if self.tick_s <= 0 or 86400 % self.tick_s:
            raise InvalidArgument("tick_s must be positive and divide a day")
        if not 0 <= self.duplicate_prob + self.upload_fail_prob <= 1:
            raise InvalidArgument("fault probabilities must sum to at most 1")
        ids = [p.device for p in self.profiles]
        if len(set(ids)) != len(ids):
            raise InvalidArgument("device MEIDs must be unique")

    @property
    def start_us(self) -> int:
        return (dt.date.fromisoformat(self.start) - EPOCH).days * US_PER_DAY

    @classmethod
    def from_json(cls, obj) -> "FleetConfig":
        obj = dict(obj)
        profiles = [DeviceProfile.from_json(p) for p in obj.pop("profiles", [])]
        fleet = obj.pop("fleet", None)
        if fleet:
            template = dict(fleet.get("profile", {}))
            prefix = fleet.get("meid_prefix", "A00000")
            for i in range(int(fleet["count"])):
                profiles.append(DeviceProfile.from_json({**template, "meid": f"{prefix}{i:08X}"}))
            for meid in fleet.get("developers", ()):
                idx = next(i for i, p in enumerate(profiles) if p.meid == meid)
                profiles[idx] = DeviceProfile.from_json({**profiles[idx].to_json(), "developer": True})
        if "policy" in obj:
            obj["policy"] = AgentPolicy.from_mapping(obj["policy"])
        if "phonelab_namespaces" in obj:
            obj["phonelab_namespaces"] = tuple(tuple(p) for p in obj["phonelab_namespaces"])
        return cls(profiles=profiles, **obj)

    @classmethod
    def load(cls, path) -> "FleetConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def to_json(self) -> dict:
        p = self.policy
        return {
            "profiles": [pr.to_json() for pr in self.profiles],
            "duration_days": self.duration_days,
            "seed": self.seed,
            "tick_s": self.tick_s,
            "start": self.start,
            "policy": {
                "heartbeat_interval_s": p.heartbeat_interval_s,
                "ota_check_interval_s": p.ota_check_interval_s,
                "upload_min_bytes": p.upload_min_bytes,
                "upload_max_age_s": p.upload_max_age_s,
                "apply_window": list(p.apply_window),
                "idle_threshold_s": p.idle_threshold_s,
                "backoff_base_s": p.backoff_base_s,
                "backoff_cap_s": p.backoff_cap_s,
                "rotate_bytes": p.rotate_bytes,
                "file_max_bytes": p.file_max_bytes,
            },
            "phonelab_namespaces": [list(x) for x in self.phonelab_namespaces],
            "experiments": self.experiments,
            "schedule": self.schedule,
            "image_bytes": self.image_bytes,
            "soak_hours": self.soak_hours,
            "duplicate_prob": self.duplicate_prob,
            "upload_fail_prob": self.upload_fail_prob,
        }


def _multiset_digest(lines) -> int:
    """Order-independent digest of a collection of lines."""
    total = 0
    for line in lines:
        total += int.from_bytes(hashlib.blake2b(line.encode("utf-8"), digest_size=8).digest(), "little")
    return total % (1 << 64)


def build_image(seed: int, version: int, included, size: int) -> Image:
    """Synthetic platform image: a seeded base with per-experiment and
    per-version chunks overwritten."""
    base = bytearray(random.Random(f"{seed}/image").randbytes(size))
    chunks = max(1, size // 4096)
    for exp_key in sorted(included):
        tag = experiment_id(*exp_key)
        r = random.Random(f"{seed}/exp/{tag}")
        for _ in range(2):
            off = r.randrange(chunks) * 4096
            base[off:off + 4096] = r.randbytes(min(4096, size - off))
    r = random.Random(f"{seed}/build/{version}")
    off = r.randrange(chunks) * 4096
    base[off:off + 64] = r.randbytes(min(64, size - off))
    return Image(version, bytes(base))


class _Transport:
    """In-process link from one conductor to the backend, with fault injection."""

    def __init__(self, sim, device, rng):
        self.sim = sim
        self.device = device
        self.rng = rng
        self.now = 0
        self.reliable = False

    def heartbeat(self, body):
        resp = self.sim.backend.handle("POST", "/v1/heartbeat", "", {}, json.dumps(body).encode(), now=self.now)
        return resp.status == 200

    def upload(self, device, first_seq, payload):
        sim = self.sim
        sim.ledger["upload_attempts"] += 1
        lost_ack = False
        if not self.reliable:
            u = self.rng.random()
            if u < sim.config.upload_fail_prob:
                sim.ledger["upload_failures"] += 1
                return False
            lost_ack = u < sim.config.upload_fail_prob + sim.config.duplicate_prob
        resp = sim.backend.handle("POST", "/v1/upload", f"device={device}&seq={first_seq}", {}, payload, now=self.now)
        if resp.status != 200:
            raise RuntimeError(f"backend rejected a simulated upload: {resp.body!r}")
        report = resp.json()
        sim.ledger["accepted"] += report["accepted"]
        sim.ledger["duplicates_detected"] += report["duplicates"]
        if lost_ack:
            sim.ledger["injected_duplicates"] += payload.count(b"\n")
            return False
        return True

    def fetch_ota(self, device, version):
        resp = self.sim.backend.handle("GET", "/v1/ota", f"device={device}&version={version}", now=self.now)
        return resp.body if resp.status == 200 else None


class _Device:
    def __init__(self, sim, profile: DeviceProfile, image: Image):
        seed = sim.config.seed
        self.profile = profile
        self.id = profile.device
        self.rng = random.Random(f"{seed}/{self.id}/logs")
        self.usage_rng = random.Random(f"{seed}/{self.id}/usage")
        self.net_rng = random.Random(f"{seed}/{self.id}/net")
        self.user_rng = random.Random(f"{seed}/{self.id}/user")
        self.transport = _Transport(sim, self.id, random.Random(f"{seed}/{self.id}/faults"))
        optout = {parse_experiment_id(e) for e in profile.optout}
        state = AgentState(
            device=self.id,
            image=image,
            buffer=RingBuffer(profile.buffer_capacity_bytes),
            optout=optout,
            policy=sim.config.policy,
        )
        self.conductor = Conductor(state, self.transport, sim.tag_registry, self._answer_prompt)
        self.conductor.on_rotate = sim._on_rotate
        self.on_today = False
        self.next_record_at = None
        self.next_session_at = None
        self.session_end = 0
        self.last_interaction = sim.start_us
        self.net_hour = None
        self.net_up = True
        self.charging_spans = profile.charging_spans()
        self.awake = (_hours_to_s(profile.awake_hours[0]), _hours_to_s(profile.awake_hours[1]))
        mix = dict(profile.tag_mix)
        total = sum(mix.values()) or 1.0
        self.mix = (mix.get("other", 0) / total, (mix.get("other", 0) + mix.get("phonelab", 0)) / total)
        self.seq_msg = 0
        self.version_since = {image.version: sim.start_us}

    def _answer_prompt(self, state, env):
        return self.user_rng.random() < self.profile.ota_accept_prob

    def local_tod(self, now):
        return (now // US_PER_SECOND + self.profile.local_time_offset_s) % 86400

    def charging(self, tod):
        for s, e in self.charging_spans:
            if s <= tod < e:
                return True
        return False

    def network(self, now):
        hour = now // US_PER_HOUR
        if hour != self.net_hour:
            self.net_hour = hour
            self.net_up = self.net_rng.random() < self.profile.network_uptime
        return self.net_up


class Simulation:
    def __init__(self, config: FleetConfig, store_dir=None):
        self.config = config
        self.start_us = config.start_us
        self.end_us = self.start_us + config.duration_days * US_PER_DAY
        self._tmp = None
        if store_dir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="fleetbed-sim-")
            store_dir = self._tmp.name
        self.lifecycle = Lifecycle(
            soak_us=config.soak_hours * US_PER_HOUR, phonelab_namespaces=tuple(config.phonelab_namespaces)
        )
        self.exp_tags = {}
        self._setup_experiments()
        self.tag_registry = self.lifecycle.tag_registry()
        self.store = Store(store_dir, registry=self.tag_registry)
        self.catalog = OtaCatalog(developers={p.device for p in config.profiles if p.developer})
        self.backend = Backend(self.store, self.catalog, clock=lambda: self.start_us)
        self.ledger = {
            "upload_attempts": 0,
            "upload_failures": 0,
            "accepted": 0,
            "duplicates_detected": 0,
            "injected_duplicates": 0,
        }
        self.transmitted_digest = 0
        self.release_members = {}
        first = self._cut(Cohort.ALL, [e for e, st in self._initial_states.items() if st is State.DEPLOYED], self.start_us)
        self.devices = []
        for profile in sorted(config.profiles, key=lambda p: p.device):
            self.store.enroll(profile.device)
            self.devices.append(_Device(self, profile, first))
        self.audit = []
        self.adoption = []
        self.exp_generated = {}  # exp key -> list of generation timestamps
        self.version_reached = {}  # version -> {device: first time at >= version}
        self.schedule = sorted(
            (self.start_us + _hours_to_s(op["at_hours"]) * US_PER_SECOND, i, op) for i, op in enumerate(config.schedule)
        )

    # --- setup ------------------------------------------------------------

    def _setup_experiments(self):
        path = {
            State.APPROVED: [Event.APPROVE],
            State.IN_DEVELOPMENT: [Event.APPROVE, Event.START_DEV],
            State.STAGED: [Event.APPROVE, Event.START_DEV, Event.STAGE],
            State.DEPLOYED: [Event.APPROVE, Event.START_DEV, Event.STAGE, Event.DEPLOY],
        }
        self._initial_states = {}
        for entry in self.config.experiments:
            inst, code = parse_experiment_id(entry["id"])
            self.lifecycle.create(inst, code, entry.get("description", ""), permissive_toggle=bool(entry.get("permissive")), now=self.start_us - 1)
            state = State(entry.get("state", "Deployed"))
            for ev in path.get(state, []):
                self.lifecycle.apply(entry["id"], ev, self.start_us - 1)
            self._initial_states[entry["id"]] = state
            self.exp_tags[(inst, code)] = tuple(
                entry.get("tags") or [f"{inst}-{code}-Event"]
            )

    def _cut(self, cohort, exp_ids, now):
        release = self.lifecycle.cut_release(exp_ids, cohort, now)
        image = build_image(self.config.seed, release.version, release.included, self.config.image_bytes)
        self.catalog.add_release(release, image)
        self.release_members[release.version] = release.included
        return image

    def _run_op(self, now, op):
        if "event" in op:
            self.lifecycle.apply(op["experiment"], Event(op["event"]), now)
            self.tag_registry = self.lifecycle.tag_registry()
            self.store.registry = self.tag_registry
            for d in self.devices:
                d.conductor.registry = self.tag_registry
        elif "release" in op:
            self._cut(Cohort.parse(op["release"]), op.get("experiments", []), now)
        else:
            raise InvalidArgument(f"unknown schedule op {op!r}")

    def _on_rotate(self, rotated):
        self.transmitted_digest = (
            self.transmitted_digest + _multiset_digest(rotated.content.decode("utf-8").split("\n")[:-1])
        ) % (1 << 64)

    # --- per-device behaviour ------------------------------------------------

    def _start_day(self, d: _Device, day_start):
        d.on_today = d.usage_rng.random() < d.profile.usage_prob
        if d.on_today and d.profile.log_rate > 0:
            d.next_record_at = day_start + int(d.rng.expovariate(d.profile.log_rate) * US_PER_HOUR)
        else:
            d.next_record_at = None
        if d.on_today and d.profile.interaction_rate > 0:
            d.next_session_at = day_start + int(d.rng.expovariate(d.profile.interaction_rate) * US_PER_HOUR)
        else:
            d.next_session_at = None

    def _make_record(self, d: _Device, ts):
        rng = d.rng
        u = rng.random()
        level = rng.choices(LEVEL_WEIGHTS_LEVELS, LEVEL_WEIGHTS_CUM, k=1)[0]
        task = rng.randrange(1, 32768)
        exp_keys = None
        if u >= d.mix[1]:
            exp_keys = sorted(self.release_members.get(d.conductor.state.image.version, ()))
        if u < d.mix[0] or (exp_keys is not None and not exp_keys):
            tag = rng.choices(OTHER_TAG_NAMES, OTHER_TAG_CUM, k=1)[0]
            words = rng.sample(_OTHER_WORDS, 2)
            msg = f"{words[0]}: cpu={rng.randrange(4)} val={rng.randrange(10**6)} {words[1]}"
            r = rng.random()
            if r < 0.02:
                msg += "\tnext=kworker/0:1"
            elif r < 0.03:
                msg += "\nstack: at \\sys\\"
            elif r < 0.04:
                msg += " temp=41°C →"
            return LogRecord(ts, task, level, tag, msg)
        d.seq_msg += 1
        if exp_keys is None:
            inst, code = self.config.phonelab_namespaces[rng.randrange(len(self.config.phonelab_namespaces))]
            tag = f"{inst}-{code}-{PHONELAB_DETAILS[rng.randrange(len(PHONELAB_DETAILS))]}"
        else:
            key = exp_keys[rng.randrange(len(exp_keys))]
            tags = self.exp_tags.get(key) or (f"{key[0]}-{key[1]}-Event",)
            tag = tags[rng.randrange(len(tags))]
            self.exp_generated.setdefault(key, []).append(ts)
        msg = json.dumps({"n": d.seq_msg, "value": rng.randrange(10**6)}, separators=(",", ":"))
        return LogRecord(ts, task, level, tag, msg)

    def _tick_device(self, d: _Device, now):
        c = d.conductor
        while d.next_record_at is not None and d.next_record_at <= now:
            c.log_record(self._make_record(d, d.next_record_at))
            d.next_record_at += max(1, int(d.rng.expovariate(d.profile.log_rate) * US_PER_HOUR))
        tod = d.local_tod(now)
        awake = d.awake[0] <= tod < d.awake[1]
        while d.next_session_at is not None and d.next_session_at <= now:
            if awake:
                d.session_end = max(d.session_end, d.next_session_at + int(d.rng.expovariate(1 / SESSION_MEAN_S) * US_PER_SECOND))
            d.next_session_at += max(1, int(d.rng.expovariate(d.profile.interaction_rate) * US_PER_HOUR))
        if d.session_end >= now:
            d.last_interaction = now
        elif d.session_end > d.last_interaction:
            d.last_interaction = d.session_end
        charging = d.charging(tod)
        env = DeviceEnv(
            now=now,
            local_time_offset=d.profile.local_time_offset_s,
            charging=charging,
            network_up=d.network(now),
            last_interaction=d.last_interaction,
            battery_pct=100 if charging else 60,
        )
        d.transport.now = now
        before = c.state.image.version
        outcomes = c.tick(env)
        for action, result in outcomes:
            if action in _AUDITED:
                st = c.state
                self.audit.append(
                    {
                        "t": now,
                        "device": d.id,
                        "action": action.value,
                        "ok": bool(result),
                        "local_tod_s": tod,
                        "charging": charging,
                        "idle_s": (now - env.last_interaction) // US_PER_SECOND,
                        "version": st.image.version,
                    }
                )
        after = c.state.image.version
        if after != before:
            d.version_since[after] = now
            for v in self.release_members:
                if before < v <= after:
                    self.version_reached.setdefault(v, {})[d.id] = now

    # --- main loop ----------------------------------------------------------

    def run(self) -> dict:
        cfg = self.config
        tick_us = cfg.tick_s * US_PER_SECOND
        sched = list(self.schedule)
        si = 0
        for day in range(cfg.duration_days):
            day_start = self.start_us + day * US_PER_DAY
            for d in self.devices:
                self._start_day(d, day_start)
            active = [d for d in self.devices if d.on_today]
            for k in range(1, US_PER_DAY // tick_us + 1):
                now = day_start + k * tick_us
                if now > self.end_us:
                    break
                while si < len(sched) and sched[si][0] <= now:
                    self._run_op(now, sched[si][2])
                    si += 1
                for d in active:
                    self._tick_device(d, now)
            counts = {}
            for d in self.devices:
                v = d.conductor.state.image.version
                counts[str(v)] = counts.get(str(v), 0) + 1
            self.adoption.append({"day": _day_iso(utc_day(day_start)), "versions": dict(sorted(counts.items()))})
        self._final_drain()
        return self._report()

    def _final_drain(self):
        for d in self.devices:
            d.transport.now = self.end_us
            d.transport.reliable = True
            c = d.conductor
            c.rotate(force=True)
            while c.state.outbox:
                c._upload(DeviceEnv(now=self.end_us, charging=True, network_up=True, last_interaction=self.end_us))

    # --- reporting ----------------------------------------------------------

    def _report(self) -> dict:
        cfg = self.config
        store = self.store
        generated = sum(d.conductor.state.generated for d in self.devices)
        dropped = sum(d.conductor.state.dropped_count for d in self.devices)
        filtered = sum(d.conductor.state.optout_filtered for d in self.devices)
        stored = store.record_count()
        stored_digest = _multiset_digest(line.split("\t", 2)[2] for _, line in store.iter_lines())
        ledger = {
            "generated": generated,
            "dropped": dropped,
            "optout_filtered": filtered,
            "stored": stored,
            **self.ledger,
            "transmitted_digest": f"{self.transmitted_digest:016x}",
            "stored_digest": f"{stored_digest:016x}",
        }
        ledger["balanced"] = (
            generated == stored + dropped + filtered
            and ledger["accepted"] == stored
            and ledger["duplicates_detected"] == ledger["injected_duplicates"]
            and self.transmitted_digest == stored_digest
        )
        first_day = utc_day(self.start_us)
        days = daily_active(store.heartbeats, [d.id for d in self.devices], first_day, first_day + cfg.duration_days - 1)
        ratios = [a.ratio for a in days]
        cdf = ratio_cdf(ratios)
        exp_records = self._experiment_records()
        report = {
            "seed": cfg.seed,
            "config_sha256": hashlib.sha256(json.dumps(cfg.to_json(), sort_keys=True).encode()).hexdigest(),
            "start": cfg.start,
            "duration_days": cfg.duration_days,
            "tick_s": cfg.tick_s,
            "devices": len(self.devices),
            "daily": [
                {"day": _day_iso(a.day), "active": a.active, "enrolled": a.enrolled, "ratio": a.ratio} for a in days
            ],
            "daily_active_ratio": ratios,
            "ratio_cdf": [[x, y] for x, y in cdf.points],
            "median_ratio": cdf.median(),
            "ledger": ledger,
            "upload_order_violations": store.order_violations,
            "ota_adoption": self.adoption,
            "releases": [r.to_json() for r in self.lifecycle.releases],
            "experiments": [self.lifecycle.experiments[k].to_json() for k in sorted(self.lifecycle.experiments)],
            "namespace_audit": {"flagged": self.lifecycle.audit_namespaces(exp_records)},
            "removal": self._removal(exp_records),
            "audit": self.audit,
        }
        return report

    def _experiment_records(self):
        """Stored records whose tag falls in an experiment namespace."""
        keys = set(self.lifecycle.experiments)
        keys = {parse_experiment_id(k) for k in keys}
        out = []
        for seq, line in self.store.iter_lines():
            tag = line.split("\t", 6)[5]
            parts = split_tag(tag)
            if parts is not None and parts[:2] in keys:
                out.append(parse_stored(line, seq))
        out.sort(key=lambda s: (s.record.timestamp, s.record.device, s.seq))
        return out

    def _removal(self, records):
        out = []
        lc = self.lifecycle
        for exp in sorted(lc.experiments.values(), key=lambda e: e.id):
            if exp.end is None:
                continue
            later = [r for r in lc.releases if r.cohort is Cohort.ALL and r.cut_at >= exp.end and exp.key not in r.included]
            entry = {"experiment": exp.id, "ended_at": exp.end, "release": None, "fleet_adopted_at": None,
                     "generated_after_adoption": None, "stored_after_adoption": None, "flagged_after_adoption": None}
            if later:
                rel = later[0]
                reached = self.version_reached.get(rel.version, {})
                entry["release"] = rel.version
                if len(reached) == len(self.devices):
                    adopted = max(reached.values())
                    entry["fleet_adopted_at"] = adopted
                    entry["generated_after_adoption"] = sum(1 for t in self.exp_generated.get(exp.key, ()) if t >= adopted)
                    mine = [s for s in records if s.record.timestamp >= adopted and (split_tag(s.record.tag) or ())[:2] == exp.key]
                    entry["stored_after_adoption"] = len(mine)
                    entry["flagged_after_adoption"] = lc.audit_namespaces(
                        s for s in records if s.record.timestamp >= adopted
                    )
            out.append(entry)
        return out

    def close(self):
        self.store.close()
        if self._tmp is not None:
            self._tmp.cleanup()


LEVEL_WEIGHTS_LEVELS = [lv for lv, _ in LEVEL_WEIGHTS]
LEVEL_WEIGHTS_CUM = []
_acc = 0
for _, _w in LEVEL_WEIGHTS:
    _acc += _w
    LEVEL_WEIGHTS_CUM.append(_acc)
OTHER_TAG_NAMES = [t for t, _ in OTHER_TAGS]
OTHER_TAG_CUM = []
_acc = 0.0
for _, _w in OTHER_TAGS:
    _acc += _w
    OTHER_TAG_CUM.append(_acc)
del _acc, _w

_AUDITED = frozenset({Action.CHECK_OTA, Action.DOWNLOAD_OTA, Action.PROMPT_USER, Action.APPLY_OTA})


def _day_iso(day: int) -> str:
    return (EPOCH + dt.timedelta(days=day)).isoformat()


def run(config: FleetConfig, store_dir=None) -> dict:
    """Run a simulation and return its report as a JSON-ready dict."""
    sim = Simulation(config, store_dir)
    try:
        return sim.run()
    finally:
        sim.close()


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def daily_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["day", "active", "enrolled", "ratio"])
    for row in report["daily"]:
        w.writerow([row["day"], row["active"], row["enrolled"], repr(row["ratio"])])
    return buf.getvalue()


def write_report(report: dict, out_dir, figures: bool = True) -> dict:
    """Write report.json, daily_active.csv and, optionally, the two figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.json", "csv": out / "daily_active.csv"}
    paths["report"].write_text(report_json(report), encoding="utf-8")
    paths["csv"].write_text(daily_csv(report), encoding="utf-8")
    if figures:
        from .metrics import DayActivity
        from .plotting import plot_daily_active, plot_ratio_cdf

        days = [
            DayActivity((dt.date.fromisoformat(r["day"]) - EPOCH).days, r["active"], r["enrolled"])
            for r in report["daily"]
        ]
        paths["daily_figure"] = plot_daily_active(days, out / "daily_active.png")
        paths["cdf_figure"] = plot_ratio_cdf({f"seed {report['seed']}": ratio_cdf(report["daily_active_ratio"])}, out / "ratio_cdf.png")
    return paths
