"""Device agent: heartbeat, opportunistic upload and OTA policy.

``on_tick`` is a pure decision function of ``(state, env)``. ``Conductor``
executes those decisions against a transport (HTTP client or the simulator's
in-process backend) and owns every state mutation.
"""

from __future__ import annotations

import enum
import json
import logging
from collections import deque
from dataclasses import dataclass, field

from .core import US_PER_SECOND, ImageVersion, TagRegistry
from .errors import CorruptPackageError, FleetbedError, InvalidArgument, WrongBaseError
from .logbuffer import RingBuffer
from .ota import Image, UpdatePackage, apply, verify

log = logging.getLogger(__name__)

AGENT_VERSION = "conductor/1.0"
SECONDS_PER_DAY = 86_400


class Action(str, enum.Enum):
    SEND_HEARTBEAT = "SendHeartbeat"
    UPLOAD_FILE = "UploadFile"
    CHECK_OTA = "CheckOta"
    DOWNLOAD_OTA = "DownloadOta"
    PROMPT_USER = "PromptUser"
    APPLY_OTA = "ApplyOta"
    NOTHING = "Nothing"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class AgentPolicy:
    heartbeat_interval_s: int = 900
    ota_check_interval_s: int = 21_600
    upload_min_bytes: int = 65_536
    upload_max_age_s: int = 21_600
    apply_window: tuple = (0, 5 * 3600)  # local seconds of day, [start, end)
    idle_threshold_s: int = 1800
    backoff_base_s: int = 60
    backoff_cap_s: int = 3600
    rotate_bytes: int = 256 * 1024
    file_max_bytes: int = 1024 * 1024

    def __post_init__(self):
        values = [
            self.heartbeat_interval_s,
            self.ota_check_interval_s,
            self.upload_min_bytes,
            self.upload_max_age_s,
            self.idle_threshold_s,
            self.backoff_base_s,
            self.backoff_cap_s,
            self.rotate_bytes,
            self.file_max_bytes,
        ]
        if any(v <= 0 for v in values):
            raise InvalidArgument("agent policy values must be positive")
        start, end = self.apply_window
        if not 0 <= start < end <= SECONDS_PER_DAY:
            raise InvalidArgument("apply window must satisfy 0 <= start < end <= 86400")

    @classmethod
    def from_mapping(cls, obj) -> "AgentPolicy":
        obj = dict(obj)
        if "apply_window" in obj:
            obj["apply_window"] = tuple(obj["apply_window"])
        return cls(**obj)


@dataclass(frozen=True)
class DeviceEnv:
    now: int
    local_time_offset: int = 0  # seconds east of UTC
    charging: bool = False
    network_up: bool = True
    last_interaction: int = 0
    battery_pct: int = 100

    def __post_init__(self):
        if self.last_interaction > self.now:
            raise InvalidArgument("last_interaction must not be in the future")

    @property
    def local_seconds(self) -> int:
        """Seconds since the Unix epoch on the device's local clock."""
        return self.now // US_PER_SECOND + self.local_time_offset

    @property
    def local_time_of_day(self) -> int:
        return self.local_seconds % SECONDS_PER_DAY

    def next_local_midnight(self) -> int:
        day = self.local_seconds // SECONDS_PER_DAY + 1
        return (day * SECONDS_PER_DAY - self.local_time_offset) * US_PER_SECOND


@dataclass
class AgentState:
    device: str
    image: Image
    buffer: RingBuffer = field(default_factory=RingBuffer)
    outbox: deque = field(default_factory=deque)
    pending_ota: UpdatePackage | None = None
    ota_prompt_declined_until: int | None = None
    optout: set = field(default_factory=set)
    policy: AgentPolicy = field(default_factory=AgentPolicy)
    retry_backoff: int = 0  # seconds; 0 while uploads are healthy
    next_retry_at: int = 0
    last_heartbeat_at: int | None = None
    last_ota_check_at: int | None = None
    ota_offer: bytes | None = None
    # accounting
    generated: int = 0
    optout_filtered: int = 0
    uploaded_records: int = 0

    @property
    def platform_version(self) -> ImageVersion:
        return self.image.image_version

    @property
    def buffered_bytes(self) -> int:
        return self.buffer.used_bytes

    @property
    def outbox_bytes(self) -> int:
        return sum(len(f.content) for f in self.outbox)

    @property
    def dropped_count(self) -> int:
        return self.buffer.dropped_count

    def oldest_pending_timestamp(self) -> int | None:
        if self.outbox:
            return self.outbox[0].first_timestamp
        return self.buffer.oldest_timestamp


@dataclass(frozen=True)
class HeartbeatReport:
    device: str
    sent_at: int
    agent_version: str
    platform_version: ImageVersion
    battery_pct: int
    charging: bool
    buffered_bytes: int
    outbox_bytes: int
    dropped_count: int
    pending_ota_target: int | None

    def to_json(self) -> dict:
        return {
            "device": self.device,
            "sent_at": self.sent_at,
            "agent_version": self.agent_version,
            "platform_version": self.platform_version.to_json(),
            "battery_pct": self.battery_pct,
            "charging": self.charging,
            "buffered_bytes": self.buffered_bytes,
            "outbox_bytes": self.outbox_bytes,
            "dropped_count": self.dropped_count,
            "pending_ota_target": self.pending_ota_target,
        }


def _live_pending(state: AgentState) -> UpdatePackage | None:
    pkg = state.pending_ota
    if pkg is not None and pkg.base_version == state.image.version and pkg.base_digest == state.image.digest:
        return pkg
    return None


def _due(last, now, interval_s) -> bool:
    return last is None or now - last >= interval_s * US_PER_SECOND


def upload_due(state: AgentState, env: DeviceEnv) -> bool:
    if not (env.charging and env.network_up) or env.now < state.next_retry_at:
        return False
    oldest = state.oldest_pending_timestamp()
    if oldest is None:
        return False
    if state.outbox_bytes + state.buffered_bytes >= state.policy.upload_min_bytes:
        return True
    return env.now - oldest >= state.policy.upload_max_age_s * US_PER_SECOND


def should_apply_ota(state: AgentState, env: DeviceEnv) -> bool:
    if _live_pending(state) is None or not env.charging:
        return False
    start, end = state.policy.apply_window
    if not start <= env.local_time_of_day < end:
        return False
    return env.now - env.last_interaction >= state.policy.idle_threshold_s * US_PER_SECOND


def on_tick(state: AgentState, env: DeviceEnv) -> list:
    """Decide what the agent does at ``env.now``. Never mutates ``state``."""
    policy = state.policy
    actions = []
    if env.network_up and _due(state.last_heartbeat_at, env.now, policy.heartbeat_interval_s):
        actions.append(Action.SEND_HEARTBEAT)
    if upload_due(state, env):
        actions.append(Action.UPLOAD_FILE)
    if env.network_up and _due(state.last_ota_check_at, env.now, policy.ota_check_interval_s):
        actions.append(Action.CHECK_OTA)
    if env.network_up and state.ota_offer is not None:
        actions.append(Action.DOWNLOAD_OTA)
    if should_apply_ota(state, env):
        actions.append(Action.APPLY_OTA)
    elif _live_pending(state) is not None and (
        state.ota_prompt_declined_until is None or env.now >= state.ota_prompt_declined_until
    ):
        actions.append(Action.PROMPT_USER)
    return actions or [Action.NOTHING]


def filter_optout(records, optout, registry: TagRegistry):
    """Drop records whose tag belongs to an opted-out experiment.

    Returns ``(survivors, removed_count)``; survivor order is preserved.
    """
    if not optout:
        records = list(records)
        return records, 0
    kept = []
    removed = 0
    for rec in records:
        if registry.owner(rec.tag) in optout:
            removed += 1
        else:
            kept.append(rec)
    return kept, removed


def build_heartbeat(state: AgentState, env: DeviceEnv) -> HeartbeatReport:
    pending = _live_pending(state)
    return HeartbeatReport(
        device=state.device,
        sent_at=env.now,
        agent_version=AGENT_VERSION,
        platform_version=state.platform_version,
        battery_pct=env.battery_pct,
        charging=env.charging,
        buffered_bytes=state.buffered_bytes,
        outbox_bytes=state.outbox_bytes,
        dropped_count=state.dropped_count,
        pending_ota_target=pending.target_version if pending else None,
    )


def discard_stale_ota(state: AgentState) -> bool:
    if state.pending_ota is not None and _live_pending(state) is None:
        state.pending_ota = None
        return True
    return False


class Conductor:
    """Executes agent decisions against a transport.

    The transport needs three methods: ``upload(device, first_seq, payload)``
    and ``heartbeat(body_dict)`` returning True on acknowledgement, and
    ``fetch_ota(device, version)`` returning package bytes or None.
    ``answer_prompt(state, env)`` supplies the participant's install answer.
    """

    def __init__(self, state: AgentState, transport, registry: TagRegistry | None = None, answer_prompt=None):
        self.state = state
        self.transport = transport
        self.registry = registry or TagRegistry()
        self.answer_prompt = answer_prompt or (lambda state, env: False)
        self.on_rotate = None  # optional callback(RotatedFile)

    def log(self, source, timestamp, task_id, level, tag, message):
        """Producer entry point; opted-out records never reach the buffer."""
        st = self.state
        st.generated += 1
        if st.optout and self.registry.owner(tag) in st.optout:
            st.optout_filtered += 1
            return None
        return st.buffer.append(source, timestamp, task_id, level, tag, message)

    def log_record(self, record, truncated=False):
        st = self.state
        st.generated += 1
        if st.optout and self.registry.owner(record.tag) in st.optout:
            st.optout_filtered += 1
            return None
        return st.buffer.append_record(record, truncated)

    def rotate(self, force=False):
        st = self.state
        if not force and st.buffer.used_bytes < st.policy.rotate_bytes:
            return
        while len(st.buffer):
            f = st.buffer.drain(st.policy.file_max_bytes)
            if f.record_count == 0:
                raise FleetbedError("file_max_bytes is smaller than a single record")
            st.outbox.append(f)
            if self.on_rotate is not None:
                self.on_rotate(f)

    def tick(self, env: DeviceEnv) -> list:
        discard_stale_ota(self.state)
        self.rotate()
        actions = on_tick(self.state, env)
        outcomes = []
        for action in actions:
            outcomes.append((action, self.execute(action, env)))
        return outcomes

    def execute(self, action: Action, env: DeviceEnv):
        st = self.state
        if action is Action.SEND_HEARTBEAT:
            ok = self.transport.heartbeat(build_heartbeat(st, env).to_json())
            if ok:
                st.last_heartbeat_at = env.now
            return ok
        if action is Action.UPLOAD_FILE:
            return self._upload(env)
        if action is Action.CHECK_OTA:
            st.last_ota_check_at = env.now
            blob = self.transport.fetch_ota(st.device, st.image.version)
            st.ota_offer = blob
            return blob is not None
        if action is Action.DOWNLOAD_OTA:
            return self._download()
        if action is Action.PROMPT_USER:
            accepted = bool(self.answer_prompt(st, env))
            if accepted:
                return self._install()
            st.ota_prompt_declined_until = env.next_local_midnight()
            return False
        if action is Action.APPLY_OTA:
            return self._install()
        return None

    def _upload(self, env):
        st = self.state
        self.rotate(force=True)
        sent = 0
        while st.outbox:
            f = st.outbox[0]
            if not self.transport.upload(st.device, f.first_seq, f.content):
                st.retry_backoff = min(
                    st.policy.backoff_cap_s, max(st.policy.backoff_base_s, st.retry_backoff * 2)
                )
                st.next_retry_at = env.now + st.retry_backoff * US_PER_SECOND
                return sent
            st.outbox.popleft()
            st.uploaded_records += f.record_count
            sent += 1
        st.retry_backoff = 0
        st.next_retry_at = 0
        return sent

    def _download(self):
        st = self.state
        blob, st.ota_offer = st.ota_offer, None
        try:
            pkg = UpdatePackage.from_bytes(blob)
        except CorruptPackageError as exc:
            log.warning("discarding unreadable OTA package: %s", exc)
            return False
        if pkg.base_version != st.image.version or not verify(pkg, st.image.digest, len(st.image)):
            return False
        if st.pending_ota is None or st.pending_ota.target_version != pkg.target_version:
            st.pending_ota = pkg
            st.ota_prompt_declined_until = None
        return True

    def _install(self):
        st = self.state
        pkg = _live_pending(st)
        if pkg is None:
            return False
        try:
            st.image = apply(pkg, st.image)
        except (WrongBaseError, CorruptPackageError) as exc:
            log.warning("OTA install failed: %s", exc)
            st.pending_ota = None
            return False
        st.pending_ota = None
        st.ota_prompt_declined_until = None
        return True


def heartbeat_body(report: HeartbeatReport) -> bytes:
    return json.dumps(report.to_json(), sort_keys=True).encode("utf-8")

