"""Backend request handling, independent of any socket layer.

``Backend.handle`` maps one request (method, path, query, headers, body) to a
``Response``. The HTTP server and the simulator both go through it, so the
wire formats are exercised the same way in either setting.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from urllib.parse import parse_qs

from ..core import ImageVersion, TagCategory, format_stored, is_device_id
from ..errors import FleetbedError, InvalidArgument, MalformedUploadError, SeqConflictError, UnknownDeviceError
from ..lifecycle import Cohort, Release
from ..ota import DEFAULT_HISTORY_DEPTH, Image, package_for
from .store import QueryRequest, Store

HEARTBEAT_FIELDS = (
    "device",
    "sent_at",
    "agent_version",
    "platform_version",
    "battery_pct",
    "charging",
    "buffered_bytes",
    "outbox_bytes",
    "dropped_count",
    "pending_ota_target",
)


@dataclass
class Response:
    status: int
    body: bytes = b""
    content_type: str = "application/json"

    def json(self):
        return json.loads(self.body)


def _json_response(status, obj) -> Response:
    return Response(status, json.dumps(obj, sort_keys=True).encode("utf-8"))


def _error(status, exc_or_msg, **extra) -> Response:
    kind = getattr(exc_or_msg, "kind", "error")
    return _json_response(status, {"error": kind, "message": str(exc_or_msg), **extra})


@dataclass
class OtaCatalog:
    """Released images and which devices see which cohort."""

    images: dict = field(default_factory=dict)  # version -> Image
    releases: list = field(default_factory=list)  # lifecycle.Release, in cut order
    developers: set = field(default_factory=set)
    history_depth: int = DEFAULT_HISTORY_DEPTH
    _packages: dict = field(default_factory=dict)

    def add_image(self, image: Image):
        self.images[image.version] = image

    def add_release(self, release: Release, image: Image):
        if image.version != release.version:
            raise InvalidArgument("image version must equal release version")
        self.add_image(image)
        self.releases.append(release)

    def target_for(self, device: str) -> int | None:
        dev = device in self.developers
        for rel in reversed(self.releases):
            if rel.cohort is Cohort.ALL or dev:
                return rel.version
        if not self.releases and self.images:
            return max(self.images)
        return None

    def offer(self, device: str, version: int):
        """The package bytes a device on ``version`` should fetch, or None."""
        target = self.target_for(device)
        if target is None or version >= target:
            return None
        key = (version, target)
        blob = self._packages.get(key)
        if blob is None:
            base = self.images.get(version)
            if base is None:
                raise InvalidArgument(f"unknown base version {version}")
            history = [self.images[v] for v in sorted(self.images) if v < target]
            blob = package_for(base, history, self.images[target], self.history_depth).to_bytes()
            self._packages[key] = blob
        return blob


class Backend:
    def __init__(self, store: Store, catalog: OtaCatalog | None = None, clock=None):
        self.store = store
        self.catalog = catalog or OtaCatalog()
        self.clock = clock or (lambda: time.time_ns() // 1000)

    def handle(self, method: str, path: str, query: str = "", headers=None, body: bytes = b"", now=None) -> Response:
        headers = {k.lower(): v for k, v in (headers or {}).items()}
        params = {k: v[-1] for k, v in parse_qs(query, keep_blank_values=True).items()}
        now = self.clock() if now is None else now
        route = (method.upper(), path.rstrip("/") or "/")
        try:
            if route == ("POST", "/v1/upload"):
                return self._upload(params, headers, body, now)
            if route == ("POST", "/v1/heartbeat"):
                return self._heartbeat(body, now)
            if route == ("GET", "/v1/ota"):
                return self._ota(params)
            if route == ("GET", "/v1/query"):
                return self._query(params)
            if route == ("GET", "/v1/stats/tags"):
                return _json_response(200, self.store.tag_stats())
        except UnknownDeviceError as exc:
            return _error(403, exc)
        except MalformedUploadError as exc:
            return _error(400, exc, malformed=exc.malformed, records=exc.records)
        except SeqConflictError as exc:
            return _error(409, exc)
        except FleetbedError as exc:
            return _error(400, exc)
        except (KeyError, ValueError) as exc:
            return _error(400, f"bad request: {exc}")
        return _error(404, f"no route for {method} {path}")

    def _upload(self, params, headers, body, now):
        device = params["device"]
        first_seq = int(params["seq"])
        compressed = headers.get("content-encoding", "").lower() == "gzip"
        report = self.store.ingest(device, body, now, first_seq, compressed=compressed or None)
        return _json_response(200, report.to_json())

    def _heartbeat(self, body, now):
        report = json.loads(body)
        if not isinstance(report, dict) or set(report) != set(HEARTBEAT_FIELDS):
            raise InvalidArgument(f"heartbeat must carry exactly the fields {', '.join(HEARTBEAT_FIELDS)}")
        ImageVersion.from_json(report["platform_version"])
        sent_at = report["sent_at"]
        if not isinstance(sent_at, int):
            raise InvalidArgument("sent_at must be integer microseconds")
        return _json_response(200, self.store.record_heartbeat(report["device"], sent_at, now, report))

    def _ota(self, params):
        device = params["device"]
        if device not in self.store.enrolled:
            raise UnknownDeviceError(f"device {device[:12]}… is not enrolled")
        blob = self.catalog.offer(device, int(params["version"]))
        if blob is None:
            return Response(204, b"", "application/octet-stream")
        return Response(200, blob, "application/octet-stream")

    def _query(self, params):
        req = query_from_params(params)
        lines = [format_stored(rec) + "\n" for rec in self.store.query(req)]
        return Response(200, "".join(lines).encode("utf-8"), "text/plain; charset=utf-8")


def _csv(value):
    return [v for v in value.split(",") if v] if value else []


def query_from_params(params) -> QueryRequest:
    devices = _csv(params.get("devices"))
    for d in devices:
        if not is_device_id(d):
            raise InvalidArgument(f"bad device id {d!r}")
    return QueryRequest(
        int(params["start"]),
        int(params["end"]),
        tags=frozenset(_csv(params.get("tags"))),
        devices=frozenset(devices),
        categories=frozenset(TagCategory.parse(c) for c in _csv(params.get("categories"))),
    )
