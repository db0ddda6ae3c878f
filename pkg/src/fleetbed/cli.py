"""``fleetbed`` operator command line.

Exit status is 0 on success, 1 on a domain error (bad state transition,
wrong OTA base, unknown device, ...) and 2 on a usage error. Pass ``--json``
for machine-readable output on stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .backend import Backend, OtaCatalog, QueryRequest, Store
from .core import US_PER_SECOND, TagCategory, format_stored, hash_device_id, is_device_id
from .errors import FleetbedError
from .lifecycle import (
    DEFAULT_PREVIEW_LIMIT,
    Cohort,
    DataRequest,
    Event,
    Lifecycle,
    execute_data_request,
    parse_experiment_id,
)
from .ota import Image, UpdatePackage, apply, generate, generate_chain, verify

log = logging.getLogger("fleetbed")

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

CONFIG_NAME = "fleetbed.toml"
US_PER_HOUR = 3600 * US_PER_SECOND

EXP_EVENTS = {
    "approve": Event.APPROVE,
    "develop": Event.START_DEV,
    "stage": Event.STAGE,
    "deploy": Event.DEPLOY,
    "end": Event.END,
    "remove": Event.REMOVE,
    "merge": Event.MERGE_TO_MASTER,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


# --- configuration -----------------------------------------------------------


def load_config(path=None) -> dict:
    """Read ``fleetbed.toml`` (explicit path, else the working directory)."""
    if path is None:
        path = Path(CONFIG_NAME)
        if not path.exists():
            return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"bad config file {path}: {exc}") from None


def _data_dir(args, cfg) -> Path:
    return Path(args.data_dir or cfg.get("data_dir") or "fleetbed-data")


def store_root(args, cfg) -> Path:
    if getattr(args, "store", None):
        return Path(args.store)
    if os.environ.get("FLEETBED_STORE"):
        return Path(os.environ["FLEETBED_STORE"])
    if cfg.get("store"):
        return Path(cfg["store"])
    return _data_dir(args, cfg) / "store"


def registry_path(args, cfg) -> Path:
    if cfg.get("registry"):
        return Path(cfg["registry"])
    return _data_dir(args, cfg) / "registry.json"


def images_dir(args, cfg) -> Path:
    return Path(cfg.get("images") or _data_dir(args, cfg) / "images")


def load_lifecycle(args, cfg) -> Lifecycle:
    lc = Lifecycle.load(registry_path(args, cfg))
    if "soak_hours" in cfg:
        lc.soak_us = int(float(cfg["soak_hours"]) * US_PER_HOUR)
    if "preview_limit" in cfg:
        lc.preview_limit = int(cfg["preview_limit"])
    return lc


def open_store(args, cfg) -> Store:
    lc = load_lifecycle(args, cfg)
    return Store(store_root(args, cfg), compress=bool(cfg.get("compress", False)), registry=lc.tag_registry())


def _now(args) -> int:
    at = getattr(args, "at", None)
    return int(at) if at is not None else time.time_ns() // 1000


def _emit(args, obj, text=None):
    if args.json:
        print(json.dumps(obj, sort_keys=True))
    elif text is not None:
        if text:
            print(text)
    else:
        print(json.dumps(obj, sort_keys=True, indent=2))


def _csv_list(text):
    return [x for x in (text or "").split(",") if x]


# --- exp / release -------------------------------------------------------------


def cmd_exp_create(args, cfg):
    lc = load_lifecycle(args, cfg)
    inst, code = parse_experiment_id(args.id)
    exp = lc.create(inst, code, args.description, irb_approved=args.irb, permissive_toggle=args.permissive, now=_now(args))
    lc.save(registry_path(args, cfg))
    _emit(args, exp.to_json(), f"created {exp.id} ({exp.state.value})")


def cmd_exp_event(args, cfg):
    lc = load_lifecycle(args, cfg)
    exp = lc.apply(args.id, EXP_EVENTS[args.verb], _now(args))
    lc.save(registry_path(args, cfg))
    _emit(args, exp.to_json(), f"{exp.id} -> {exp.state.value}")


def cmd_exp_list(args, cfg):
    lc = load_lifecycle(args, cfg)
    exps = [lc.experiments[k] for k in sorted(lc.experiments)]
    lines = [f"{e.id}\t{e.state.value}\t{e.description}" for e in exps]
    _emit(args, [e.to_json() for e in exps], "\n".join(lines))


def cmd_release_cut(args, cfg):
    lc = load_lifecycle(args, cfg)
    rel = lc.cut_release(_csv_list(args.experiments), Cohort.parse(args.cohort), _now(args))
    if args.image:
        dest = images_dir(args, cfg) / f"v{rel.version}.img"
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_bytes(Path(args.image).read_bytes())
    lc.save(registry_path(args, cfg))
    names = ",".join(sorted(f"{i}-{c}" for i, c in rel.included)) or "-"
    _emit(args, rel.to_json(), f"release v{rel.version} ({rel.cohort.value}): {names}")


# --- ota -----------------------------------------------------------------------


def _read_image(path, version) -> Image:
    return Image(int(version), Path(path).read_bytes())


def _read_pkg(path) -> UpdatePackage:
    return UpdatePackage.from_bytes(Path(path).read_bytes())


def _pkg_summary(pkg: UpdatePackage, size: int) -> dict:
    return {
        "base_version": pkg.base_version,
        "target_version": pkg.target_version,
        "base_digest": pkg.base_digest.hex(),
        "target_digest": pkg.target_digest.hex(),
        "ops": len(pkg.ops),
        "insert_bytes": pkg.insert_bytes,
        "package_bytes": size,
        "full_image": pkg.is_full_image,
    }


def cmd_ota_gen(args, cfg):
    base = _read_image(args.base, args.base_version)
    target = _read_image(args.target, args.target_version)
    blob = generate(base, target).to_bytes()
    Path(args.out).write_bytes(blob)
    info = _pkg_summary(UpdatePackage.from_bytes(blob), len(blob))
    _emit(args, info, f"wrote {args.out}: {len(blob)} bytes, {info['insert_bytes']} inserted")


def cmd_ota_chain(args, cfg):
    images = [Image(i + 1, Path(p).read_bytes()) for i, p in enumerate(args.images)]
    if len(images) < 2:
        raise UsageError("ota chain needs at least two images")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = images[-1]
    written = []
    for pkg in generate_chain(images[:-1], target):
        blob = pkg.to_bytes()
        path = out / f"v{pkg.base_version}-v{pkg.target_version}.ota"
        path.write_bytes(blob)
        written.append({"path": str(path), **_pkg_summary(pkg, len(blob))})
    _emit(args, written, "\n".join(f"{w['path']}\t{w['package_bytes']}" for w in written))


def cmd_ota_apply(args, cfg):
    pkg = _read_pkg(args.pkg)
    base = _read_image(args.base, pkg.base_version)
    new = apply(pkg, base)
    Path(args.out).write_bytes(new.data)
    _emit(args, new.image_version.to_json(), f"wrote {args.out}: version {new.version} {new.fingerprint}")


def cmd_ota_verify(args, cfg):
    pkg = _read_pkg(args.pkg)
    data = Path(args.base).read_bytes()
    base = Image(pkg.base_version, data)
    ok = verify(pkg, base.digest, len(data))
    _emit(args, {"ok": ok, **_pkg_summary(pkg, Path(args.pkg).stat().st_size)}, "ok" if ok else "mismatch")
    return 0 if ok else 1


# --- backend ---------------------------------------------------------------------


def build_catalog(args, cfg, lc: Lifecycle) -> OtaCatalog:
    catalog = OtaCatalog(developers=set(cfg.get("developers", [])))
    idir = images_dir(args, cfg)
    for rel in lc.releases:
        path = idir / f"v{rel.version}.img"
        if path.exists():
            catalog.add_release(rel, Image(rel.version, path.read_bytes()))
    return catalog


def cmd_serve(args, cfg):
    from .backend.http import make_server

    host, _, port = args.addr.rpartition(":")
    if not port.isdigit():
        raise UsageError("--addr must be HOST:PORT")
    lc = load_lifecycle(args, cfg)
    store = open_store(args, cfg)
    server = make_server(Backend(store, build_catalog(args, cfg, lc)), host or "127.0.0.1", int(port))
    print(f"listening on {server.server_address[0]}:{server.server_address[1]}", file=sys.stderr, flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        store.close()
    return 0


def cmd_ingest(args, cfg):
    device = args.device if is_device_id(args.device) else hash_device_id(args.device)
    content = Path(args.file).read_bytes()
    with open_store(args, cfg) as store:
        if args.enroll:
            store.enroll(device)
        report = store.ingest(device, content, _now(args), args.seq)
    info = {"device": device, **report.to_json()}
    _emit(args, info, f"accepted {report.accepted}, duplicates {report.duplicates}")


def _query_request(args) -> QueryRequest:
    devices = [d if is_device_id(d) else hash_device_id(d) for d in _csv_list(args.devices)]
    return QueryRequest(
        args.start,
        args.end,
        tags=frozenset(_csv_list(args.tags)),
        devices=frozenset(devices),
        categories=frozenset(TagCategory.parse(c) for c in _csv_list(args.categories)),
    )


def _stored_json(s):
    r = s.record
    return {
        "device": r.device,
        "upload_time": s.upload_time,
        "seq": s.seq,
        "timestamp": r.timestamp,
        "task_id": r.task_id,
        "level": r.level.value,
        "tag": r.tag,
        "message": r.message,
    }


def cmd_query(args, cfg):
    req = _query_request(args)
    with open_store(args, cfg) as store:
        for s in store.query(req):
            if args.json:
                print(json.dumps(_stored_json(s), sort_keys=True, ensure_ascii=False))
            else:
                print(format_stored(s))


def cmd_stats_tags(args, cfg):
    with open_store(args, cfg) as store:
        table = store.tag_stats()
    lines = [f"{'category':<12}{'tags':>8}{'lines':>12}"]
    for row in table["rows"]:
        lines.append(f"{row['category']:<12}{row['tag_count']:>8}{row['line_count']:>12}")
    t = table["total"]
    lines.append(f"{'Total':<12}{t['tag_count']:>8}{t['line_count']:>12}")
    _emit(args, table, "\n".join(lines))


def cmd_data_request(args, cfg):
    req = DataRequest(args.requester, _query_request(args), irb_letter=args.irb_letter)
    limit = int(cfg.get("preview_limit", DEFAULT_PREVIEW_LIMIT))
    with open_store(args, cfg) as store:
        decision, rows = execute_data_request(store, req, limit)
    if args.json:
        print(json.dumps({"decision": decision.to_json(), "rows": len(rows)}, sort_keys=True))
        for s in rows:
            print(json.dumps(_stored_json(s), sort_keys=True, ensure_ascii=False))
    else:
        print(f"# {decision.status.value} {decision.reason}".rstrip(), file=sys.stderr)
        for s in rows:
            print(format_stored(s))
    return 1 if decision.status.value == "Denied" else 0


# --- sim / metrics ----------------------------------------------------------------


def cmd_sim_run(args, cfg):
    from .sim import FleetConfig, report_json, run, write_report

    config = FleetConfig.load(args.fleet)
    if args.seed is not None:
        config.seed = args.seed
    report = run(config, store_dir=args.sim_store)
    if args.out:
        paths = write_report(report, args.out, figures=not args.no_figures)
        print(f"wrote {', '.join(str(p) for p in paths.values())}", file=sys.stderr)
        summary = {
            "devices": report["devices"],
            "median_ratio": report["median_ratio"],
            "balanced": report["ledger"]["balanced"],
            "stored": report["ledger"]["stored"],
        }
        _emit(args, summary)
    else:
        sys.stdout.write(report_json(report))


def _load_report(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def cmd_metrics_daily(args, cfg):
    from .metrics import daily_active

    if args.report:
        rows = _load_report(args.report)["daily"]
    else:
        from .sim import _day_iso

        with open_store(args, cfg) as store:
            days = daily_active(store.heartbeats, store.enrolled)
        rows = [{"day": _day_iso(d.day), "active": d.active, "enrolled": d.enrolled, "ratio": d.ratio} for d in days]
    if args.plot:
        import datetime as dt

        from .plotting import plot_daily_active
        from .sim import EPOCH

        plot_daily_active(
            [{"day": (dt.date.fromisoformat(r["day"]) - EPOCH).days, **{k: r[k] for k in ("active", "enrolled")}} for r in rows],
            args.plot,
        )
    text = "day,active,enrolled,ratio\n" + "\n".join(
        f"{r['day']},{r['active']},{r['enrolled']},{r['ratio']!r}" for r in rows
    )
    _emit(args, rows, text)


def cmd_metrics_cdf(args, cfg):
    from .metrics import daily_active, ratio_cdf

    curves = {}
    if args.report:
        for path in args.report:
            curves[Path(path).stem] = ratio_cdf(_load_report(path)["daily_active_ratio"])
    else:
        with open_store(args, cfg) as store:
            curves["store"] = ratio_cdf(d.ratio for d in daily_active(store.heartbeats, store.enrolled))
    if args.plot:
        from .plotting import plot_ratio_cdf

        plot_ratio_cdf(curves, args.plot)
    out = {k: {"points": [[x, y] for x, y in c.points], "median": c.median()} for k, c in curves.items()}
    lines = ["label,ratio,cdf"]
    for k, c in curves.items():
        lines.extend(f"{k},{x!r},{y!r}" for x, y in c.points)
    _emit(args, out, "\n".join(lines))


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def shared(suppress):
        # Subcommands repeat the global flags; SUPPRESS keeps a flag given
        # before the subcommand from being reset by the subparser default.
        kw = {"default": argparse.SUPPRESS} if suppress else {}
        parser = _Parser(add_help=False)
        parser.add_argument("--json", action="store_true", help="machine-readable output", **kw)
        parser.add_argument("--config", help=f"config file (default ./{CONFIG_NAME})", **kw)
        parser.add_argument("--data-dir", help="root for registry, images and store", **kw)
        return parser

    common = shared(True)
    p = _Parser(prog="fleetbed", description="Smartphone testbed operations.", parents=[shared(False)])
    p.add_argument("--version", action="version", version=f"fleetbed {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def at(sp):
        sp.add_argument("--at", type=int, help="event time in microseconds since the epoch (default: now)")

    exp = sub.add_parser("exp", help="experiment lifecycle", parents=[common])
    exp_sub = exp.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    sp = exp_sub.add_parser("create", parents=[common])
    sp.add_argument("--id", required=True, help="Institution-Code")
    sp.add_argument("--description", default="")
    sp.add_argument("--irb", action="store_true", help="IRB approval on file")
    sp.add_argument("--permissive", action="store_true", help="participants may opt out")
    at(sp)
    sp.set_defaults(func=cmd_exp_create)
    for verb in EXP_EVENTS:
        sp = exp_sub.add_parser(verb, parents=[common])
        sp.add_argument("--id", required=True)
        at(sp)
        sp.set_defaults(func=cmd_exp_event)
    sp = exp_sub.add_parser("list", parents=[common])
    sp.set_defaults(func=cmd_exp_list)

    rel = sub.add_parser("release", help="platform releases", parents=[common])
    rel_sub = rel.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    sp = rel_sub.add_parser("cut", parents=[common])
    sp.add_argument("--cohort", required=True, choices=[c.value for c in Cohort])
    sp.add_argument("--experiments", default="", help="comma-separated experiment ids")
    sp.add_argument("--image", help="platform image file to publish for this release")
    at(sp)
    sp.set_defaults(func=cmd_release_cut)

    ota = sub.add_parser("ota", help="OTA package tooling", parents=[common])
    ota_sub = ota.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    sp = ota_sub.add_parser("gen", parents=[common])
    sp.add_argument("--base", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--base-version", type=int, default=1)
    sp.add_argument("--target-version", type=int, default=2)
    sp.set_defaults(func=cmd_ota_gen)
    sp = ota_sub.add_parser("chain", parents=[common], help="packages from every image to the last one")
    sp.add_argument("--images", nargs="+", required=True, help="images in version order (v1, v2, ...)")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_ota_chain)
    sp = ota_sub.add_parser("apply", parents=[common])
    sp.add_argument("--base", required=True)
    sp.add_argument("--pkg", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ota_apply)
    sp = ota_sub.add_parser("verify", parents=[common])
    sp.add_argument("--base", required=True)
    sp.add_argument("--pkg", required=True)
    sp.set_defaults(func=cmd_ota_verify)

    sp = sub.add_parser("serve", help="run the ingest backend", parents=[common])
    sp.add_argument("--addr", default="127.0.0.1:8080")
    sp.add_argument("--store")
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("ingest", help="ingest a device log file offline", parents=[common])
    sp.add_argument("--device", required=True, help="device id, or a MEID to hash")
    sp.add_argument("--file", required=True)
    sp.add_argument("--seq", type=int, required=True, help="seq of the file's first record")
    sp.add_argument("--enroll", action="store_true")
    sp.add_argument("--store")
    at(sp)
    sp.set_defaults(func=cmd_ingest)

    def query_flags(sp):
        sp.add_argument("--start", type=int, required=True, help="microseconds, inclusive")
        sp.add_argument("--end", type=int, required=True, help="microseconds, exclusive")
        sp.add_argument("--tags", default="")
        sp.add_argument("--devices", default="")
        sp.add_argument("--categories", default="")
        sp.add_argument("--store")

    sp = sub.add_parser("query", help="query stored records", parents=[common])
    query_flags(sp)
    sp.set_defaults(func=cmd_query)

    stats = sub.add_parser("stats", help="store statistics", parents=[common])
    stats_sub = stats.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    sp = stats_sub.add_parser("tags", parents=[common])
    sp.add_argument("--store")
    sp.set_defaults(func=cmd_stats_tags)

    simp = sub.add_parser("sim", help="fleet simulation", parents=[common])
    sim_sub = simp.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    sp = sim_sub.add_parser("run", parents=[common])
    sp.add_argument("fleet", metavar="FLEET_JSON", help="fleet config (JSON)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="directory for report.json, CSV and figures (default: JSON to stdout)")
    sp.add_argument("--no-figures", action="store_true")
    sp.add_argument("--sim-store", help="keep the simulated backend store here")
    sp.set_defaults(func=cmd_sim_run)

    met = sub.add_parser("metrics", help="fleet activity metrics", parents=[common])
    met_sub = met.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    sp = met_sub.add_parser("daily-active", parents=[common])
    sp.add_argument("--report", help="sim report.json (default: the store's heartbeat ledger)")
    sp.add_argument("--plot", help="write a figure here")
    sp.add_argument("--store")
    sp.set_defaults(func=cmd_metrics_daily)
    sp = met_sub.add_parser("cdf", parents=[common])
    sp.add_argument("--report", nargs="+", help="one or more sim report.json files")
    sp.add_argument("--plot")
    sp.add_argument("--store")
    sp.set_defaults(func=cmd_metrics_cdf)

    data = sub.add_parser("data", help="IRB-gated dataset access", parents=[common])
    data_sub = data.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    sp = data_sub.add_parser("request", parents=[common])
    sp.add_argument("--requester", required=True)
    sp.add_argument("--irb-letter", action="store_true")
    query_flags(sp)
    sp.set_defaults(func=cmd_data_request)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        rc = args.func(args, cfg)
    except UsageError as exc:
        print(f"fleetbed: error: {exc}", file=sys.stderr)
        return 2
    except FleetbedError as exc:
        print(f"fleetbed: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"fleetbed: error: {exc}", file=sys.stderr)
        return 1
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
