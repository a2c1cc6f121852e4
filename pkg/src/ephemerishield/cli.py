"""Command-line interface.

Output is one JSON document on stdout unless ``--human`` is given.
Exit codes: 0 success, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .crypto import KeyPair
from .ledger import StorageError, read_chain, verify
from .node import (
    DEFAULT_PORT,
    ApiError,
    ConfigError,
    Node,
    NodeClient,
    load_config,
    read_key_file,
    submission_args,
    write_key_file,
)
from .simulation import ScenarioError, SimScenario, run_simulation

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
NODE_ENV = "EPHEMERISHIELD_NODE"


class UserError(Exception):
    """Bad input from the operator; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USER)


# -- output -------------------------------------------------------------------------------

def _table(rows: list[dict], columns: Sequence[str]) -> str:
    if not rows:
        return "(none)"
    cells = [[_cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _cell(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _pairs(d: dict) -> str:
    width = max((len(k) for k in d), default=0)
    return "\n".join(f"{k.ljust(width)}  {_cell(v) if not isinstance(v, (dict, list)) else json.dumps(v)}"
                     for k, v in d.items())


def _emit(args, payload: dict, human: Optional[str] = None) -> None:
    if args.human and human is not None:
        print(human)
    else:
        print(json.dumps(payload, sort_keys=True, indent=None if not args.human else 2))


# -- node connection ------------------------------------------------------------------------

def _endpoint(args) -> tuple[str, int]:
    host, port = args.host, args.port
    env = os.environ.get(NODE_ENV)
    if env and (host is None or port is None):
        h, _, p = env.rpartition(":")
        host = host or h or "127.0.0.1"
        if port is None and p.isdigit():
            port = int(p)
    return host or "127.0.0.1", port or DEFAULT_PORT


def _client(args) -> NodeClient:
    host, port = _endpoint(args)
    try:
        return NodeClient(host, port, timeout=args.timeout)
    except OSError as exc:
        raise UserError(f"cannot reach node at {host}:{port}: {exc}") from exc


def _call(client: NodeClient, op: str, body: Optional[dict] = None, identity=None) -> dict:
    resp = client.request(op, body, identity)
    if not resp.get("ok"):
        err = resp.get("error", {})
        raise ApiError(err.get("code", "error"), err.get("message", "request failed"),
                       **{k: v for k, v in err.items() if k not in ("code", "message")},
                       height=resp.get("height"))
    return resp


def _identity(args) -> tuple[str, KeyPair]:
    path = args.key or os.environ.get("EPHEMERISHIELD_KEY")
    if not path:
        raise UserError("a key file is required (--key)")
    return read_key_file(path)


# -- commands ------------------------------------------------------------------------------------

def cmd_keygen(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        raise UserError(f"{out} exists; pass --force to overwrite")
    keys = KeyPair.generate()
    write_key_file(out, args.peer_id, keys)
    payload = {"peer_id": args.peer_id, "public_key": keys.public_key.hex(), "path": str(out)}
    _emit(args, payload, _pairs(payload))
    return EXIT_OK


def cmd_run_node(args) -> int:
    overrides = {"key_file": args.key, "data_dir": args.data_dir, "host": args.host,
                 "port": args.port, "validators": args.validators}
    config = load_config(args.config, **overrides)
    if config.key_file is None:
        raise UserError("run-node needs a key file (--key or key_file in the config)")
    key_peer, keys = read_key_file(config.key_file)
    if args.peer_id:
        config.peer_id = args.peer_id
    elif config.peer_id == "node":
        config.peer_id = key_peer
    node = Node(config, keys)
    node.start()
    host, port = node.address
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    _emit(args, {"event": "listening", "host": host, "port": port,
                 "height": node._view.height, "data_dir": str(config.data_dir)},
          f"listening on {host}:{port} (height {node._view.height})")
    sys.stdout.flush()
    try:
        while not stop.wait(0.5):
            if not node.cluster.alive:
                logging.error("commit worker stopped; shutting down")
                node.stop()
                return EXIT_INTERNAL
    finally:
        if node.cluster.alive:
            node.stop()
    _emit(args, {"event": "stopped", "height": node._view.height}, "stopped")
    return EXIT_OK


def _element_sets(text: str) -> list[str]:
    """Split a TLE file into 2- or 3-line groups (parsing is left to the node)."""
    lines = [ln.rstrip("\r") for ln in text.splitlines() if ln.strip()]
    groups, i = [], 0
    while i < len(lines):
        start = i
        if not lines[i].startswith("1 "):
            i += 1
        groups.append("\n".join(lines[start:i + 2]))
        i += 2
    return groups


def cmd_submit(args) -> int:
    peer_id, keys = _identity(args)
    try:
        text = Path(args.file).read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise UserError(f"cannot read {args.file}: {exc}") from exc
    sets = _element_sets(text)
    if not sets:
        raise UserError(f"{args.file} holds no element sets")
    results = []
    with _client(args) as client:
        info = _call(client, "GetChainInfo", {"peer_id": peer_id})["result"]
        seq = info.get("nonce", 0)
        for k, tle in enumerate(sets):
            seq += 1
            try:
                body = submission_args(keys, peer_id, seq, tle=tle, wait=not args.no_wait)
                resp = _call(client, "SubmitEphemeris", body, (peer_id, keys))
            except ApiError as exc:
                # the set is not submitted; report it and carry on with the rest
                seq -= 1
                if exc.code not in ("parse_error", "infeasible", "bad_request"):
                    raise
                first = tle.splitlines()[-2] if tle.count("\n") else tle
                results.append({"index": k + 1, "object_id": first[2:7].strip() or None,
                                "epoch": None, "status": "error", "detail": exc.code,
                                "error": exc.to_dict()})
                continue
            results.append({"index": k + 1, **resp["result"]})
        height = _call(client, "GetChainInfo")["height"]
    counts = {s: sum(r.get("status") == s for r in results)
              for s in ("applied", "warning", "rejected", "queued", "error")}
    payload = {"submitted": len(results) - counts["error"], "applied": counts["applied"],
               "warnings": counts["warning"], "rejected": counts["rejected"],
               "errors": counts["error"], "queued": counts["queued"], "height": height,
               "results": results}
    rows = [{"object": r["object_id"], "epoch": r["epoch"], "status": r.get("status"),
             "reason": r.get("detail"), "warning": r.get("warning_id"), "block": r.get("block_height")}
            for r in results]
    _emit(args, payload, _table(rows, ["object", "epoch", "status", "reason", "warning", "block"])
          + f"\n{payload['submitted']} submitted, {counts['warning']} warnings, "
            f"{counts['error']} not submitted, height {height}")
    return EXIT_OK if counts["rejected"] == 0 and counts["error"] == 0 else EXIT_USER


def cmd_get(args) -> int:
    body = {"object_id": args.object_id}
    if args.epoch:
        body["epoch"] = args.epoch
    with _client(args) as client:
        resp = _call(client, "GetObject", body)
    res = resp["result"]
    payload = {"height": resp["height"], **res}
    if "history" in res:
        rows = [{"epoch": h["epoch"], "provider": h["provider"], **h["elements"]} for h in res["history"]]
        human = (f"object {res['object_id']} (height {resp['height']}, "
                 f"{len(res['warnings'])} open warnings)\n"
                 + _table(rows, ["epoch", "provider", "semi_major_axis_km", "eccentricity",
                                 "inclination_deg", "raan_deg", "argp_deg", "mean_anomaly_deg"]))
    else:
        human = _pairs({"object_id": res["object_id"], **res["entry"]})
    _emit(args, payload, human)
    return EXIT_OK


def cmd_catalog(args) -> int:
    with _client(args) as client:
        resp = _call(client, "ListCatalog", {"offset": args.offset, "limit": args.limit})
    res = resp["result"]
    rows = [{"object": o["object_id"], "epoch": o["epoch"], "provider": o["provider"],
             "a_km": o["elements"]["semi_major_axis_km"], "e": o["elements"]["eccentricity"],
             "i_deg": o["elements"]["inclination_deg"], "entries": o["entries"]}
            for o in res["objects"]]
    _emit(args, {"height": resp["height"], **res},
          _table(rows, ["object", "epoch", "provider", "a_km", "e", "i_deg", "entries"])
          + f"\n{res['total']} objects, height {resp['height']}")
    return EXIT_OK


def cmd_warnings(args) -> int:
    body = {"since": args.since, "include_resolved": args.all}
    if args.object_id is not None:
        body["object_id"] = args.object_id
    with _client(args) as client:
        resp = _call(client, "GetWarnings", body)
    res = resp["result"]
    rows = [{"id": w["warning_id"], "object": w["object_id"], "epoch": w["epoch"],
             "provider": w["provider"], "reason": w.get("reason"), "height": w["height"]}
            for w in res["warnings"]]
    _emit(args, {"height": resp["height"], "count": len(rows), **res},
          _table(rows, ["id", "object", "epoch", "provider", "reason", "height"]))
    return EXIT_OK


def cmd_screen(args) -> int:
    body = {}
    if args.horizon is not None:
        body["horizon_seconds"] = args.horizon
    if args.alert_km is not None:
        body["alert_distance_km"] = args.alert_km
    if args.step is not None:
        body["coarse_step_seconds"] = args.step
    if args.start:
        body["start"] = args.start
    with _client(args) as client:
        resp = _call(client, "RequestScreening", body)
    res = resp["result"]
    rows = [{"object_a": e["object_a"], "object_b": e["object_b"], "tca": e["tca"],
             "miss_km": e["miss_distance_km"]} for e in res["events"]]
    _emit(args, {"height": resp["height"], **res},
          _table(rows, ["object_a", "object_b", "tca", "miss_km"])
          + f"\n{len(rows)} events from {res['summary']['pairs_total']} pairs")
    return EXIT_OK


def cmd_verify_chain(args) -> int:
    try:
        chain = read_chain(args.data_dir)
    except StorageError as exc:
        payload = {"ok": False, "height": exc.height, "reason": str(exc)}
        _emit(args, payload, f"FAILED at height {exc.height}: {exc}")
        return EXIT_USER
    result = verify(chain)
    payload = {**result.as_dict(), "blocks": len(chain.blocks),
               "first_height": chain.first_height, "tip_height": chain.height}
    if result.ok:
        _emit(args, payload, f"OK: {len(chain.blocks)} blocks verified up to height {chain.height}")
        return EXIT_OK
    _emit(args, payload, f"FAILED at height {result.height}: {result.reason}")
    return EXIT_USER


def cmd_simulate(args) -> int:
    try:
        scenario = SimScenario.from_json(Path(args.scenario).read_text())
    except OSError as exc:
        raise UserError(f"cannot read {args.scenario}: {exc}") from exc
    except ValueError as exc:
        raise UserError(f"bad scenario: {exc}") from exc
    if args.seed is not None:
        scenario = SimScenario.from_dict({**scenario.to_dict(), "seed": args.seed})
    trace = run_simulation(scenario)
    out = args.out or str(Path(args.scenario).with_suffix(".trace.ndjson"))
    trace.write(out)
    summary = dict(trace.summary())
    summary["trace"] = out
    _emit(args, summary, _pairs(summary))
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--human", action="store_true", help="tables instead of JSON")
    common.add_argument("--log-level", default="WARNING")
    net = argparse.ArgumentParser(add_help=False)
    net.add_argument("--host", default=None, help=f"node address (or ${NODE_ENV}=host:port)")
    net.add_argument("--port", type=int, default=None)
    net.add_argument("--timeout", type=float, default=120.0, help="socket timeout in seconds")

    p = _Parser(prog="ephemerishield", description="Permissioned space-object catalog node and tools.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("keygen", parents=[common], help="write a new identity key file")
    s.add_argument("--out", default="identity.key")
    s.add_argument("--peer-id", default="operator")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_keygen)

    s = sub.add_parser("run-node", parents=[common], help="run a node until interrupted")
    s.add_argument("--config", default=None, help="JSON config (default $EPHEMERISHIELD_CONFIG)")
    s.add_argument("--key", default=None)
    s.add_argument("--peer-id", default=None)
    s.add_argument("--data-dir", default=None)
    s.add_argument("--host", default=None)
    s.add_argument("--port", type=int, default=None)
    s.add_argument("--validators", type=int, default=None, help="committee size hosted in-process")
    s.set_defaults(func=cmd_run_node)

    s = sub.add_parser("submit", parents=[common, net], help="submit a TLE file")
    s.add_argument("file")
    s.add_argument("--key", default=None)
    s.add_argument("--no-wait", action="store_true", help="return once queued")
    s.set_defaults(func=cmd_submit)

    s = sub.add_parser("get", parents=[common, net], help="element history of one object")
    s.add_argument("object_id", type=int)
    s.add_argument("--epoch", default=None, help="ISO-8601 epoch for a point lookup")
    s.set_defaults(func=cmd_get)

    s = sub.add_parser("catalog", parents=[common, net], help="latest element set per object")
    s.add_argument("--offset", type=int, default=0)
    s.add_argument("--limit", type=int, default=1000)
    s.set_defaults(func=cmd_catalog)

    s = sub.add_parser("warnings", parents=[common, net], help="validation warnings")
    s.add_argument("--since", type=int, default=-1, help="only warnings recorded after this height")
    s.add_argument("--object-id", type=int, default=None)
    s.add_argument("--all", action="store_true", help="include resolved warnings")
    s.set_defaults(func=cmd_warnings)

    s = sub.add_parser("screen", parents=[common, net], help="conjunction screening")
    s.add_argument("--horizon", type=float, default=None, help="seconds")
    s.add_argument("--alert-km", type=float, default=None)
    s.add_argument("--step", type=float, default=None, help="coarse step in seconds")
    s.add_argument("--start", default=None, help="ISO-8601 start epoch")
    s.set_defaults(func=cmd_screen)

    s = sub.add_parser("verify-chain", parents=[common], help="audit a data directory offline")
    s.add_argument("data_dir")
    s.set_defaults(func=cmd_verify_chain)

    s = sub.add_parser("simulate", parents=[common], help="run a network simulation scenario")
    s.add_argument("scenario")
    s.add_argument("--out", default=None, help="trace path (default <scenario>.trace.ndjson)")
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USER
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ApiError as exc:
        print(json.dumps({"ok": False, "error": exc.to_dict()}, sort_keys=True), file=sys.stderr)
        return EXIT_USER if exc.code != "internal" else EXIT_INTERNAL
    except (UserError, ConfigError, ScenarioError, StorageError) as exc:
        print(json.dumps({"ok": False, "error": {"code": "user_error", "message": str(exc)}}),
              file=sys.stderr)
        return EXIT_USER
    except KeyboardInterrupt:
        return EXIT_USER
    except Exception as exc:
        logging.getLogger(__name__).debug("internal error", exc_info=True)
        print(json.dumps({"ok": False, "error": {"code": "internal",
                                                 "message": f"{type(exc).__name__}: {exc}"}}),
              file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
