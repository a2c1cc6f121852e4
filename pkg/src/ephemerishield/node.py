"""Catalog node: a newline-delimited JSON service over TCP.

A node hosts the whole validator committee in-process (``validators`` of
them, with keys derived from the operator key) and drives the consensus
peers in real time from a single worker thread. Request handlers never touch
the peers directly; they read the latest published view and hand
transactions to the worker through a queue.

Every request is one JSON object per line::

    {"id": 1, "op": "GetObject", "args": {"object_id": 25544}}

and every response carries ``ok``, the committed ``height`` and either a
``result`` or a structured ``error`` with a ``code``.
"""

from __future__ import annotations

import collections
import hashlib
import heapq
import json
import logging
import os
import socketserver
import threading
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Optional

from . import crypto
from .conjunction import ScreeningConfig, screen_catalog
from .consensus import (
    MAX_MESSAGE_BYTES,
    MICROS,
    Committed,
    ConsensusConfig,
    Peer,
    Send,
    Timer,
    sign_message,
    timeout_message,
)
from .elements import Epoch, InfeasibleElementsError, OrbitalElements
from .encoding import EncodingError, decode, encode
from .ledger import (
    Block,
    CatalogState,
    Chain,
    ChainParams,
    EphemerisUpdate,
    PeerIdentity,
    PruneRefused,
    Receipt,
    Role,
    StateImage,
    Transaction,
    append_block,
    make_genesis,
    prune,
    read_chain,
    replay,
    snapshot,
    verify,
    write_chain,
)
from .tle import TleError, parse_tle, to_orbital_elements
from .validation import EphemerisEntry

log = logging.getLogger(__name__)

CONFIG_ENV = "EPHEMERISHIELD_CONFIG"
DEFAULT_PORT = 7411
MAX_REQUEST_BYTES = MAX_MESSAGE_BYTES
RECENT_RECEIPTS = 10000


class ConfigError(ValueError):
    pass


@dataclass
class NodeConfig:
    peer_id: str = "node"
    key_file: Optional[str] = None
    data_dir: str = "ephemerishield-data"
    host: str = "127.0.0.1"
    port: int = DEFAULT_PORT
    chain_id: str = "ephemerishield"
    validators: int = 1                 # committee size hosted in this process
    members: list = field(default_factory=list)    # extra {"peer_id", "roles", "public_key"}
    timeout: float = 5.0
    gossip_interval: float = 1.0
    snapshot_every: int = 0             # blocks between snapshot markers; 0 disables
    retention_seconds: Optional[float] = None
    max_horizon_seconds: float = 7 * 86400.0
    submit_wait_seconds: float = 30.0

    def __post_init__(self):
        if not isinstance(self.peer_id, str) or not self.peer_id:
            raise ConfigError("peer_id must be a non-empty string")
        if not isinstance(self.validators, int) or self.validators < 1:
            raise ConfigError("validators must be a positive integer")
        if not isinstance(self.port, int) or not 0 <= self.port < 65536:
            raise ConfigError("port must be in 0..65535")
        if self.snapshot_every < 0:
            raise ConfigError("snapshot_every must be >= 0")

    @property
    def validator_ids(self) -> tuple[str, ...]:
        return tuple(f"{self.peer_id}-v{k}" for k in range(self.validators))


def load_config(path: Optional[str] = None, **overrides) -> NodeConfig:
    """Read a JSON config from ``path`` (or ``$EPHEMERISHIELD_CONFIG``) and
    apply non-None ``overrides`` on top."""
    path = path or os.environ.get(CONFIG_ENV)
    data: dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(NodeConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return NodeConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# -- identities ------------------------------------------------------------------------

def write_key_file(path: str | os.PathLike, peer_id: str, keys: crypto.KeyPair) -> None:
    data = {"peer_id": peer_id, "private_key": keys.private_key.hex(),
            "public_key": keys.public_key.hex()}
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as f:
        json.dump(data, f, indent=2)
        f.write("\n")


def read_key_file(path: str | os.PathLike) -> tuple[str, crypto.KeyPair]:
    try:
        data = json.loads(Path(path).read_text())
        keys = crypto.KeyPair.from_private(bytes.fromhex(data["private_key"]))
        peer_id = data["peer_id"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot read key file {path}: {exc}") from exc
    if not isinstance(peer_id, str) or not peer_id:
        raise ConfigError(f"key file {path} has no peer_id")
    return peer_id, keys


def validator_keys(operator: crypto.KeyPair, validator_id: str) -> crypto.KeyPair:
    return crypto.KeyPair.from_seed(b"validator", operator.private_key, validator_id)


# -- API errors and the submission format -------------------------------------------------

class ApiError(Exception):
    def __init__(self, code: str, message: str, **extra):
        super().__init__(message)
        self.code = code
        self.extra = extra

    def to_dict(self) -> dict:
        return {"code": self.code, "message": str(self), **self.extra}


def _arg(args: dict, name: str, kind, default=..., required: bool = False):
    if name not in args:
        if required or default is ...:
            raise ApiError("bad_request", f"missing argument {name!r}")
        return default
    value = args[name]
    if kind is int and isinstance(value, bool):
        raise ApiError("bad_request", f"argument {name!r} must be an integer")
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind):
        raise ApiError("bad_request", f"argument {name!r} has the wrong type")
    return value


def entry_from_args(args: dict, provider: str) -> EphemerisEntry:
    """Unsigned entry described by SubmitEphemeris arguments.

    Either ``tle`` (two or three lines of text) or ``object_id`` + ``epoch``
    (ISO-8601) + ``elements`` (degrees, see ``OrbitalElements.as_dict``).
    Client and node both derive the entry with this function, so the
    provider's signature can be checked against the node's own parse.
    """
    try:
        submitted = Epoch(_arg(args, "submitted_at_us", int, required=True))
    except (ValueError, OverflowError):
        raise ApiError("bad_request", "submitted_at_us out of range") from None
    if "tle" in args:
        text = _arg(args, "tle", str)
        lines = [ln.rstrip("\r") for ln in text.split("\n") if ln.strip()]
        if len(lines) not in (2, 3):
            raise ApiError("parse_error", f"expected 2 or 3 element-set lines, got {len(lines)}")
        try:
            record = parse_tle(lines[-2], lines[-1], lines[0] if len(lines) == 3 else None)
            oe, epoch = to_orbital_elements(record)
        except TleError as exc:
            raise ApiError("parse_error", str(exc), detail=exc.to_dict()) from None
        except InfeasibleElementsError as exc:
            raise ApiError("infeasible", str(exc)) from None
        return EphemerisEntry(record.norad_id, epoch, oe, provider, submitted)
    object_id = _arg(args, "object_id", int, required=True)
    try:
        epoch = Epoch.from_iso(_arg(args, "epoch", str, required=True))
        oe = OrbitalElements.from_dict(_arg(args, "elements", dict, required=True))
    except ApiError:
        raise
    except (ValueError, KeyError, TypeError, OverflowError) as exc:
        raise ApiError("bad_request", f"bad element set: {exc}") from None
    return EphemerisEntry(object_id, epoch, oe, provider, submitted)


def submission_args(keys: crypto.KeyPair, peer_id: str, seq: int, *,
                    tle: Optional[str] = None, object_id: Optional[int] = None,
                    epoch: Optional[str] = None, elements: Optional[dict] = None,
                    submitted_at: Optional[Epoch] = None, wait: bool = True) -> dict:
    """Client side: build signed SubmitEphemeris arguments."""
    submitted_at = submitted_at or Epoch.from_seconds(time.time())
    args: dict[str, Any] = {"submitted_at_us": submitted_at.micros, "seq": seq, "wait": wait}
    if tle is not None:
        args["tle"] = tle
    else:
        args.update(object_id=object_id, epoch=epoch, elements=elements)
    entry = entry_from_args(args, peer_id).signed(keys)
    tx = Transaction(EphemerisUpdate(entry), peer_id, seq).signed(keys)
    args["entry_signature"] = entry.signature.hex()
    args["signature"] = tx.signature.hex()
    return args


def request_bytes(op: str, args: dict) -> bytes:
    """Canonical bytes covered by a request signature."""
    body = json.dumps({"op": op, "args": args}, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=True, allow_nan=False)
    return b"ephemerishield-request\x00" + body.encode()


def sign_request(keys: crypto.KeyPair, peer_id: str, op: str, args: dict) -> dict:
    return {"peer_id": peer_id, "signature": keys.sign(request_bytes(op, args)).hex()}


def receipt_dict(receipt: Receipt) -> dict:
    return {
        "status": receipt.status,
        "detail": receipt.detail,
        "warning_id": receipt.warning_id,
        "outcome": None if receipt.outcome is None else receipt.outcome.as_dict(),
    }


def tx_key(tx: Transaction) -> bytes:
    return hashlib.sha256(encode(tx)).digest()


# -- committee driver ------------------------------------------------------------------------

class LocalCluster:
    """Runs every committee peer in one worker thread against the wall clock."""

    def __init__(self, peers: list[Peer], on_commit: Callable[[Block], None],
                 gossip_interval: float = 1.0):
        self.peers = {p.id: p for p in peers}
        self.primary = peers[0]
        self.on_commit = on_commit
        self.gossip_us = round(gossip_interval * MICROS)
        self.base = self.primary.clock_base
        self._cv = threading.Condition()
        self._incoming: collections.deque = collections.deque()
        self._calls: collections.deque = collections.deque()
        self._timers: list = []
        self._counter = 0
        self._stop = False
        self._thread: Optional[threading.Thread] = None
        self.error: Optional[BaseException] = None

    def now(self) -> int:
        return max(0, int(time.time() * MICROS) - self.base)

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, name="commit-worker", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        with self._cv:
            self._stop = True
            self._cv.notify_all()
        if self._thread is not None:
            self._thread.join(timeout=10)

    @property
    def alive(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    def submit(self, tx: Transaction) -> None:
        """Thread-safe: hand a transaction to every hosted peer."""
        with self._cv:
            self._incoming.append(tx)
            self._cv.notify_all()

    def call(self, fn: Callable[[], None]) -> None:
        """Run ``fn`` on the worker thread (used for pruning)."""
        with self._cv:
            self._calls.append(fn)
            self._cv.notify_all()

    def _route(self, sender: Peer, outputs: list, queue: collections.deque) -> None:
        for out in outputs:
            if isinstance(out, Send):
                targets = [out.to] if out.to is not None else [p for p in self.peers if p != sender.id]
                for t in targets:
                    if t in self.peers:
                        queue.append((t, out.message))
            elif isinstance(out, Timer):
                self._counter += 1
                heapq.heappush(self._timers, (out.at, self._counter, sender.id, out.timeout))
            elif isinstance(out, Committed) and sender is self.primary:
                self.on_commit(out.block)

    def _drain(self, queue: collections.deque) -> None:
        while queue:
            pid, msg = queue.popleft()
            peer = self.peers[pid]
            self._route(peer, peer.step(self.now(), [msg]), queue)

    def _run(self) -> None:
        try:
            self._loop()
        except BaseException as exc:       # surfaced through /GetChainInfo and logs
            log.exception("commit worker stopped")
            self.error = exc

    def _loop(self) -> None:
        queue: collections.deque = collections.deque()
        next_tick = self.now() + self.gossip_us
        while True:
            with self._cv:
                while not (self._stop or self._incoming or self._calls):
                    deadline = next_tick
                    if self._timers:
                        deadline = min(deadline, self._timers[0][0])
                    wait = (deadline - self.now()) / MICROS
                    if wait <= 0:
                        break
                    self._cv.wait(wait)
                if self._stop:
                    return
                incoming = list(self._incoming)
                calls = list(self._calls)
                self._incoming.clear()
                self._calls.clear()
            for fn in calls:
                fn()
            for tx in incoming:
                for pid, peer in self.peers.items():
                    queue.append((pid, sign_message("SubmitTx", self.primary.id, tx, self.primary.keys)))
            self._drain(queue)
            now = self.now()
            while self._timers and self._timers[0][0] <= now:
                _, _, pid, timeout = heapq.heappop(self._timers)
                peer = self.peers[pid]
                self._route(peer, peer.step(now, [timeout_message(pid, timeout)]), queue)
                self._drain(queue)
            if now >= next_tick:
                for peer in self.peers.values():
                    self._route(peer, peer.tick(now), queue)
                self._drain(queue)
                next_tick = now + self.gossip_us


# -- node ------------------------------------------------------------------------------------

@dataclass(frozen=True)
class View:
    """Immutable snapshot of the committed catalog handed to readers."""

    state: CatalogState
    tip: Block
    blocks: tuple[Block, ...]
    genesis: Block
    snapshot_state: Optional[CatalogState]

    @property
    def height(self) -> int:
        return self.state.height

    def chain(self) -> Chain:
        return Chain(self.genesis, list(self.blocks), self.snapshot_state)


class Node:
    def __init__(self, config: NodeConfig, keys: Optional[crypto.KeyPair] = None):
        self.config = config
        if keys is None:
            if not config.key_file:
                raise ConfigError("a key_file is required")
            peer_id, keys = read_key_file(config.key_file)
            if peer_id != config.peer_id and config.peer_id == NodeConfig.peer_id:
                config.peer_id = peer_id
        self.keys = keys
        self.data_dir = Path(config.data_dir)
        self._lock = threading.Lock()
        self._commit_cv = threading.Condition(self._lock)
        self._receipts: collections.OrderedDict = collections.OrderedDict()
        self._server: Optional[socketserver.ThreadingTCPServer] = None
        self._server_thread: Optional[threading.Thread] = None
        chain, state = self._open()
        ccfg = ConsensusConfig(timeout=config.timeout, gossip_interval=config.gossip_interval)
        peers = []
        for vid in config.validator_ids:
            peer = Peer(vid, validator_keys(keys, vid), chain.genesis, ccfg)
            if chain.blocks:
                peer.restore(Chain(chain.genesis, list(chain.blocks), chain.snapshot_state), state)
            peers.append(peer)
        self.cluster = LocalCluster(peers, self._on_commit, config.gossip_interval)
        self._view = View(state, chain.tip, tuple(chain.blocks), chain.genesis, chain.snapshot_state)

    # -- persistence -------------------------------------------------------------------

    def genesis_params(self) -> ChainParams:
        cfg = self.config
        members = [PeerIdentity(cfg.peer_id, (Role.PROVIDER, Role.USER, Role.ANALYST),
                                self.keys.public_key)]
        for vid in cfg.validator_ids:
            members.append(PeerIdentity(vid, (Role.ANALYST,), validator_keys(self.keys, vid).public_key))
        for m in cfg.members:
            try:
                members.append(PeerIdentity(m["peer_id"], tuple(Role(r) for r in m["roles"]),
                                            bytes.fromhex(m["public_key"])))
            except (KeyError, ValueError, TypeError) as exc:
                raise ConfigError(f"bad member entry {m!r}: {exc}") from exc
        extra = {}
        if cfg.retention_seconds is not None:
            extra["retention_seconds"] = float(cfg.retention_seconds)
        return ChainParams(cfg.chain_id, tuple(members), cfg.validator_ids, **extra)

    def _open(self) -> tuple[Chain, CatalogState]:
        if (self.data_dir / "MANIFEST").exists():
            chain = read_chain(self.data_dir)
            state = self._load_state(chain)
            if state is None:
                state = replay(chain)     # raises on a chain that does not verify
            if state.params.committee != self.config.validator_ids:
                raise ConfigError("data directory belongs to a different committee")
            log.info("opened chain at height %d", chain.height)
            return chain, state
        genesis, state = make_genesis(self.genesis_params(), Epoch.from_seconds(time.time()))
        chain = Chain(genesis)
        write_chain(self.data_dir, chain)
        log.info("created chain %s", genesis.digest.hex()[:16])
        return chain, state

    def _load_state(self, chain: Chain) -> Optional[CatalogState]:
        path = self.data_dir / "state.bin"
        try:
            image = decode(path.read_bytes())
        except (OSError, EncodingError):
            return None
        if not isinstance(image, StateImage) or image.height != chain.height:
            return None
        state = CatalogState.from_image(image)
        if state.state_hash() != chain.tip.state_hash:
            return None
        return state

    def persist_state(self) -> None:
        view = self._view
        tmp = self.data_dir / "state.bin.tmp"
        tmp.write_bytes(encode(view.state.image()))
        os.replace(tmp, self.data_dir / "state.bin")

    # -- commit path (worker thread) ----------------------------------------------------

    def _on_commit(self, block: Block) -> None:
        append_block(self.data_dir, block)
        primary = self.cluster.primary
        view = self._view
        snap_state = view.snapshot_state
        blocks = view.blocks + (block,)
        if block.snapshot_marker is not None:
            self.cluster.call(self._prune)
        with self._commit_cv:
            for tx, receipt in zip(block.txs, block.receipts):
                self._receipts[tx_key(tx)] = (block.height, receipt)
            while len(self._receipts) > RECENT_RECEIPTS:
                self._receipts.popitem(last=False)
            self._view = View(primary.state, block, blocks, view.genesis, snap_state)
            self._commit_cv.notify_all()
        every = self.config.snapshot_every
        if every and block.height % every == 0 and not primary.mempool:
            self.cluster.submit(snapshot(primary.state, primary.id, primary.next_seq(), primary.keys))

    def _prune(self) -> None:
        primary = self.cluster.primary
        try:
            pruned = prune(primary.chain)
        except PruneRefused:
            return
        if pruned.first_height == primary.chain.first_height:
            return
        for peer in self.cluster.peers.values():
            peer.chain = Chain(pruned.genesis, list(pruned.blocks), pruned.snapshot_state)
        write_chain(self.data_dir, pruned)
        with self._commit_cv:
            self._view = View(primary.state, primary.chain.tip, tuple(pruned.blocks),
                              pruned.genesis, pruned.snapshot_state)
        log.info("pruned chain; first retained height %d", pruned.first_height)

    # -- lifecycle ---------------------------------------------------------------------

    def start(self, serve: bool = True) -> None:
        self.cluster.start()
        if serve:
            node = self

            class Handler(socketserver.StreamRequestHandler):
                def handle(self):
                    node._serve_connection(self.rfile, self.wfile)

            class Server(socketserver.ThreadingTCPServer):
                daemon_threads = True
                allow_reuse_address = True

            self._server = Server((self.config.host, self.config.port), Handler)
            self._server_thread = threading.Thread(target=self._server.serve_forever,
                                                   name="api-server", daemon=True)
            self._server_thread.start()

    @property
    def address(self) -> tuple[str, int]:
        if self._server is None:
            return self.config.host, self.config.port
        return self._server.server_address[:2]

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None
        self.cluster.stop()
        self.persist_state()

    def __enter__(self) -> Node:
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    def wait_for_height(self, height: int, timeout: float = 30.0) -> bool:
        deadline = time.monotonic() + timeout
        with self._commit_cv:
            while self._view.height < height:
                left = deadline - time.monotonic()
                if left <= 0:
                    return False
                self._commit_cv.wait(left)
        return True

    # -- transport ---------------------------------------------------------------------

    def _serve_connection(self, rfile, wfile) -> None:
        while True:
            try:
                line = rfile.readline(MAX_REQUEST_BYTES + 1)
            except OSError:
                return
            if not line:
                return
            if len(line) > MAX_REQUEST_BYTES and not line.endswith(b"\n"):
                wfile.write(self._error_line(None, ApiError("too_large", "request exceeds size cap")))
                return
            if not line.strip():
                continue
            try:
                wfile.write(self.handle_line(line))
                wfile.flush()
            except OSError:
                return

    def _error_line(self, req_id, err: ApiError) -> bytes:
        resp = {"id": req_id, "ok": False, "height": self._view.height, "error": err.to_dict()}
        return (json.dumps(resp, sort_keys=True) + "\n").encode()

    def handle_line(self, raw: bytes) -> bytes:
        """One request line in, one response line out. Never raises."""
        req_id = None
        try:
            if len(raw) > MAX_REQUEST_BYTES:
                raise ApiError("too_large", "request exceeds size cap")
            try:
                req = json.loads(raw)
            except (ValueError, RecursionError):
                raise ApiError("bad_json", "request is not valid JSON") from None
            if not isinstance(req, dict):
                raise ApiError("bad_request", "request must be a JSON object")
            rid = req.get("id")
            if rid is None or isinstance(rid, (str, int, float, bool)):
                req_id = rid
            resp = self.handle_request(req.get("op"), req.get("args", {}), req.get("auth"))
            resp["id"] = req_id
            return (json.dumps(resp, sort_keys=True) + "\n").encode()
        except ApiError as err:
            return self._error_line(req_id, err)
        except Exception as exc:    # pragma: no cover - last resort
            log.exception("internal error")
            return self._error_line(req_id, ApiError("internal", type(exc).__name__))

    def handle_request(self, op, args, auth=None) -> dict:
        """Dispatch one decoded request; returns the response object."""
        handler = self.OPS.get(op) if isinstance(op, str) else None
        if handler is None:
            raise ApiError("unknown_op", f"unknown operation {op!r}", ops=sorted(self.OPS))
        if not isinstance(args, dict):
            raise ApiError("bad_request", "args must be a JSON object")
        view = self._view
        if op in self.MUTATING:
            args = dict(args, _peer=self._authenticate(view, op, args, auth))
        result = handler(self, view, args)
        return {"ok": True, "height": self._view.height, "result": result}

    def _authenticate(self, view: View, op: str, args: dict, auth) -> PeerIdentity:
        if not isinstance(auth, dict):
            raise ApiError("unauthorized", f"{op} requires an auth block")
        peer_id = auth.get("peer_id")
        sig = auth.get("signature")
        if not isinstance(peer_id, str) or not isinstance(sig, str):
            raise ApiError("unauthorized", "auth needs peer_id and signature")
        member = view.state.members.get(peer_id)
        if member is None:
            raise ApiError("unauthorized", f"{peer_id!r} is not a member")
        try:
            ok = crypto.verify(member.public_key, request_bytes(op, args), bytes.fromhex(sig))
        except ValueError:
            ok = False
        if not ok:
            raise ApiError("unauthorized", "request signature check failed")
        return member

    # -- operations ----------------------------------------------------------------------

    def _get_chain_info(self, view: View, args: dict) -> dict:
        state = view.state
        out = {
            "chain_id": state.params.chain_id,
            "height": view.height,
            "tip": view.tip.digest.hex(),
            "timestamp": view.tip.timestamp.isoformat(),
            "genesis": view.genesis.digest.hex(),
            "committee": list(state.params.committee),
            "members": [{"peer_id": m.peer_id, "roles": [r.value for r in m.roles]}
                        for m in sorted(state.members.values(), key=lambda m: m.peer_id)],
            "first_height": view.blocks[0].height if view.blocks else None,
            "snapshot_height": None if view.snapshot_state is None else view.snapshot_state.height,
            "pruned_before": None if state.pruned_before is None else state.pruned_before.isoformat(),
            "objects": len(state.objects),
            "open_warnings": len(state.open_warnings()),
            "worker_alive": self.cluster.alive,
        }
        peer_id = _arg(args, "peer_id", str, None)
        if peer_id is not None:
            out["nonce"] = state.nonces.get(peer_id, 0)
        return out

    def _get_object(self, view: View, args: dict) -> dict:
        oid = _arg(args, "object_id", int, required=True)
        state = view.state
        epoch_text = _arg(args, "epoch", str, None)
        if epoch_text is not None:
            try:
                epoch = Epoch.from_iso(epoch_text)
            except ValueError as exc:
                raise ApiError("bad_request", f"bad epoch: {exc}") from None
            found = state.lookup(oid, epoch)
            if found.status == "pruned":
                raise ApiError("pruned", f"object {oid} at {epoch_text} lies before the retention window",
                               object_id=oid, pruned_before=state.pruned_before.isoformat())
            if found.status == "not_found":
                raise ApiError("not_found", f"object {oid} has no element set at {epoch_text}",
                               object_id=oid)
            return {"object_id": oid, "entry": _history_dict(found.entry)}
        hist = state.history(oid)
        if not hist:
            raise ApiError("not_found", f"object {oid} is not in the catalog", object_id=oid)
        return {
            "object_id": oid,
            "latest": _history_dict(hist[-1]),
            "history": [_history_dict(h) for h in hist],
            "warnings": [w.as_dict() for w in state.open_warnings(oid)],
            "pruned_before": None if state.pruned_before is None else state.pruned_before.isoformat(),
        }

    def _list_catalog(self, view: View, args: dict) -> dict:
        offset = _arg(args, "offset", int, 0)
        limit = _arg(args, "limit", int, 1000)
        if offset < 0 or limit < 0:
            raise ApiError("bad_request", "offset and limit must be >= 0")
        state = view.state
        ids = sorted(state.objects)
        objs = []
        for oid in ids[offset:offset + limit]:
            latest = state.history(oid)[-1]
            objs.append({"object_id": oid, **_history_dict(latest),
                         "entries": len(state.history(oid))})
        return {"total": len(ids), "offset": offset, "objects": objs}

    def _get_warnings(self, view: View, args: dict) -> dict:
        since = _arg(args, "since", int, -1)
        oid = _arg(args, "object_id", int, None)
        include_resolved = _arg(args, "include_resolved", bool, False)
        out = []
        for _, w in sorted(view.state.warnings.items()):
            if w.height <= since or (oid is not None and w.object_id != oid):
                continue
            if w.resolved and not include_resolved:
                continue
            out.append(w.as_dict())
        return {"since": since, "warnings": out}

    def _request_screening(self, view: View, args: dict) -> dict:
        kw = {}
        for name in ("horizon_seconds", "coarse_step_seconds", "alert_distance_km",
                     "sieve_pad_km", "refine_tolerance_seconds"):
            if name in args:
                kw[name] = _arg(args, name, float)
        if kw.get("horizon_seconds", ScreeningConfig.horizon_seconds) > self.config.max_horizon_seconds:
            raise ApiError("bad_request", "horizon exceeds the node limit",
                           max_horizon_seconds=self.config.max_horizon_seconds)
        if "alert_distance_km" in kw and "sieve_pad_km" not in kw:
            kw["sieve_pad_km"] = max(ScreeningConfig.sieve_pad_km, kw["alert_distance_km"])
        try:
            cfg = ScreeningConfig(**kw)
        except ValueError as exc:
            raise ApiError("bad_request", str(exc)) from None
        start = None
        if "start" in args:
            try:
                start = Epoch.from_iso(_arg(args, "start", str))
            except ValueError as exc:
                raise ApiError("bad_request", f"bad start: {exc}") from None
        catalog = view.state
        ids = _arg(args, "object_ids", list, None)
        if ids is not None:
            if not all(isinstance(i, int) and not isinstance(i, bool) for i in ids):
                raise ApiError("bad_request", "object_ids must be integers")
            wanted = set(ids)
            catalog = {oid: (view.state.history(oid)[-1].elements, view.state.history(oid)[-1].epoch)
                       for oid in view.state.objects if oid in wanted and view.state.history(oid)}
        report = screen_catalog(catalog, cfg, start=start)
        return {"summary": report.summary(), "events": [e.as_dict() for e in report.events]}

    def _verify_chain(self, view: View, args: dict) -> dict:
        return verify(view.chain()).as_dict()

    def _submit_ephemeris(self, view: View, args: dict) -> dict:
        member = args["_peer"]
        provider = member.peer_id
        seq = _arg(args, "seq", int, required=True)
        state = view.state
        if not member.has(Role.PROVIDER):
            raise ApiError("unauthorized", f"{provider!r} does not hold the Provider role")
        try:
            entry_sig = bytes.fromhex(_arg(args, "entry_signature", str, required=True))
            tx_sig = bytes.fromhex(_arg(args, "signature", str, required=True))
        except ValueError:
            raise ApiError("bad_request", "signatures must be hex") from None
        entry = entry_from_args(args, provider)
        entry = EphemerisEntry(entry.object_id, entry.epoch, entry.elements, provider,
                               entry.submitted_at, entry_sig)
        tx = Transaction(EphemerisUpdate(entry), provider, seq, tx_sig)
        if not entry.verify(member.public_key) or not crypto.verify(member.public_key,
                                                                    tx.signing_bytes(), tx_sig):
            raise ApiError("unauthorized", "signature check failed")
        if seq <= state.nonces.get(provider, 0):
            raise ApiError("stale_seq", f"seq {seq} already used",
                           nonce=state.nonces.get(provider, 0))
        if not self.cluster.alive:
            raise ApiError("unavailable", "commit worker is not running")
        key = tx_key(tx)
        self.cluster.submit(tx)
        result = {"object_id": entry.object_id, "epoch": entry.epoch.isoformat(),
                  "tx": key.hex(), "status": "queued"}
        if _arg(args, "wait", bool, False):
            deadline = time.monotonic() + self.config.submit_wait_seconds
            with self._commit_cv:
                while key not in self._receipts:
                    left = deadline - time.monotonic()
                    if left <= 0:
                        raise ApiError("timeout", "transaction not committed in time", tx=key.hex())
                    self._commit_cv.wait(left)
                height, receipt = self._receipts[key]
            result.update(receipt_dict(receipt), block_height=height)
        return result

    MUTATING = frozenset({"SubmitEphemeris"})
    OPS = {
        "GetChainInfo": _get_chain_info,
        "GetObject": _get_object,
        "ListCatalog": _list_catalog,
        "GetWarnings": _get_warnings,
        "RequestScreening": _request_screening,
        "VerifyChain": _verify_chain,
        "SubmitEphemeris": _submit_ephemeris,
    }


def _history_dict(h) -> dict:
    return {"epoch": h.epoch.isoformat(), "provider": h.provider, "elements": h.elements.as_dict()}


# -- client ------------------------------------------------------------------------------------

class NodeClient:
    """Blocking JSON-lines client; one connection per instance."""

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT, timeout: float = 60.0):
        import socket
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._file = self._sock.makefile("rwb")
        self._next = 0

    def request(self, op: str, args: Optional[dict] = None,
                identity: Optional[tuple[str, crypto.KeyPair]] = None) -> dict:
        """Send one request; ``identity`` (peer_id, keys) signs it."""
        self._next += 1
        req: dict[str, Any] = {"id": self._next, "op": op, "args": args or {}}
        if identity is not None:
            req["auth"] = sign_request(identity[1], identity[0], op, req["args"])
        line = json.dumps(req) + "\n"
        self._file.write(line.encode())
        self._file.flush()
        raw = self._file.readline()
        if not raw:
            raise ConnectionError("node closed the connection")
        return json.loads(raw)

    def close(self) -> None:
        self._file.close()
        self._sock.close()

    def __enter__(self) -> NodeClient:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


__all__ = [
    "ApiError", "CONFIG_ENV", "ConfigError", "LocalCluster", "Node", "NodeClient", "NodeConfig",
    "View", "entry_from_args", "load_config", "read_key_file", "receipt_dict",
    "request_bytes", "sign_request", "submission_args", "validator_keys", "write_key_file",
]
