"""Deterministic discrete-event simulation of a committee under faults.

Virtual time is kept in integer microseconds. Every random draw comes from
one ``random.Random(seed)`` consumed in event order, and events with equal
timestamps are ordered by insertion, so a scenario always produces the
same trace.

Actors:

* validators ``v0..v{n-1}`` run :class:`~ephemerishield.consensus.Peer`;
* providers ``p0..p{k-1}`` own a share of the objects and submit their
  element sets every ``update_interval`` seconds, one transaction in flight
  at a time, resending if it has not committed after ``resend_after``;
* the byzantine map turns validators ``silent`` or ``equivocate`` and
  providers ``spoof`` (every entry after the first per object is perturbed
  by ``spoof_factor`` times the tolerance of ``spoof_element``).

Attack scripts add one-off events: ``spoof`` and ``error`` perturb one
provider submission at the source; ``mitm`` alters submissions in transit
on matching links without re-signing them.
"""

from __future__ import annotations

import dataclasses
import heapq
import json
import math
import random
from dataclasses import dataclass, field
from typing import Any, Optional

from .consensus import (
    MICROS,
    Committed,
    ConsensusConfig,
    Message,
    Peer,
    Proposal,
    Send,
    Timer,
    proposal_bytes,
    sign_message,
    timeout_message,
)
from .crypto import KeyPair
from .elements import Epoch, OrbitalElements
from .ledger import (
    Block,
    ChainParams,
    EphemerisUpdate,
    PeerIdentity,
    Role,
    Transaction,
    build_block,
    make_genesis,
)
from .propagation import propagate
from .validation import DEFAULT_VALIDATION, EphemerisEntry

VALIDATOR_MODES = ("silent", "equivocate")
PROVIDER_MODES = ("spoof",)
ELEMENTS = ("a", "e", "i", "raan", "argp", "M")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class LinkModel:
    delay: str = "uniform"          # uniform | exponential | fixed
    low: float = 0.005              # seconds; also the fixed delay
    high: float = 0.05              # seconds; mean for exponential
    drop: float = 0.0
    duplicate: float = 0.0

    def __post_init__(self):
        if self.delay not in ("uniform", "exponential", "fixed"):
            raise ScenarioError(f"unknown delay distribution {self.delay!r}")
        if not (0 <= self.low <= self.high or self.delay == "fixed"):
            raise ScenarioError("need 0 <= low <= high")
        if not (0.0 <= self.drop < 1.0 and 0.0 <= self.duplicate < 1.0):
            raise ScenarioError("probabilities must be in [0, 1)")

    def sample(self, rng: random.Random) -> int:
        if self.delay == "fixed":
            d = self.low
        elif self.delay == "uniform":
            d = rng.uniform(self.low, self.high)
        else:
            d = self.low + rng.expovariate(1.0 / max(self.high, 1e-9))
        return max(1, round(d * MICROS))


@dataclass(frozen=True)
class Attack:
    type: str                       # spoof | error | mitm
    at: float                       # seconds
    provider: Optional[str] = None  # spoof / error: the submitting provider
    object: Optional[int] = None
    factor: float = 10.0
    element: str = "a"
    src: Optional[str] = None       # mitm: link source (provider id)
    dst: Optional[str] = None       # mitm: link destination, None = every link

    def __post_init__(self):
        if self.type not in ("spoof", "error", "mitm"):
            raise ScenarioError(f"unknown attack type {self.type!r}")
        if self.element not in ELEMENTS:
            raise ScenarioError(f"unknown element {self.element!r}")
        if self.type == "mitm" and not self.src:
            raise ScenarioError("mitm attack needs src")
        if self.type != "mitm" and not self.provider:
            raise ScenarioError(f"{self.type} attack needs provider")


@dataclass(frozen=True)
class SimScenario:
    seed: int = 0
    peers: int = 4
    providers: int = 3
    objects: int = 6
    byzantine: dict = field(default_factory=dict)     # actor id -> mode
    link: LinkModel = LinkModel()
    links: dict = field(default_factory=dict)         # "src->dst" -> LinkModel
    attacks: tuple = ()
    duration: float = 120.0
    drain: float = 60.0
    update_interval: float = 30.0
    resend_after: float = 10.0
    spoof_factor: float = 10.0
    spoof_element: str = "a"
    timeout: float = 5.0
    gossip_interval: float = 1.0
    start: str = "2024-01-01T00:00:00Z"
    name: str = "scenario"

    def __post_init__(self):
        if self.peers < 1 or self.providers < 0 or self.objects < 0:
            raise ScenarioError("peers must be >= 1; providers and objects >= 0")
        if self.objects and not self.providers:
            raise ScenarioError("objects need at least one provider")
        for actor, mode in self.byzantine.items():
            if actor in self.validator_ids():
                if mode not in VALIDATOR_MODES:
                    raise ScenarioError(f"validator mode must be one of {VALIDATOR_MODES}")
            elif actor in self.provider_ids():
                if mode not in PROVIDER_MODES:
                    raise ScenarioError(f"provider mode must be one of {PROVIDER_MODES}")
            else:
                raise ScenarioError(f"unknown byzantine actor {actor!r}")
        if self.spoof_element not in ELEMENTS:
            raise ScenarioError(f"unknown element {self.spoof_element!r}")
        if not (self.duration > 0 and self.drain >= 0 and self.update_interval > 0):
            raise ScenarioError("duration and update_interval must be positive")
        Epoch.from_iso(self.start)

    def validator_ids(self) -> list[str]:
        return [f"v{i}" for i in range(self.peers)]

    def provider_ids(self) -> list[str]:
        return [f"p{i}" for i in range(self.providers)]

    @property
    def faulty_validators(self) -> int:
        return sum(1 for v in self.validator_ids() if v in self.byzantine)

    def link_for(self, src: str, dst: str) -> LinkModel:
        return self.links.get(f"{src}->{dst}", self.link)

    @classmethod
    def from_dict(cls, d: dict) -> SimScenario:
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ScenarioError(f"unknown scenario fields: {', '.join(unknown)}")
        try:
            if "link" in d:
                d["link"] = LinkModel(**d["link"])
            if "links" in d:
                d["links"] = {k: LinkModel(**v) for k, v in d["links"].items()}
            if "attacks" in d:
                d["attacks"] = tuple(Attack(**a) for a in d["attacks"])
            if "byzantine" in d:
                d["byzantine"] = dict(d["byzantine"])
            return cls(**d)
        except TypeError as exc:
            raise ScenarioError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> SimScenario:
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["attacks"] = [dataclasses.asdict(a) for a in self.attacks]
        return d


# -- trace -----------------------------------------------------------------------------

@dataclass
class SimTrace:
    scenario: SimScenario
    events: list[dict] = field(default_factory=list)
    honest: list[str] = field(default_factory=list)
    final_state_hashes: dict[str, str] = field(default_factory=dict)
    final_heights: dict[str, int] = field(default_factory=dict)
    commits: dict[str, dict[int, str]] = field(default_factory=dict)   # peer -> height -> digest
    injected: list[dict] = field(default_factory=list)
    peers: dict[str, Peer] = field(default_factory=dict, repr=False)

    def to_ndjson(self) -> str:
        return "".join(json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n"
                       for e in self.events)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_ndjson())

    def safety_violations(self) -> list[int]:
        """Heights at which two honest peers committed different digests."""
        bad = []
        heights = sorted({h for p in self.honest for h in self.commits.get(p, {})})
        for h in heights:
            digests = {self.commits[p][h] for p in self.honest if h in self.commits.get(p, {})}
            if len(digests) > 1:
                bad.append(h)
        return bad

    def replicated(self) -> bool:
        return len({self.final_state_hashes[p] for p in self.honest}) == 1

    def events_of(self, ev: str) -> list[dict]:
        return [e for e in self.events if e["ev"] == ev]

    def summary(self) -> dict:
        return self.events[-1] if self.events and self.events[-1]["ev"] == "summary" else {}


# -- actors ----------------------------------------------------------------------------

class EquivocatingPeer(Peer):
    """Sends conflicting proposals to different peers and withholds its votes."""

    def _broadcast_proposal(self, block: Block, valid_round: int) -> None:
        h = self.h
        twin, _ = build_block(self.state, block.txs, block.prev_hash, block.height, self.id,
                              Epoch(block.timestamp.micros + 1))
        others = [p for p in self.committee if p != self.id]
        for i, dst in enumerate(others):
            b = block if i % 2 == 0 else twin
            sig = self.keys.sign(proposal_bytes(self.height, h.round, b.digest))
            prop = Proposal(self.height, h.round, valid_round, b, sig)
            self._send("Propose", prop, to=dst)
        self.equivocated = getattr(self, "equivocated", []) + [(self.height, h.round,
                                                                block.digest.hex(), twin.digest.hex())]

    def _prevote(self, digest: bytes) -> None:
        self.h.step = "prevote"

    def _precommit(self, digest: bytes) -> None:
        self.h.step = "precommit"


@dataclass
class _Provider:
    pid: str
    keys: KeyPair
    mode: Optional[str]
    objects: list[int]
    queue: list = field(default_factory=list)        # pending (object, epoch, elements, label)
    in_flight: Optional[tuple] = None                # (tx, message, label, sent_at)
    seq: int = 0
    established: set = field(default_factory=set)
    attacks: list = field(default_factory=list)


def _perturb(oe: OrbitalElements, element: str, amount: float) -> OrbitalElements:
    if element == "a":
        return oe.replace(semi_major_axis_km=oe.semi_major_axis_km + amount)
    if element == "e":
        e = oe.eccentricity + amount
        if e >= 1.0:
            e = oe.eccentricity - amount
        return oe.replace(eccentricity=abs(e))
    if element == "i":
        i = oe.inclination_rad + amount
        if i > math.pi:
            i = oe.inclination_rad - amount
        return oe.replace(inclination_rad=i)
    key = {"raan": "raan_rad", "argp": "argp_rad", "M": "mean_anomaly_rad"}[element]
    return oe.replace(**{key: getattr(oe, key) + amount})


def _tolerance(element: str, gap_seconds: float = 0.0) -> float:
    return DEFAULT_VALIDATION.epsilon.vector(gap_seconds)[ELEMENTS.index(element)]


def _true_elements(rng: random.Random) -> OrbitalElements:
    return OrbitalElements.from_angles(
        rng.uniform(6800.0, 7800.0), rng.uniform(0.0, 0.02), rng.uniform(0.1, 3.0),
        rng.uniform(0.0, 2 * math.pi), rng.uniform(0.0, 2 * math.pi), rng.uniform(0.0, 2 * math.pi))


# -- simulator --------------------------------------------------------------------------

class Simulator:
    def __init__(self, scenario: SimScenario):
        self.sc = scenario
        self.rng = random.Random(scenario.seed)
        self.start = Epoch.from_iso(scenario.start)
        self.queue: list = []
        self.counter = 0
        self.now = 0
        self.trace = SimTrace(scenario)
        self.events = self.trace.events

        vids = scenario.validator_ids()
        pids = scenario.provider_ids()
        keys = {a: KeyPair.from_seed("sim", str(scenario.seed), a) for a in vids + pids + ["u0"]}
        members = [PeerIdentity(v, (Role.ANALYST,), keys[v].public_key) for v in vids]
        members += [PeerIdentity(p, (Role.PROVIDER,), keys[p].public_key) for p in pids]
        members.append(PeerIdentity("u0", (Role.USER,), keys["u0"].public_key))
        params = ChainParams(f"sim-{scenario.name}", tuple(members), tuple(vids))
        self.genesis, _ = make_genesis(params, self.start)

        cfg = ConsensusConfig(timeout=scenario.timeout, gossip_interval=scenario.gossip_interval)
        self.peers: dict[str, Peer] = {}
        for v in vids:
            mode = scenario.byzantine.get(v)
            if mode == "silent":
                continue
            cls = EquivocatingPeer if mode == "equivocate" else Peer
            self.peers[v] = cls(v, keys[v], self.genesis, cfg)
        self.honest = [v for v in vids if v not in scenario.byzantine]
        self.trace.honest = self.honest
        self.trace.peers = self.peers

        self.truth: dict[int, OrbitalElements] = {}
        self.providers: dict[str, _Provider] = {}
        for p in pids:
            self.providers[p] = _Provider(p, keys[p], scenario.byzantine.get(p), [])
        for k in range(scenario.objects):
            oid = 10001 + k
            self.truth[oid] = _true_elements(self.rng)
            self.providers[pids[k % len(pids)]].objects.append(oid)
        for a in scenario.attacks:
            if a.type in ("spoof", "error"):
                if a.provider not in self.providers:
                    raise ScenarioError(f"attack names unknown provider {a.provider!r}")
                self.providers[a.provider].attacks.append(a)
        self.mitm = [a for a in scenario.attacks if a.type == "mitm"]
        self.mitm_done: set[tuple[int, str]] = set()
        self.end = round((scenario.duration + scenario.drain) * MICROS)

    # -- scheduling --------------------------------------------------------------------

    def _push(self, at: int, kind: str, *payload) -> None:
        self.counter += 1
        heapq.heappush(self.queue, (at, self.counter, kind, payload))

    def _emit(self, ev: str, **fields: Any) -> None:
        fields["ev"] = ev
        fields["t"] = self.now
        self.events.append(fields)

    def _transmit(self, src: str, dst: str, msg: Message) -> None:
        link = self.sc.link_for(src, dst)
        msg = self._maybe_mitm(src, dst, msg)
        base = {"from": src, "to": dst, "kind": msg.kind, "msg": msg.id}
        if self.rng.random() < link.drop:
            self._emit("send", fate="drop", **base)
            return
        at = self.now + link.sample(self.rng)
        self._emit("send", fate="deliver", at=at, **base)
        self._push(at, "deliver", dst, msg)
        if self.rng.random() < link.duplicate:
            at2 = self.now + link.sample(self.rng)
            self._emit("send", fate="duplicate", at=at2, **base)
            self._push(at2, "deliver", dst, msg)

    def _maybe_mitm(self, src: str, dst: str, msg: Message) -> Message:
        if msg.kind != "SubmitTx":
            return msg
        for i, a in enumerate(self.mitm):
            if a.src != src or (a.dst is not None and a.dst != dst):
                continue
            if self.now < round(a.at * MICROS) or (i, dst) in self.mitm_done:
                continue
            tx = msg.body
            if not isinstance(tx.payload, EphemerisUpdate):
                continue
            self.mitm_done.add((i, dst))
            entry = tx.payload.entry
            amount = a.factor * _tolerance(a.element)
            forged = dataclasses.replace(entry, elements=_perturb(entry.elements, a.element, amount))
            altered = dataclasses.replace(tx, payload=EphemerisUpdate(forged))
            out = Message(msg.kind, msg.sender, altered, msg.signature)
            self._emit("attack", type="mitm", src=src, dst=dst, object=entry.object_id,
                       epoch=entry.epoch.micros, element=a.element, factor=a.factor,
                       original=msg.id, altered=out.id)
            return out
        return msg

    def _dispatch(self, peer_id: str, outputs) -> None:
        for out in outputs:
            if isinstance(out, Send):
                targets = [out.to] if out.to is not None else [v for v in self.sc.validator_ids()
                                                               if v != peer_id]
                for dst in targets:
                    self._transmit(peer_id, dst, out.message)
            elif isinstance(out, Timer):
                self._push(out.at, "timeout", peer_id, out.timeout)
            elif isinstance(out, Committed):
                self._on_commit(peer_id, out)

    def _on_commit(self, peer_id: str, c: Committed) -> None:
        b = c.block
        self.trace.commits.setdefault(peer_id, {})[b.height] = b.digest.hex()
        rnd = b.endorsements[0].round if b.endorsements else None
        self._emit("commit", peer=peer_id, height=b.height, digest=b.digest.hex(), round=rnd,
                   txs=len(b.txs), state_hash=c.state_hash.hex())
        for tx, r in zip(b.txs, b.receipts):
            if r.status == "warning":
                self._emit("warning", peer=peer_id, height=b.height, object=tx.payload.entry.object_id,
                           epoch=tx.payload.entry.epoch.micros, provider=tx.signer,
                           warning_id=r.warning_id, reason=r.detail)
            elif r.status == "rejected":
                self._emit("rejected_tx", peer=peer_id, height=b.height, signer=tx.signer,
                           seq=tx.seq, reason=r.detail)
        if peer_id in self.honest:
            for prov in self.providers.values():
                if prov.in_flight is None:
                    continue
                tx = prov.in_flight[0]
                if any(t.signer == tx.signer and t.seq == tx.seq for t in b.txs):
                    prov.in_flight = None
                    self._push(self.now, "provider_next", prov.pid)

    # -- providers -----------------------------------------------------------------------

    def _provider_slot(self, pid: str) -> None:
        prov = self.providers[pid]
        epoch = Epoch(self.start.micros + self.now)
        for oid in prov.objects:
            true = propagate(self.truth[oid], self.start, epoch)
            label, elements = "honest", true
            if prov.mode == "spoof" and oid in prov.established:
                amount = self.sc.spoof_factor * _tolerance(self.sc.spoof_element)
                label, elements = "spoof", _perturb(true, self.sc.spoof_element, amount)
            for a in prov.attacks:
                if (a.object is None or a.object == oid) and round(a.at * MICROS) <= self.now \
                        and not getattr(a, "_used", False) and oid in prov.established:
                    object.__setattr__(a, "_used", True)
                    label, elements = a.type, _perturb(true, a.element, a.factor * _tolerance(a.element))
                    break
            prov.established.add(oid)
            prov.queue.append((oid, epoch, elements, label))
        if self.now + round(self.sc.update_interval * MICROS) <= round(self.sc.duration * MICROS):
            self._push(self.now + round(self.sc.update_interval * MICROS), "provider_slot", pid)
        self._provider_next(pid)

    def _provider_next(self, pid: str) -> None:
        prov = self.providers[pid]
        if prov.in_flight is not None or not prov.queue:
            return
        oid, epoch, elements, label = prov.queue.pop(0)
        entry = EphemerisEntry(oid, epoch, elements, pid, Epoch(self.start.micros + self.now))
        entry = entry.signed(prov.keys)
        prov.seq += 1
        tx = Transaction(EphemerisUpdate(entry), pid, prov.seq).signed(prov.keys)
        msg = sign_message("SubmitTx", pid, tx, prov.keys)
        prov.in_flight = (tx, msg, label, self.now)
        if label != "honest":
            record = {"object": oid, "epoch": epoch.micros, "provider": pid, "label": label}
            self.trace.injected.append(record)
            self._emit("attack", type=label, **record)
        self._emit("submit", provider=pid, object=oid, epoch=epoch.micros, seq=prov.seq, label=label)
        self._send_submission(prov)

    def _send_submission(self, prov: _Provider) -> None:
        msg = prov.in_flight[1]
        for v in self.sc.validator_ids():
            self._transmit(prov.pid, v, msg)
        self._push(self.now + round(self.sc.resend_after * MICROS), "provider_resend",
                   prov.pid, prov.in_flight[0].seq)

    def _provider_resend(self, pid: str, seq: int) -> None:
        prov = self.providers[pid]
        if prov.in_flight is not None and prov.in_flight[0].seq == seq:
            self._emit("resend", provider=pid, seq=seq)
            self._send_submission(prov)

    # -- main loop -------------------------------------------------------------------------

    def run(self) -> SimTrace:
        sc = self.sc
        self._emit("scenario", **sc.to_dict())
        gossip = round(sc.gossip_interval * MICROS)
        for i, v in enumerate(sorted(self.peers)):
            self._push(gossip + i, "tick", v)
        for j, p in enumerate(sorted(self.providers)):
            if self.providers[p].objects:
                self._push(round(1.0 * MICROS) + j * 1000, "provider_slot", p)

        while self.queue:
            at, _, kind, payload = heapq.heappop(self.queue)
            if at > self.end:
                break
            self.now = at
            if kind == "deliver":
                dst, msg = payload
                peer = self.peers.get(dst)
                if peer is None:
                    continue
                before = peer.rejected
                outputs = peer.step(self.now, [msg])
                if peer.rejected != before:
                    self._emit("reject", peer=dst, kind=msg.kind, msg=msg.id, sender=msg.sender)
                self._dispatch(dst, outputs)
            elif kind == "timeout":
                peer_id, t = payload
                self._dispatch(peer_id, self.peers[peer_id].step(self.now, [timeout_message(peer_id, t)]))
            elif kind == "tick":
                (peer_id,) = payload
                self._dispatch(peer_id, self.peers[peer_id].tick(self.now))
                self._push(self.now + gossip, "tick", peer_id)
            elif kind == "provider_slot":
                self._provider_slot(*payload)
            elif kind == "provider_next":
                self._provider_next(*payload)
            elif kind == "provider_resend":
                self._provider_resend(*payload)
        self.now = self.end
        return self._finish()

    def _finish(self) -> SimTrace:
        tr = self.trace
        for v in sorted(self.peers):
            peer = self.peers[v]
            sh = peer.state.state_hash().hex()
            tr.final_state_hashes[v] = sh
            tr.final_heights[v] = peer.chain.height
            self._emit("final", peer=v, honest=v in self.honest, height=peer.chain.height,
                       state_hash=sh, flags=[[h, s] for h, s in peer.flags],
                       warnings=len(peer.state.warnings), rejected=peer.rejected)
        honest_states = [self.peers[v].state for v in self.honest]
        caught = 0
        leaked = 0
        for rec in tr.injected:
            ep = Epoch(rec["epoch"])
            for st in honest_states:
                in_warnings = any(w.object_id == rec["object"] and w.entry.epoch == ep
                                  for w in st.warnings.values())
                in_history = any(h.epoch == ep for h in st.history(rec["object"]))
                caught += in_warnings and not in_history
                leaked += in_history
        self._emit(
            "summary",
            honest=self.honest,
            safety_violations=tr.safety_violations(),
            replicated=tr.replicated() if self.honest else True,
            heights=dict(sorted(tr.final_heights.items())),
            injected=len(tr.injected),
            injected_caught_everywhere=caught == len(tr.injected) * len(honest_states),
            injected_in_history=leaked,
            warnings={v: len(self.peers[v].state.warnings) for v in self.honest},
        )
        return tr


def run_simulation(scenario: SimScenario) -> SimTrace:
    return Simulator(scenario).run()
