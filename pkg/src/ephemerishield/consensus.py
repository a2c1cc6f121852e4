"""Quorum-endorsed block ordering among a static committee.

The protocol is a rotating-leader, two-phase vote with locking, in the
style of Tendermint:

* the proposer of (height h, round r) is ``committee[(h + r) mod n]``;
* peers re-execute the proposed block and prevote its digest if valid
  (nil otherwise); a quorum of prevotes for a digest locks it and triggers
  a precommit; a quorum of precommits for one digest and one round is the
  commit certificate stored in the block;
* each phase has a timeout (``timeout`` virtual seconds) after which the
  peer votes nil or moves to round r + 1, which hands the proposal to the
  next committee member;
* a proposer that signs two different blocks for the same round is flagged
  and its proposals for that height are discarded.

Quorum is ``floor(2n/3) + 1``. Peers do nothing while there is nothing to
order, so the chain only grows when transactions arrive.

A :class:`Peer` never touches a clock or a socket: :func:`run_round` feeds
it a batch of messages plus the current time and collects what it wants to
send, which keeps it deterministic under the simulator.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Union

from . import crypto
from .elements import Epoch
from .encoding import EncodingError, decode, encode, register
from .ledger import (
    Block,
    BlockError,
    CatalogState,
    Chain,
    ChainParams,
    Endorsement,
    SnapshotMarker,
    Transaction,
    build_block,
    check_block,
    endorsement_bytes,
    genesis_state,
    quorum_size,
    verify_certificate,
)

MAX_MESSAGE_BYTES = 1 << 20
MAX_BLOCK_TXS = 256
MAX_SYNC_BLOCKS = 32
MICROS = 1_000_000
NIL = b""


# -- wire types ---------------------------------------------------------------------

@register("Proposal")
@dataclass(frozen=True)
class Proposal:
    height: int
    round: int
    valid_round: int
    block: Block
    signature: bytes        # proposer's signature over proposal_bytes


@register("Vote")
@dataclass(frozen=True)
class Vote:
    phase: str              # prevote | precommit
    height: int
    round: int
    digest: bytes           # NIL for a nil vote
    signature: bytes
    proposal_signature: bytes = b""   # proposer's signature over the voted digest


@register("Status")
@dataclass(frozen=True)
class Status:
    height: int             # last committed height of the sender
    round: int


@register("Timeout")
@dataclass(frozen=True)
class Timeout:
    step: str
    height: int
    round: int


Body = Union[Transaction, Proposal, Vote, Block, Status, tuple, Timeout]

KINDS = ("SubmitTx", "Propose", "Endorse", "Commit", "StateRequest", "StateResponse", "Timeout")


@register("Message")
@dataclass(frozen=True)
class Message:
    kind: str
    sender: str
    body: Body
    signature: bytes = b""

    def signing_bytes(self) -> bytes:
        return encode(("Wire", self.kind, self.sender, self.body))

    @property
    def id(self) -> str:
        return hashlib.sha256(encode(self)).hexdigest()[:16]


def sign_message(kind: str, sender: str, body: Body, keys: crypto.KeyPair) -> Message:
    msg = Message(kind, sender, body)
    return Message(kind, sender, body, keys.sign(msg.signing_bytes()))


def proposal_bytes(height: int, round: int, digest: bytes) -> bytes:
    return encode(("Proposal", height, round, digest))


def prevote_bytes(height: int, round: int, digest: bytes) -> bytes:
    return encode(("Prevote", height, round, digest))


def encode_message(msg: Message) -> bytes:
    raw = encode(msg)
    if len(raw) > MAX_MESSAGE_BYTES:
        raise ValueError("message exceeds size cap")
    return raw


def decode_message(raw: bytes) -> Message:
    """Strict wire decoding; raises ``ValueError`` on anything malformed."""
    if len(raw) > MAX_MESSAGE_BYTES:
        raise ValueError("message exceeds size cap")
    msg = decode(raw)
    if not isinstance(msg, Message) or msg.kind not in KINDS or msg.kind == "Timeout":
        raise EncodingError("not a wire message")
    return msg


@dataclass(frozen=True)
class Send:
    to: Optional[str]       # None broadcasts to the rest of the committee
    message: Message


@dataclass(frozen=True)
class Timer:
    at: int                 # virtual microseconds
    timeout: Timeout


@dataclass(frozen=True)
class Committed:
    """Notification emitted when the peer appends a block."""

    block: Block
    state_hash: bytes


Output = Union[Send, Timer, Committed]


@dataclass(frozen=True)
class ConsensusConfig:
    timeout: float = 5.0            # seconds, per phase
    gossip_interval: float = 1.0    # re-send own messages when stuck this long
    max_clock_drift: float = 30.0


# -- peer ------------------------------------------------------------------------------

@dataclass
class _Height:
    """Per-height protocol variables."""

    round: int = 0
    step: str = "propose"           # propose | prevote | precommit
    active: bool = False
    proposed: set = field(default_factory=set)           # rounds we proposed in
    proposals: dict = field(default_factory=dict)        # round -> Proposal
    claims: dict = field(default_factory=dict)           # round -> digest signed by proposer
    equivocators: dict = field(default_factory=dict)     # peer -> first round seen
    prevotes: dict = field(default_factory=dict)         # round -> {peer: Vote}
    precommits: dict = field(default_factory=dict)       # round -> {peer: Vote}
    locked: Optional[Block] = None
    locked_round: int = -1
    valid: Optional[Block] = None
    valid_round: int = -1
    fired: set = field(default_factory=set)              # one-shot rule guards
    sent: dict = field(default_factory=dict)             # (kind, round) -> Message
    last_progress: int = 0


class Peer:
    def __init__(self, peer_id: str, keys: crypto.KeyPair, genesis: Block,
                 config: ConsensusConfig = ConsensusConfig()):
        self.id = peer_id
        self.keys = keys
        self.config = config
        self.chain = Chain(genesis)
        self.state: CatalogState = genesis_state(genesis)
        self.params: ChainParams = self.state.params
        self.committee: tuple[str, ...] = self.params.committee
        if peer_id not in self.committee:
            raise ValueError(f"{peer_id!r} is not a committee member")
        self.keyring = {m.peer_id: m.public_key for m in self.params.members}
        self.n = len(self.committee)
        self.quorum = quorum_size(self.n)
        self.skip_threshold = self.n - self.quorum + 1
        self.mempool: dict[bytes, Transaction] = {}
        self.now = 0
        self.clock_base = genesis.timestamp.micros   # virtual time 0 is the genesis instant
        self.h = _Height()
        self.future: list[Message] = []         # messages for later heights
        self.flags: list[tuple[int, str]] = []  # (height, peer) misbehaviour log
        self.rejected = 0
        self._valid_cache: dict[bytes, bool] = {}
        self._seq = 0
        self._out: list[Output] = []

    def restore(self, chain: Chain, state: CatalogState) -> None:
        """Resume from a verified chain whose tip state is ``state``."""
        if chain.genesis.digest != self.chain.genesis.digest:
            raise ValueError("chain belongs to a different genesis")
        self.chain = chain
        self.state = state
        self.mempool.clear()
        self.future = []
        self._valid_cache.clear()
        self.h = _Height()

    # -- helpers -------------------------------------------------------------------

    @property
    def height(self) -> int:
        """Height currently being decided."""
        return self.chain.height + 1

    def proposer(self, height: int, round: int) -> str:
        return self.committee[(height + round) % self.n]

    def _send(self, kind: str, body: Body, to: Optional[str] = None) -> Message:
        msg = sign_message(kind, self.id, body, self.keys)
        self._out.append(Send(to, msg))
        return msg

    def _timer(self, step: str, delay: float) -> None:
        self._out.append(Timer(self.now + round(delay * MICROS),
                               Timeout(step, self.height, self.h.round)))

    def _progress(self) -> None:
        self.h.last_progress = self.now

    def next_seq(self) -> int:
        self._seq = max(self._seq, self.state.nonces.get(self.id, 0)) + 1
        return self._seq

    # -- entry point ---------------------------------------------------------------

    def step(self, now: int, inbox: list[Message]) -> list[Output]:
        self.now = now
        self._out = []
        for msg in inbox:
            self._receive(msg)
        return self._out

    def tick(self, now: int) -> list[Output]:
        """Periodic gossip: heartbeat, plus re-sending own votes when stuck."""
        self.now = now
        self._out = []
        self._send("StateRequest", Status(self.chain.height, self.h.round))
        stuck = now - self.h.last_progress >= round(self.config.gossip_interval * MICROS)
        if self.h.active and stuck:
            for (_, r), msg in sorted(self.h.sent.items(), key=lambda kv: (kv[0][1], kv[0][0])):
                if r == self.h.round or msg.kind == "Propose":
                    self._out.append(Send(None, msg))
            for key in sorted(self.mempool):
                self._send("SubmitTx", self.mempool[key])
        return self._out

    def _authentic(self, msg: Message) -> bool:
        if msg.kind == "Timeout":
            return msg.sender == self.id
        key = self.keyring.get(msg.sender)
        if key is None:
            return False
        if msg.kind != "SubmitTx" and msg.sender not in self.committee:
            return False
        return crypto.verify(key, msg.signing_bytes(), msg.signature)

    def _receive(self, msg: Message) -> None:
        if not self._authentic(msg):
            self.rejected += 1
            return
        handler = {
            "SubmitTx": self._on_tx,
            "Propose": self._on_proposal,
            "Endorse": self._on_vote,
            "Commit": self._on_commit,
            "StateRequest": self._on_status,
            "StateResponse": self._on_sync,
            "Timeout": self._on_timeout,
        }[msg.kind]
        try:
            handler(msg)
        except BlockError:
            raise
        except (TypeError, AttributeError, ValueError):
            # malformed body from a committee member; ignore it
            self.rejected += 1

    # -- transactions ----------------------------------------------------------------

    def submit(self, tx: Transaction) -> None:
        """Add a locally originated transaction and gossip it."""
        if self._admit(tx):
            self._send("SubmitTx", tx)

    def _admit(self, tx: Transaction) -> bool:
        if not isinstance(tx, Transaction):
            raise TypeError("SubmitTx body must be a transaction")
        if tx.seq <= self.state.nonces.get(tx.signer, 0):
            return False
        key = hashlib.sha256(encode(tx)).digest()
        if key in self.mempool:
            return False
        self.mempool[key] = tx
        self._activate()
        return True

    def _on_tx(self, msg: Message) -> None:
        self._admit(msg.body)

    def _activate(self) -> None:
        h = self.h
        if h.active:
            return
        h.active = True
        self._progress()
        if h.step == "propose":
            self._start_round(h.round)

    def _pending(self) -> list[Transaction]:
        txs = sorted(self.mempool.values(), key=Transaction.sort_key)
        snap = [t for t in txs if isinstance(t.payload, SnapshotMarker)]
        rest = [t for t in txs if not isinstance(t.payload, SnapshotMarker)]
        # a marker must lead its block and attest the current state
        snap = [t for t in snap if t.payload.state_hash == self.state.state_hash()][:1]
        return (snap + rest)[:MAX_BLOCK_TXS]

    # -- rounds ------------------------------------------------------------------------

    def _start_round(self, r: int) -> None:
        h = self.h
        h.round = r
        h.step = "propose"
        self._progress()
        if self.proposer(self.height, r) == self.id:
            self._propose()
        self._timer("propose", self.config.timeout)

    def _propose(self) -> None:
        h = self.h
        if h.round in h.proposed:
            return
        if h.valid is not None:
            block, vr = h.valid, h.valid_round
        else:
            txs = self._pending()
            if not txs:
                return
            ts = max(Epoch(self.clock_base + self.now), self.chain.tip.timestamp)
            block, _ = build_block(self.state, txs, self.chain.tip.digest, self.height, self.id, ts)
            vr = -1
        h.proposed.add(h.round)
        self._broadcast_proposal(block, vr)

    def _broadcast_proposal(self, block: Block, valid_round: int) -> None:
        h = self.h
        sig = self.keys.sign(proposal_bytes(self.height, h.round, block.digest))
        prop = Proposal(self.height, h.round, valid_round, block, sig)
        h.sent[("Propose", h.round)] = self._send("Propose", prop)
        self._on_proposal_body(prop)

    def _valid(self, block: Block) -> bool:
        ok = self._valid_cache.get(block.digest)
        if ok is None:
            ok = False
            if block.height == self.height and not block.endorsements \
                    and block.timestamp.micros <= self.clock_base + self.now \
                    + self.config.max_clock_drift * MICROS:
                try:
                    reason, _ = check_block(self.state, block, self.chain.tip.digest)
                except (BlockError, ValueError, TypeError):
                    reason = "malformed"
                ok = reason is None
            self._valid_cache[block.digest] = ok
        return ok

    def _on_proposal(self, msg: Message) -> None:
        prop = msg.body
        if not isinstance(prop, Proposal) or msg.sender != self.proposer(prop.height, prop.round):
            return
        self._on_proposal_body(prop)

    def _on_proposal_body(self, prop: Proposal) -> None:
        if prop.height > self.height:
            self._defer(prop)
            return
        if prop.height < self.height:
            return
        h = self.h
        proposer = self.proposer(prop.height, prop.round)
        if not crypto.verify(self.keyring[proposer],
                             proposal_bytes(prop.height, prop.round, prop.block.digest),
                             prop.signature):
            return
        if not self._note_proposal(proposer, prop.round, prop.block.digest, prop.signature):
            return
        if prop.round not in h.proposals:
            h.proposals[prop.round] = prop
        self._activate()
        self._evaluate()

    def _note_proposal(self, proposer: str, r: int, digest: bytes, signature: bytes) -> bool:
        """Record a signed (round, digest) claim; False once the proposer equivocated."""
        h = self.h
        if proposer in h.equivocators:
            return False
        known = h.claims.setdefault(r, digest)
        if known != digest:
            h.equivocators[proposer] = r
            self.flags.append((self.height, proposer))
            # discard every proposal of that peer at this height
            for rr in [rr for rr, p in h.proposals.items() if self.proposer(self.height, rr) == proposer]:
                del h.proposals[rr]
            if h.step == "propose" and self.proposer(self.height, h.round) == proposer:
                self._prevote(NIL)
            return False
        return True

    def _defer(self, item) -> None:
        if len(self.future) < 4096:
            self.future.append(item)

    # -- votes -----------------------------------------------------------------------

    def _prevote(self, digest: bytes) -> None:
        h = self.h
        sig = self.keys.sign(prevote_bytes(self.height, h.round, digest))
        psig = b""
        prop = h.proposals.get(h.round)
        if digest != NIL and prop is not None and prop.block.digest == digest:
            psig = prop.signature
        vote = Vote("prevote", self.height, h.round, digest, sig, psig)
        h.step = "prevote"
        self._progress()
        h.sent[("prevote", h.round)] = self._send("Endorse", vote)
        self._record_vote(self.id, vote)

    def _precommit(self, digest: bytes) -> None:
        h = self.h
        sig = self.keys.sign(endorsement_bytes(self.height, h.round, digest))
        vote = Vote("precommit", self.height, h.round, digest, sig)
        h.step = "precommit"
        self._progress()
        h.sent[("precommit", h.round)] = self._send("Endorse", vote)
        self._record_vote(self.id, vote)

    def _on_vote(self, msg: Message) -> None:
        vote = msg.body
        if not isinstance(vote, Vote) or vote.phase not in ("prevote", "precommit"):
            return
        if vote.height > self.height:
            self._defer(msg)
            return
        if vote.height < self.height:
            return
        signed = prevote_bytes if vote.phase == "prevote" else endorsement_bytes
        if not crypto.verify(self.keyring[msg.sender], signed(vote.height, vote.round, vote.digest),
                             vote.signature):
            return
        if vote.proposal_signature and vote.digest != NIL:
            proposer = self.proposer(vote.height, vote.round)
            if crypto.verify(self.keyring[proposer],
                             proposal_bytes(vote.height, vote.round, vote.digest),
                             vote.proposal_signature):
                self._note_proposal(proposer, vote.round, vote.digest, vote.proposal_signature)
        self._record_vote(msg.sender, vote)
        self._activate()
        self._evaluate()

    def _record_vote(self, sender: str, vote: Vote) -> None:
        book = self.h.prevotes if vote.phase == "prevote" else self.h.precommits
        book.setdefault(vote.round, {}).setdefault(sender, vote)

    @staticmethod
    def _count(votes: dict, digest: Optional[bytes] = None) -> int:
        if digest is None:
            return len(votes)
        return sum(1 for v in votes.values() if v.digest == digest)

    def _evaluate(self) -> None:
        """Apply the protocol's upon-rules until none fires."""
        while self._evaluate_once():
            pass

    def _evaluate_once(self) -> bool:
        h = self.h
        r = h.round
        prop = h.proposals.get(r)

        # decide: any round with a proposal and a precommit quorum for it
        for rr in sorted(h.precommits):
            p = h.proposals.get(rr)
            votes = h.precommits[rr]
            if p is not None and self._count(votes, p.block.digest) >= self.quorum and self._valid(p.block):
                ends = [Endorsement(pid, rr, v.signature) for pid, v in sorted(votes.items())
                        if v.digest == p.block.digest]
                self._commit(p.block.with_endorsements(ends))
                return True

        # proposal in the propose step
        if prop is not None and h.step == "propose":
            v = prop.block
            if prop.valid_round == -1:
                ok = self._valid(v) and (h.locked_round == -1 or h.locked == v)
                self._prevote(v.digest if ok else NIL)
                return True
            vr = prop.valid_round
            if 0 <= vr < r and self._count(h.prevotes.get(vr, {}), v.digest) >= self.quorum:
                ok = self._valid(v) and (h.locked_round <= vr or h.locked == v)
                self._prevote(v.digest if ok else NIL)
                return True

        prevotes = h.prevotes.get(r, {})
        if h.step == "prevote" and self._count(prevotes) >= self.quorum and ("pv_timer", r) not in h.fired:
            h.fired.add(("pv_timer", r))
            self._timer("prevote", self.config.timeout)

        if prop is not None and h.step in ("prevote", "precommit") and ("polka", r) not in h.fired \
                and self._count(prevotes, prop.block.digest) >= self.quorum and self._valid(prop.block):
            h.fired.add(("polka", r))
            if h.step == "prevote":
                h.locked, h.locked_round = prop.block, r
                self._precommit(prop.block.digest)
            h.valid, h.valid_round = prop.block, r
            return True

        if h.step == "prevote" and self._count(prevotes, NIL) >= self.quorum:
            self._precommit(NIL)
            return True

        precommits = h.precommits.get(r, {})
        if self._count(precommits) >= self.quorum and ("pc_timer", r) not in h.fired:
            h.fired.add(("pc_timer", r))
            self._timer("precommit", self.config.timeout)

        # catch up with a later round seen from enough distinct peers
        ahead: dict[str, int] = {}
        for book in (h.prevotes, h.precommits):
            for rr, votes in book.items():
                if rr > r:
                    for pid in votes:
                        ahead[pid] = max(ahead.get(pid, 0), rr)
        if len(ahead) >= self.skip_threshold:
            target = sorted(ahead.values())[-self.skip_threshold]
            if target > r:
                self._start_round(target)
                return True
        return False

    def _on_timeout(self, msg: Message) -> None:
        t = msg.body
        h = self.h
        if t.height != self.height or t.round != h.round:
            return
        if t.step == "propose" and h.step == "propose":
            if not h.active:
                return
            self._prevote(NIL)
        elif t.step == "prevote" and h.step == "prevote":
            self._precommit(NIL)
        elif t.step == "precommit":
            self._start_round(h.round + 1)
        else:
            return
        self._evaluate()

    # -- commits and catch-up -------------------------------------------------------

    def _commit(self, block: Block) -> None:
        reason, new_state = check_block(self.state, block, self.chain.tip.digest)
        if reason is not None:
            raise BlockError(f"{self.id}: cannot apply decided block: {reason}")
        self._append(block, new_state)
        self._send("Commit", block)

    def _append(self, block: Block, new_state: CatalogState) -> None:
        self.chain.blocks.append(block)
        self.state = new_state
        included = {hashlib.sha256(encode(tx)).digest() for tx in block.txs}
        current = None
        for key in sorted(self.mempool):
            tx = self.mempool[key]
            stale_marker = False
            if isinstance(tx.payload, SnapshotMarker):
                current = current or self.state.state_hash()
                stale_marker = tx.payload.state_hash != current
            if key in included or stale_marker or tx.seq <= self.state.nonces.get(tx.signer, 0):
                del self.mempool[key]
        self._valid_cache.clear()
        self.h = _Height()
        self._progress()
        self._out.append(Committed(block, new_state.state_hash()))
        if self.mempool:
            self._activate()
        pending, self.future = self.future, []
        for item in pending:
            if isinstance(item, Proposal):
                self._on_proposal_body(item)
            elif isinstance(item, Message):
                self._receive(item)

    def _accept_certified(self, block: Block) -> bool:
        if block.height != self.height:
            return False
        if verify_certificate(block, self.params) is not None:
            return False
        reason, new_state = check_block(self.state, block, self.chain.tip.digest)
        if reason is not None:
            return False
        self._append(block, new_state)
        return True

    def _on_commit(self, msg: Message) -> None:
        block = msg.body
        if not isinstance(block, Block):
            return
        if block.height == self.height:
            self._accept_certified(block)
        elif block.height > self.height:
            self._send("StateRequest", Status(self.chain.height, self.h.round), to=msg.sender)

    def _on_status(self, msg: Message) -> None:
        status = msg.body
        if not isinstance(status, Status):
            return
        if status.height < self.chain.height:
            blocks = []
            size = 0
            for hh in range(status.height + 1, self.chain.height + 1):
                b = self.chain.block(hh)
                if b is None:
                    break
                size += len(encode(b))
                if len(blocks) >= MAX_SYNC_BLOCKS or size > MAX_MESSAGE_BYTES // 2:
                    break
                blocks.append(b)
            if blocks:
                self._send("StateResponse", tuple(blocks), to=msg.sender)

    def _on_sync(self, msg: Message) -> None:
        blocks = msg.body
        if not isinstance(blocks, tuple):
            return
        for block in blocks:
            if isinstance(block, Block) and block.height == self.height:
                if not self._accept_certified(block):
                    break


# -- functional interface ---------------------------------------------------------------

def run_round(peer: Peer, inbox: list[Message], now: int) -> tuple[Peer, list[Output]]:
    """Deliver ``inbox`` at virtual time ``now`` (microseconds).

    The peer object is updated in place and returned for convenience.
    """
    return peer, peer.step(now, inbox)


def timeout_message(peer_id: str, timeout: Timeout) -> Message:
    return Message("Timeout", peer_id, timeout)
