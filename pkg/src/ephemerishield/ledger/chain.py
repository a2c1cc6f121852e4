"""Blocks, endorsement certificates, chain verification and pruning."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

from .. import crypto
from ..elements import Epoch
from ..encoding import EncodingError, encode, register
from .state import (
    CatalogState,
    ChainParams,
    Receipt,
    SnapshotMarker,
    StateError,
    Transaction,
)

ZERO_HASH = bytes(32)


@register("Endorsement")
@dataclass(frozen=True)
class Endorsement:
    peer_id: str
    round: int
    signature: bytes


def endorsement_bytes(height: int, round: int, block_digest: bytes) -> bytes:
    return encode(("Endorse", height, round, block_digest))


@register("Block")
@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    timestamp: Epoch
    proposer: str
    txs: tuple[Transaction, ...]
    receipts: tuple[Receipt, ...]
    state_hash: bytes               # catalog state after applying this block
    endorsements: tuple[Endorsement, ...] = ()

    def header_bytes(self) -> bytes:
        return encode(("Block", self.height, self.prev_hash, self.timestamp, self.proposer,
                       self.txs, self.receipts, self.state_hash))

    @property
    def digest(self) -> bytes:
        d = self.__dict__.get("_digest")
        if d is None:
            d = hashlib.sha256(self.header_bytes()).digest()
            object.__setattr__(self, "_digest", d)
        return d

    def endorse(self, peer_id: str, round: int, keys: crypto.KeyPair) -> Endorsement:
        return Endorsement(peer_id, round, keys.sign(endorsement_bytes(self.height, round, self.digest)))

    def with_endorsements(self, endorsements: Iterable[Endorsement]) -> Block:
        ordered = tuple(sorted(endorsements, key=lambda e: e.peer_id))
        return replace(self, endorsements=ordered)

    @property
    def snapshot_marker(self) -> Optional[SnapshotMarker]:
        if self.txs and isinstance(self.txs[0].payload, SnapshotMarker) \
                and self.receipts and self.receipts[0].status == "applied":
            return self.txs[0].payload
        return None


@dataclass(frozen=True)
class VerifyResult:
    ok: bool
    height: Optional[int] = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok

    def as_dict(self) -> dict:
        return {"ok": self.ok, "height": self.height, "reason": self.reason}


class BlockError(ValueError):
    pass


def make_genesis(params: ChainParams, timestamp: Epoch) -> tuple[Block, CatalogState]:
    state = CatalogState()
    state.begin_block(0, timestamp)
    tx = Transaction(params, "", 0)
    receipt = state.apply_transaction(tx, 0)
    if receipt.status != "applied":
        raise BlockError(f"genesis rejected: {receipt.detail}")
    block = Block(0, ZERO_HASH, timestamp, "", (tx,), (receipt,), state.state_hash())
    return block, state


def genesis_state(genesis: Block) -> CatalogState:
    if genesis.height != 0 or genesis.prev_hash != ZERO_HASH or len(genesis.txs) != 1 \
            or not isinstance(genesis.txs[0].payload, ChainParams):
        raise BlockError("malformed genesis block")
    _, state = make_genesis(genesis.txs[0].payload, genesis.timestamp)
    if state.state_hash() != genesis.state_hash:
        raise BlockError("genesis state hash mismatch")
    return state


def execute(state: CatalogState, height: int, timestamp: Epoch,
            txs: Sequence[Transaction]) -> tuple[CatalogState, tuple[Receipt, ...]]:
    """Run ``txs`` against a copy of ``state``."""
    new = state.copy()
    try:
        new.begin_block(height, timestamp)
    except StateError as exc:
        raise BlockError(str(exc)) from exc
    receipts = tuple(new.apply_transaction(tx, i) for i, tx in enumerate(txs))
    return new, receipts


def build_block(state: CatalogState, txs: Sequence[Transaction], prev_hash: bytes,
                height: int, proposer: str, timestamp: Epoch) -> tuple[Block, CatalogState]:
    """Execute ``txs`` and package them into an unendorsed block."""
    new, receipts = execute(state, height, timestamp, txs)
    block = Block(height, prev_hash, timestamp, proposer, tuple(txs), receipts, new.state_hash())
    return block, new


def verify_certificate(block: Block, params: ChainParams) -> Optional[str]:
    """None if the endorsements form a valid quorum certificate, else a reason.

    Every endorsement present must be valid: a block carrying a forged
    endorsement is rejected even if enough valid ones remain.
    """
    if not block.endorsements:
        return "no endorsements"
    keys = {m.peer_id: m.public_key for m in params.members}
    committee = set(params.committee)
    rounds = {e.round for e in block.endorsements}
    if len(rounds) != 1:
        return "endorsements span several rounds"
    seen: set[str] = set()
    ids = [e.peer_id for e in block.endorsements]
    if ids != sorted(ids):
        return "endorsements not in canonical order"
    for e in block.endorsements:
        if e.peer_id not in committee:
            return f"endorsement from non-committee peer {e.peer_id!r}"
        if e.peer_id in seen:
            return f"duplicate endorsement from {e.peer_id!r}"
        seen.add(e.peer_id)
        if not crypto.verify(keys[e.peer_id], endorsement_bytes(block.height, e.round, block.digest),
                             e.signature):
            return f"bad endorsement signature from {e.peer_id!r}"
    if len(seen) < params.quorum:
        return f"{len(seen)} endorsements, quorum is {params.quorum}"
    return None


def check_block(state: CatalogState, block: Block, prev_hash: bytes) -> tuple[Optional[str], CatalogState]:
    """Re-execute an (unendorsed) block; returns (failure reason or None, new state)."""
    if block.height != state.height + 1:
        return f"height {block.height}, expected {state.height + 1}", state
    if block.prev_hash != prev_hash:
        return "prev_hash does not match previous block", state
    if state.params is not None and block.proposer not in state.params.committee:
        return f"proposer {block.proposer!r} is not in the committee", state
    if len(block.receipts) != len(block.txs):
        return "receipt count mismatch", state
    try:
        new, receipts = execute(state, block.height, block.timestamp, block.txs)
    except BlockError as exc:
        return str(exc), state
    for i, (got, want) in enumerate(zip(receipts, block.receipts)):
        if got != want:
            return f"receipt {i} differs on re-execution", state
    if new.state_hash() != block.state_hash:
        return "state hash differs on re-execution", state
    return None, new


def verify_block(block: Block, state: CatalogState, prev_hash: bytes) -> VerifyResult:
    reason, _ = check_block(state, block, prev_hash)
    if reason is None and state.params is not None:
        reason = verify_certificate(block, state.params)
    return VerifyResult(reason is None, block.height, reason or "")


def apply_block(state: CatalogState, block: Block, prev_hash: bytes,
                check_certificate: bool = True) -> CatalogState:
    reason, new = check_block(state, block, prev_hash)
    if reason is None and check_certificate:
        reason = verify_certificate(block, state.params)
    if reason is not None:
        raise BlockError(f"block {block.height}: {reason}")
    return new


# -- chains ---------------------------------------------------------------------

@dataclass
class Chain:
    """A genesis block, an optional snapshot base and the retained blocks.

    Without a snapshot ``blocks`` holds heights 1..tip. With a snapshot at
    height s, ``blocks`` starts at some height <= s; blocks up to s are kept
    for audit (hash links and certificates are checked) and replay resumes
    from ``snapshot_state`` after s.
    """

    genesis: Block
    blocks: list[Block] = field(default_factory=list)
    snapshot_state: Optional[CatalogState] = None

    @property
    def height(self) -> int:
        return self.blocks[-1].height if self.blocks else self.genesis.height

    @property
    def tip(self) -> Block:
        return self.blocks[-1] if self.blocks else self.genesis

    @property
    def first_height(self) -> int:
        return self.blocks[0].height if self.blocks else self.genesis.height + 1

    def block(self, height: int) -> Optional[Block]:
        if height == 0:
            return self.genesis
        i = height - self.first_height
        if 0 <= i < len(self.blocks):
            return self.blocks[i]
        return None

    def is_pruned(self, height: int) -> bool:
        return 0 < height < self.first_height

    def latest_snapshot_height(self) -> Optional[int]:
        for b in reversed(self.blocks):
            if b.snapshot_marker is not None:
                return b.height
        return None


def verify_chain(genesis: Block, blocks: Sequence[Block],
                 snapshot_state: Optional[CatalogState] = None) -> VerifyResult:
    """Check hash links, heights, certificates and re-execute every block.

    With ``snapshot_state`` (height s), blocks up to s are audited for
    links and certificates only, and must end at a block whose state hash
    and snapshot marker match the snapshot; replay continues after s.
    """
    try:
        state = genesis_state(genesis)
    except (BlockError, EncodingError, ValueError) as exc:
        return VerifyResult(False, 0, str(exc))
    params = state.params
    prev = genesis.digest
    i = 0
    if snapshot_state is not None:
        s = snapshot_state.height
        if snapshot_state.params != params:
            return VerifyResult(False, s, "snapshot parameters differ from genesis")
        pre = [b for b in blocks if b.height <= s]
        if not pre or pre[-1].height != s:
            return VerifyResult(False, s, "snapshot block missing")
        expected = pre[0].height
        for b in pre:
            if b.height != expected:
                return VerifyResult(False, expected, f"height {b.height}, expected {expected}")
            if b.height > pre[0].height and b.prev_hash != prev:
                return VerifyResult(False, b.height, "prev_hash does not match previous block")
            reason = verify_certificate(b, params)
            if reason:
                return VerifyResult(False, b.height, reason)
            prev = b.digest
            expected += 1
        top = pre[-1]
        if top.snapshot_marker is None:
            return VerifyResult(False, s, "snapshot block carries no snapshot marker")
        if snapshot_state.state_hash() != top.state_hash:
            return VerifyResult(False, s, "snapshot state hash mismatch")
        state = snapshot_state.copy()
        i = len(pre)
        if blocks[:i] != pre:
            return VerifyResult(False, s, "blocks out of order")
    for b in blocks[i:]:
        expected = state.height + 1
        if b.height != expected:
            return VerifyResult(False, expected, f"height {b.height}, expected {expected}")
        reason, new = check_block(state, b, prev)
        if reason is None:
            reason = verify_certificate(b, params)
        if reason is not None:
            return VerifyResult(False, b.height, reason)
        state = new
        prev = b.digest
    return VerifyResult(True, state.height, "")


def replay(chain: Chain) -> CatalogState:
    """Reconstruct the catalog state at the tip of ``chain``."""
    if chain.snapshot_state is not None:
        state = chain.snapshot_state.copy()
        prev = chain.block(state.height).digest
    else:
        state = genesis_state(chain.genesis)
        prev = chain.genesis.digest
    for b in chain.blocks:
        if b.height <= state.height:
            continue
        state = apply_block(state, b, prev)
        prev = b.digest
    return state


def verify(chain: Chain) -> VerifyResult:
    return verify_chain(chain.genesis, chain.blocks, chain.snapshot_state)


def snapshot(state: CatalogState, signer: str, seq: int, keys: crypto.KeyPair) -> Transaction:
    """A signed marker attesting ``state``; it must lead the next block."""
    return Transaction(SnapshotMarker(state.state_hash()), signer, seq).signed(keys)


class PruneRefused(RuntimeError):
    pass


def prune(chain: Chain, retention_seconds: Optional[float] = None) -> Chain:
    """Drop blocks older than the retention window that lie at or behind the
    latest snapshot marker.

    The window is measured back from the tip timestamp. The returned chain
    keeps the snapshot state so it can be verified on its own.
    """
    s = chain.latest_snapshot_height()
    if s is None:
        raise PruneRefused("no endorsed snapshot marker in the chain")
    state = chain.snapshot_state
    if state is None or state.height != s:
        state = _state_at(chain, s)
    if retention_seconds is None:
        retention_seconds = state.params.retention_seconds
    cutoff = chain.tip.timestamp.plus_seconds(-retention_seconds)
    # timestamps never decrease, so this keeps a contiguous suffix
    kept = [b for b in chain.blocks if b.height >= s or b.timestamp >= cutoff]
    if len(kept) == len(chain.blocks) and chain.snapshot_state is None:
        return chain
    return Chain(chain.genesis, kept, state)


def _state_at(chain: Chain, height: int) -> CatalogState:
    if chain.snapshot_state is not None and chain.snapshot_state.height <= height:
        state = chain.snapshot_state.copy()
        prev = chain.block(state.height).digest
    else:
        state = genesis_state(chain.genesis)
        prev = chain.genesis.digest
    for b in chain.blocks:
        if b.height <= state.height:
            continue
        if b.height > height:
            break
        state = apply_block(state, b, prev)
        prev = b.digest
    return state
