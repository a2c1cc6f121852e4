"""Replicated catalog state and the deterministic transaction state machine."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field, replace
from typing import Optional, Union

from .. import crypto
from ..constants import RETENTION_SECONDS
from ..elements import Epoch
from ..encoding import encode, register
from ..validation import (
    DEFAULT_VALIDATION,
    EphemerisEntry,
    HistoryEntry,
    ValidationConfig,
    ValidationOutcome,
    check_entry,
)


@register("Role")
class Role(enum.Enum):
    PROVIDER = "Provider"
    USER = "User"
    ANALYST = "Analyst"


@register("PeerIdentity")
@dataclass(frozen=True)
class PeerIdentity:
    peer_id: str
    roles: tuple[Role, ...]
    public_key: bytes

    def __post_init__(self):
        if not self.peer_id or len(self.peer_id) > 64:
            raise ValueError("peer_id must be 1..64 characters")
        if len(self.public_key) != 32:
            raise ValueError("public key must be 32 bytes")
        roles = tuple(sorted(set(self.roles), key=lambda r: r.value))
        object.__setattr__(self, "roles", roles)

    def has(self, role: Role) -> bool:
        return role in self.roles


# -- transaction payloads ------------------------------------------------------

@register("ChainParams")
@dataclass(frozen=True)
class ChainParams:
    """Genesis-only payload: identities, committee and validation rules."""

    chain_id: str
    members: tuple[PeerIdentity, ...]
    committee: tuple[str, ...]
    validation: ValidationConfig = DEFAULT_VALIDATION
    retention_seconds: float = float(RETENTION_SECONDS)
    warning_retention_seconds: float = float(RETENTION_SECONDS)

    def __post_init__(self):
        ids = [m.peer_id for m in self.members]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate peer_id in membership")
        if not self.committee or len(set(self.committee)) != len(self.committee):
            raise ValueError("committee must be a non-empty list of distinct peers")
        if not set(self.committee) <= set(ids):
            raise ValueError("every committee member must be a registered peer")

    @property
    def quorum(self) -> int:
        return quorum_size(len(self.committee))


def quorum_size(n: int) -> int:
    return (2 * n) // 3 + 1


@register("EphemerisUpdate")
@dataclass(frozen=True)
class EphemerisUpdate:
    entry: EphemerisEntry


@register("OperatorOverride")
@dataclass(frozen=True)
class OperatorOverride:
    """Re-admit the entry held by an open warning, bypassing the envelope."""

    object_id: int
    warning_id: int


@register("MembershipChange")
@dataclass(frozen=True)
class MembershipChange:
    peer: PeerIdentity
    action: str     # "add" or "revoke"

    def __post_init__(self):
        if self.action not in ("add", "revoke"):
            raise ValueError(f"unknown membership action {self.action!r}")


@register("SnapshotMarker")
@dataclass(frozen=True)
class SnapshotMarker:
    """Attests the state hash at the start of its block and trims history
    older than the retention window."""

    state_hash: bytes


Payload = Union[EphemerisUpdate, OperatorOverride, MembershipChange, SnapshotMarker, ChainParams]


@register("Transaction")
@dataclass(frozen=True)
class Transaction:
    payload: Payload
    signer: str
    seq: int
    signature: bytes = b""

    def signing_bytes(self) -> bytes:
        return encode(("Transaction", self.signer, self.seq, self.payload))

    def signed(self, keys: crypto.KeyPair) -> Transaction:
        return replace(self, signature=keys.sign(self.signing_bytes()))

    @property
    def kind(self) -> str:
        return type(self.payload).__name__

    def sort_key(self) -> tuple:
        return (self.signer, self.seq, self.signature)


@register("WarningRecord")
@dataclass(frozen=True)
class WarningRecord:
    warning_id: int
    object_id: int
    entry: EphemerisEntry
    outcome: ValidationOutcome
    height: int
    recorded_at: Epoch
    resolved: bool = False

    def as_dict(self) -> dict:
        return {
            "warning_id": self.warning_id,
            "object_id": self.object_id,
            "epoch": self.entry.epoch.isoformat(),
            "provider": self.entry.provider,
            "elements": self.entry.elements.as_dict(),
            "height": self.height,
            "recorded_at": self.recorded_at.isoformat(),
            "resolved": self.resolved,
            **self.outcome.as_dict(),
        }


@register("Receipt")
@dataclass(frozen=True)
class Receipt:
    status: str                 # applied | warning | rejected
    detail: str = ""
    outcome: Optional[ValidationOutcome] = None
    warning_id: Optional[int] = None


def _rejected(detail: str) -> Receipt:
    return Receipt("rejected", detail)


@register("StateImage")
@dataclass(frozen=True)
class StateImage:
    """Full canonical content of a :class:`CatalogState` (snapshot files)."""

    params: Optional[ChainParams]
    height: int
    timestamp: Optional[Epoch]
    pruned_before: Optional[Epoch]
    members: tuple[PeerIdentity, ...]
    nonces: tuple[tuple[str, int], ...]
    objects: tuple[tuple[int, tuple[HistoryEntry, ...]], ...]
    warnings: tuple[WarningRecord, ...]
    next_warning_id: int


@dataclass(frozen=True)
class Lookup:
    """Result of a history query at a specific epoch."""

    status: str                 # found | not_found | pruned
    entry: Optional[HistoryEntry] = None


class StateError(ValueError):
    pass


@dataclass
class CatalogState:
    params: Optional[ChainParams] = None
    height: int = -1
    timestamp: Optional[Epoch] = None
    pruned_before: Optional[Epoch] = None
    members: dict[str, PeerIdentity] = field(default_factory=dict)
    nonces: dict[str, int] = field(default_factory=dict)
    objects: dict[int, tuple[HistoryEntry, ...]] = field(default_factory=dict)
    warnings: dict[int, WarningRecord] = field(default_factory=dict)
    next_warning_id: int = 1
    _object_digests: dict[int, bytes] = field(default_factory=dict, repr=False, compare=False)
    _warnings_digest: Optional[bytes] = field(default=None, repr=False, compare=False)
    pre_block_hash: bytes = field(default=b"", repr=False, compare=False)

    # -- queries ---------------------------------------------------------------

    def history(self, object_id: int) -> tuple[HistoryEntry, ...]:
        return self.objects.get(object_id, ())

    def open_warnings(self, object_id: int | None = None) -> list[WarningRecord]:
        return [w for _, w in sorted(self.warnings.items())
                if not w.resolved and (object_id is None or w.object_id == object_id)]

    def lookup(self, object_id: int, epoch: Epoch) -> Lookup:
        for h in self.history(object_id):
            if h.epoch == epoch:
                return Lookup("found", h)
        if self.pruned_before is not None and epoch < self.pruned_before:
            return Lookup("pruned")
        return Lookup("not_found")

    # -- copying, hashing, images ------------------------------------------------

    def copy(self) -> CatalogState:
        return CatalogState(
            self.params, self.height, self.timestamp, self.pruned_before,
            dict(self.members), dict(self.nonces), dict(self.objects), dict(self.warnings),
            self.next_warning_id, dict(self._object_digests), self._warnings_digest,
            self.pre_block_hash,
        )

    def _object_digest(self, object_id: int) -> bytes:
        d = self._object_digests.get(object_id)
        if d is None:
            d = hashlib.sha256(encode((object_id, self.objects[object_id]))).digest()
            self._object_digests[object_id] = d
        return d

    def state_hash(self) -> bytes:
        if self._warnings_digest is None:
            self._warnings_digest = hashlib.sha256(
                encode(tuple(w for _, w in sorted(self.warnings.items())))).digest()
        h = hashlib.sha256()
        h.update(encode(("CatalogState", self.params, self.height, self.timestamp,
                         self.pruned_before,
                         tuple(m for _, m in sorted(self.members.items())),
                         tuple(sorted(self.nonces.items())),
                         self.next_warning_id, len(self.objects))))
        for oid in sorted(self.objects):
            h.update(self._object_digest(oid))
        h.update(self._warnings_digest)
        return h.digest()

    def image(self) -> StateImage:
        return StateImage(
            self.params, self.height, self.timestamp, self.pruned_before,
            tuple(m for _, m in sorted(self.members.items())),
            tuple(sorted(self.nonces.items())),
            tuple(sorted(self.objects.items())),
            tuple(w for _, w in sorted(self.warnings.items())),
            self.next_warning_id,
        )

    @classmethod
    def from_image(cls, image: StateImage) -> CatalogState:
        return cls(
            image.params, image.height, image.timestamp, image.pruned_before,
            {m.peer_id: m for m in image.members}, dict(image.nonces),
            {oid: tuple(h) for oid, h in image.objects},
            {w.warning_id: w for w in image.warnings}, image.next_warning_id,
        )

    # -- mutation ------------------------------------------------------------------

    def _set_history(self, object_id: int, history: tuple[HistoryEntry, ...]) -> None:
        self.objects[object_id] = history
        self._object_digests.pop(object_id, None)

    def _put_warning(self, w: WarningRecord) -> None:
        self.warnings[w.warning_id] = w
        self._warnings_digest = None

    def begin_block(self, height: int, timestamp: Epoch) -> None:
        if height != self.height + 1:
            raise StateError(f"expected height {self.height + 1}, got {height}")
        if self.timestamp is not None and timestamp < self.timestamp:
            raise StateError("block timestamp goes backwards")
        self.pre_block_hash = self.state_hash()
        self.height = height
        self.timestamp = timestamp

    def apply_transaction(self, tx: Transaction, index: int) -> Receipt:
        """Apply ``tx`` as the ``index``-th transaction of the current block.

        Rejected transactions leave the state untouched.
        """
        p = tx.payload
        if isinstance(p, ChainParams):
            if self.height != 0 or self.params is not None or index != 0:
                return _rejected("chain parameters are genesis-only")
            self.params = p
            self.members = {m.peer_id: m for m in p.members}
            return Receipt("applied", "genesis")
        if self.params is None:
            return _rejected("no chain parameters")

        signer = self.members.get(tx.signer)
        if signer is None:
            return _rejected("unknown signer")
        if not crypto.verify(signer.public_key, tx.signing_bytes(), tx.signature):
            return _rejected("bad signature")
        if tx.seq <= self.nonces.get(tx.signer, 0):
            return _rejected("stale seq")

        if isinstance(p, EphemerisUpdate):
            receipt = self._ephemeris_update(signer, p.entry)
        elif isinstance(p, OperatorOverride):
            receipt = self._override(signer, p)
        elif isinstance(p, MembershipChange):
            receipt = self._membership(p)
        elif isinstance(p, SnapshotMarker):
            receipt = self._snapshot(p, index)
        else:
            receipt = _rejected("unknown payload")
        if receipt.status != "rejected":
            self.nonces[tx.signer] = tx.seq
        return receipt

    def _ephemeris_update(self, signer: PeerIdentity, entry: EphemerisEntry) -> Receipt:
        if not signer.has(Role.PROVIDER):
            return _rejected("signer lacks Provider role")
        if entry.provider != signer.peer_id:
            return _rejected("entry provider differs from signer")
        if not entry.verify(signer.public_key):
            return _rejected("bad entry signature")
        outcome = check_entry(self, entry, self.params.validation)
        if outcome.accepted:
            self._set_history(entry.object_id, self.history(entry.object_id)
                              + (HistoryEntry(entry.epoch, entry.elements, entry.provider),))
            return Receipt("applied", outcome.reason.value, outcome)
        wid = self.next_warning_id
        self.next_warning_id += 1
        self._put_warning(WarningRecord(wid, entry.object_id, entry, outcome,
                                        self.height, self.timestamp))
        return Receipt("warning", outcome.reason.value, outcome, wid)

    def _override(self, signer: PeerIdentity, p: OperatorOverride) -> Receipt:
        if not signer.has(Role.USER):
            return _rejected("signer lacks User role")
        w = self.warnings.get(p.warning_id)
        if w is None or w.object_id != p.object_id:
            return _rejected("no such warning for object")
        if w.resolved:
            return _rejected("warning already resolved")
        entry = w.entry
        if not entry.elements.is_feasible():
            return _rejected("infeasible elements cannot be admitted")
        history = self.history(entry.object_id)
        if history and entry.epoch <= history[-1].epoch:
            return _rejected("non-monotonic epoch")
        self._set_history(entry.object_id,
                          history + (HistoryEntry(entry.epoch, entry.elements, entry.provider),))
        self._put_warning(replace(w, resolved=True))
        return Receipt("applied", "override", warning_id=w.warning_id)

    def _membership(self, p: MembershipChange) -> Receipt:
        pid = p.peer.peer_id
        if p.action == "add":
            if pid in self.members:
                return _rejected("peer already registered")
            self.members[pid] = p.peer
        else:
            if pid not in self.members:
                return _rejected("peer not registered")
            del self.members[pid]
        return Receipt("applied", p.action)

    def _snapshot(self, p: SnapshotMarker, index: int) -> Receipt:
        if index != 0:
            return _rejected("snapshot marker must lead its block")
        if p.state_hash != self.pre_block_hash:
            return _rejected("snapshot hash mismatch")
        self.trim(self.timestamp)
        return Receipt("applied", "snapshot")

    def trim(self, now: Epoch) -> None:
        """Drop history and warnings older than the retention windows.

        The latest accepted entry of every object is always kept so it can
        still serve as a prior.
        """
        cutoff = now.plus_seconds(-self.params.retention_seconds)
        for oid in sorted(self.objects):
            hist = self.objects[oid]
            kept = tuple(h for h in hist[:-1] if h.epoch >= cutoff) + hist[-1:]
            if len(kept) != len(hist):
                self._set_history(oid, kept)
        wcut = now.plus_seconds(-self.params.warning_retention_seconds)
        for wid in sorted(self.warnings):
            if self.warnings[wid].recorded_at < wcut:
                del self.warnings[wid]
                self._warnings_digest = None
        if self.pruned_before is None or cutoff > self.pruned_before:
            self.pruned_before = cutoff


def apply_transaction(state: CatalogState, tx: Transaction, index: int = 0) -> tuple[CatalogState, Receipt]:
    """Functional form: returns a new state and the receipt, ``state`` is untouched."""
    new = state.copy()
    return new, new.apply_transaction(tx, index)
