"""Permissioned ledger: catalog state machine, hash-chained blocks, storage."""

from .chain import (
    ZERO_HASH,
    Block,
    BlockError,
    Chain,
    Endorsement,
    PruneRefused,
    VerifyResult,
    apply_block,
    build_block,
    check_block,
    endorsement_bytes,
    execute,
    genesis_state,
    make_genesis,
    prune,
    replay,
    snapshot,
    verify,
    verify_block,
    verify_certificate,
    verify_chain,
)
from .state import (
    CatalogState,
    ChainParams,
    EphemerisUpdate,
    Lookup,
    MembershipChange,
    OperatorOverride,
    PeerIdentity,
    Receipt,
    Role,
    SnapshotMarker,
    StateImage,
    Transaction,
    WarningRecord,
    apply_transaction,
    quorum_size,
)
from .storage import StorageError, append_block, read_chain, write_chain

__all__ = [name for name in dir() if not name.startswith("_")]
