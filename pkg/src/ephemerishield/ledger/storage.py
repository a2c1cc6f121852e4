"""On-disk chain layout.

A data directory holds::

    MANIFEST                 plain text, one "key value" pair per line
    genesis.blk              canonical encoding of the genesis block
    blocks/0000000001.blk    segment files; each is a sequence of records
    blocks/0000001000.blk    (u32 big-endian length + canonical Block encoding)
    snapshot.bin             canonical StateImage of the snapshot base (optional)

Each segment file is named after the height of its first block; a new
segment starts at every multiple of ``segment_size`` (so after pruning the
first segment may be shorter). The manifest records the genesis
digest, which is the trust anchor for verification.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Iterator, Optional

from ..encoding import EncodingError, decode, encode
from .chain import Block, Chain
from .state import CatalogState, StateImage

FORMAT = "ephemerishield-chain 1"
SEGMENT_SIZE = 1000


class StorageError(ValueError):
    """Unreadable or inconsistent data directory; ``height`` locates the fault."""

    def __init__(self, message: str, height: Optional[int] = None):
        super().__init__(message)
        self.height = height


def segment_start(height: int, segment_size: int = SEGMENT_SIZE) -> int:
    return max(1, (height // segment_size) * segment_size)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def _record(block: Block) -> bytes:
    raw = encode(block)
    return struct.pack(">I", len(raw)) + raw


def write_manifest(root: Path, genesis: Block, snapshot_height: Optional[int]) -> None:
    lines = [
        FORMAT,
        f"genesis {genesis.digest.hex()}",
        f"segment_size {SEGMENT_SIZE}",
        f"snapshot_height {'-' if snapshot_height is None else snapshot_height}",
    ]
    _atomic_write(root / "MANIFEST", ("\n".join(lines) + "\n").encode())


def read_manifest(root: Path) -> dict[str, str]:
    try:
        text = (root / "MANIFEST").read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise StorageError(f"cannot read MANIFEST: {exc}") from exc
    lines = text.splitlines()
    if not lines or lines[0] != FORMAT:
        raise StorageError("unrecognised MANIFEST format")
    out = {}
    for line in lines[1:]:
        key, _, value = line.partition(" ")
        out[key] = value
    return out


def write_chain(root: str | os.PathLike, chain: Chain) -> None:
    """Write ``chain`` from scratch into ``root``."""
    root = Path(root)
    (root / "blocks").mkdir(parents=True, exist_ok=True)
    for old in (root / "blocks").glob("*.blk"):
        old.unlink()
    _atomic_write(root / "genesis.blk", encode(chain.genesis))
    segments: dict[int, tuple[int, bytearray]] = {}
    for b in chain.blocks:
        first, data = segments.setdefault(segment_start(b.height), (b.height, bytearray()))
        data.extend(_record(b))
    for first, data in segments.values():
        _atomic_write(root / "blocks" / f"{first:010d}.blk", bytes(data))
    snap = root / "snapshot.bin"
    if chain.snapshot_state is not None:
        _atomic_write(snap, encode(chain.snapshot_state.image()))
    elif snap.exists():
        snap.unlink()
    write_manifest(root, chain.genesis,
                   None if chain.snapshot_state is None else chain.snapshot_state.height)


def append_block(root: str | os.PathLike, block: Block) -> None:
    blocks_dir = Path(root) / "blocks"
    existing = sorted(blocks_dir.glob("*.blk"))
    if existing and segment_start(int(existing[-1].stem)) == segment_start(block.height):
        path = existing[-1]
    else:
        path = blocks_dir / f"{block.height:010d}.blk"
    with open(path, "ab") as f:
        f.write(_record(block))
        f.flush()
        os.fsync(f.fileno())


def _iter_records(data: bytes, first_height: int) -> Iterator[tuple[int, bytes]]:
    pos = 0
    height = first_height
    while pos < len(data):
        if pos + 4 > len(data):
            raise StorageError("truncated record header", height)
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        pos += 4
        if pos + length > len(data):
            raise StorageError("truncated record", height)
        yield height, data[pos:pos + length]
        pos += length
        height += 1


def read_chain(root: str | os.PathLike) -> Chain:
    """Load a data directory. Structural faults raise :class:`StorageError`;
    semantic checks are left to :func:`verify_chain`."""
    root = Path(root)
    manifest = read_manifest(root)
    try:
        genesis = decode((root / "genesis.blk").read_bytes())
    except (OSError, EncodingError) as exc:
        raise StorageError(f"unreadable genesis block: {exc}", 0) from exc
    if not isinstance(genesis, Block):
        raise StorageError("genesis.blk does not hold a block", 0)
    if manifest.get("genesis") != genesis.digest.hex():
        raise StorageError("genesis digest does not match MANIFEST", 0)

    snapshot_state = None
    snap_h = manifest.get("snapshot_height", "-")
    if snap_h != "-":
        if not snap_h.isdigit():
            raise StorageError(f"bad snapshot_height {snap_h!r} in MANIFEST")
        try:
            image = decode((root / "snapshot.bin").read_bytes())
        except (OSError, EncodingError) as exc:
            raise StorageError(f"unreadable snapshot: {exc}", int(snap_h)) from exc
        if not isinstance(image, StateImage) or str(image.height) != snap_h:
            raise StorageError("snapshot does not match MANIFEST", int(snap_h))
        snapshot_state = CatalogState.from_image(image)

    blocks: list[Block] = []
    for path in sorted((root / "blocks").glob("*.blk")):
        try:
            start = int(path.stem)
        except ValueError:
            raise StorageError(f"unexpected file {path.name}")
        for height, raw in _iter_records(path.read_bytes(), start):
            try:
                block = decode(raw)
            except EncodingError as exc:
                raise StorageError(f"undecodable block: {exc}", height) from exc
            if not isinstance(block, Block):
                raise StorageError("record is not a block", height)
            blocks.append(block)
    return Chain(genesis, blocks, snapshot_state)
