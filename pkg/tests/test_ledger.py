import random
import struct

import pytest

from chainkit import START, Network, flip_and_verify, leo, ten_block_chain, ten_day_chain
from ephemerishield.crypto import KeyPair
from ephemerishield.encoding import encode
from ephemerishield.ledger import (
    Chain,
    EphemerisUpdate,
    MembershipChange,
    OperatorOverride,
    PeerIdentity,
    PruneRefused,
    Role,
    SnapshotMarker,
    StorageError,
    Transaction,
    append_block,
    apply_transaction,
    prune,
    quorum_size,
    read_chain,
    replay,
    verify,
    verify_chain,
    write_chain,
)
from ephemerishield.ledger.chain import verify_certificate
from ephemerishield.propagation import propagate
from ephemerishield.validation import EphemerisEntry

DAY = 86400


@pytest.fixture(scope="module")
def ten():
    return ten_block_chain()


@pytest.mark.parametrize("n,q", [(1, 1), (2, 2), (3, 3), (4, 3), (5, 4), (7, 5), (10, 7)])
def test_quorum_size(n, q):
    assert quorum_size(n) == q


def test_ten_block_chain_verifies(ten):
    res = verify(ten.chain)
    assert res.ok and res.height == 10
    assert replay(ten.chain).state_hash() == ten.state.state_hash()


# -- transaction rules ---------------------------------------------------------------

def applied(net, tx):
    new, receipt = apply_transaction(net.state, tx)
    return receipt


def fresh(net):
    net.state.begin_block(net.state.height + 1, START.plus_seconds(60))
    return net


def test_apply_transaction_is_functional():
    net = fresh(Network())
    before = net.state.state_hash()
    tx = net.update(1, START.plus_seconds(30), leo(random.Random(1)))
    new, receipt = apply_transaction(net.state, tx)
    assert receipt.status == "applied" and receipt.detail == "FirstEntry"
    assert net.state.state_hash() == before and new.state_hash() != before
    assert new.nonces["prov"] == 1


def test_rejections():
    net = fresh(Network())
    oe = leo(random.Random(2))
    t = START.plus_seconds(30)
    stranger = KeyPair.from_seed("stranger")
    tx = Transaction(net.update(1, t, oe).payload, "ghost", 1).signed(stranger)
    assert applied(net, tx).detail == "unknown signer"
    good = net.update(1, t, oe)
    forged = Transaction(good.payload, "prov", good.seq, stranger.sign(good.signing_bytes()))
    assert applied(net, forged).detail == "bad signature"
    # the user has no Provider role
    assert applied(net, net.update(1, t, oe, provider="user")).detail == "signer lacks Provider role"
    # provider field must name the signer
    entry = net.entry(1, t, oe, provider="prov2")
    assert applied(net, net.tx(EphemerisUpdate(entry), "prov")).detail == \
        "entry provider differs from signer"


def test_sequence_numbers():
    net = fresh(Network())
    oe = leo(random.Random(3))
    t = START.plus_seconds(30)
    tx5 = Transaction(net.update(1, t, oe).payload, "prov", 5).signed(net.keys["prov"])
    new, r = apply_transaction(net.state, tx5)
    assert r.status == "applied" and new.nonces["prov"] == 5      # gaps allowed
    again = Transaction(tx5.payload, "prov", 5).signed(net.keys["prov"])
    assert new.apply_transaction(again, 0).detail == "stale seq"
    lower = Transaction(tx5.payload, "prov", 4).signed(net.keys["prov"])
    assert new.apply_transaction(lower, 0).detail == "stale seq"


def test_rejected_tx_leaves_state_and_nonce():
    net = fresh(Network())
    before = net.state.state_hash()
    bad = net.update(1, START, leo(random.Random(4)), provider="user")
    assert net.state.apply_transaction(bad, 0).status == "rejected"
    assert net.state.state_hash() == before and "user" not in net.state.nonces


def test_warning_and_override():
    net = Network()
    oe = leo(random.Random(5))
    t1, t2 = START.plus_seconds(600), START.plus_seconds(1200)
    net.commit([net.update(7, t1, oe)], t1)
    off = propagate(oe, t1, t2)
    off = off.replace(semi_major_axis_km=off.semi_major_axis_km + 50.0)
    block = net.commit([net.update(7, t2, off)], t2)
    r = block.receipts[0]
    assert r.status == "warning" and r.detail == "EnvelopeExceeded"
    wid = r.warning_id
    assert len(net.state.history(7)) == 1
    assert [w.warning_id for w in net.state.open_warnings(7)] == [wid]
    # only a User may override, and only an existing warning of that object
    denied = net.commit([net.tx(OperatorOverride(7, wid), "prov"),
                         net.tx(OperatorOverride(8, wid), "user")], t2)
    assert [x.detail for x in denied.receipts] == ["signer lacks User role", "no such warning for object"]
    ok = net.commit([net.tx(OperatorOverride(7, wid), "user")], t2)
    assert ok.receipts[0].status == "applied"
    assert net.state.history(7)[-1].elements == off and not net.state.open_warnings()
    again = net.commit([net.tx(OperatorOverride(7, wid), "user")], t2)
    assert again.receipts[0].detail == "warning already resolved"
    assert verify(net.chain).ok


def test_membership_change():
    net = Network()
    newbie = KeyPair.from_seed("newbie")
    peer = PeerIdentity("newbie", (Role.PROVIDER,), newbie.public_key)
    b = net.commit([net.tx(MembershipChange(peer, "add"), "user")], START.plus_seconds(10))
    assert b.receipts[0].status == "applied" and "newbie" in net.state.members
    b = net.commit([net.tx(MembershipChange(peer, "add"), "user")], START.plus_seconds(20))
    assert b.receipts[0].detail == "peer already registered"
    t = START.plus_seconds(30)
    # newbie is not in net.keys, so sign by hand
    e = EphemerisEntry(9, t, leo(random.Random(6)), "newbie", t).signed(newbie)
    tx = Transaction(EphemerisUpdate(e), "newbie", 1).signed(newbie)
    assert net.commit([tx], t).receipts[0].status == "applied"
    net.commit([net.tx(MembershipChange(peer, "revoke"), "prov")], t)
    assert "newbie" not in net.state.members
    tx2 = Transaction(EphemerisUpdate(e), "newbie", 2).signed(newbie)
    assert net.commit([tx2], t).receipts[0].detail == "unknown signer"
    with pytest.raises(ValueError):
        MembershipChange(peer, "promote")


def test_snapshot_marker_rules():
    net = Network()
    net.commit([net.update(1, START.plus_seconds(10), leo(random.Random(7)))], START.plus_seconds(10))
    good = net.snapshot_tx()
    late = net.commit([net.update(2, START.plus_seconds(20), leo(random.Random(8))), good],
                      START.plus_seconds(20))
    assert late.receipts[1].detail == "snapshot marker must lead its block"
    assert late.snapshot_marker is None
    wrong = net.tx(SnapshotMarker(bytes(32)), "v0")
    b = net.commit([wrong], START.plus_seconds(30))
    assert b.receipts[0].detail == "snapshot hash mismatch"
    b = net.commit([net.snapshot_tx()], START.plus_seconds(40))
    assert b.receipts[0].status == "applied" and b.snapshot_marker is not None


# -- certificates --------------------------------------------------------------------------

def test_certificate_rules(ten):
    params = ten.params
    b = ten.chain.blocks[0]
    assert verify_certificate(b, params) is None
    assert verify_certificate(b.with_endorsements(b.endorsements[:2]), params) == "2 endorsements, quorum is 3"
    assert verify_certificate(b.with_endorsements(()), params) == "no endorsements"
    dup = b.with_endorsements(b.endorsements[:2] + b.endorsements[:1])
    assert "duplicate" in verify_certificate(dup, params)
    outsider = b.endorse("prov", 0, ten.keys["prov"])
    assert "non-committee" in verify_certificate(b.with_endorsements(b.endorsements + (outsider,)), params)
    forged = b.endorse("v3", 0, ten.keys["v0"])
    assert "bad endorsement" in verify_certificate(b.with_endorsements(b.endorsements + (forged,)), params)
    mixed = b.endorse("v3", 1, ten.keys["v3"])
    assert "rounds" in verify_certificate(b.with_endorsements(b.endorsements + (mixed,)), params)


def test_reordered_and_missing_blocks(ten):
    blocks = list(ten.chain.blocks)
    swapped = blocks[:3] + [blocks[4], blocks[3]] + blocks[5:]
    assert verify_chain(ten.genesis, swapped).height == 4
    gap = blocks[:5] + blocks[6:]
    assert verify_chain(ten.genesis, gap).height == 6
    assert verify_chain(ten.genesis, blocks[:-1]).ok


# -- tamper detection ----------------------------------------------------------------------------

def test_exhaustive_flip_one_block(ten):
    height = 2
    size = len(encode(ten.chain.blocks[height - 1]))
    rng = random.Random(11)
    misses = [off for off in range(size)
              if flip_and_verify(ten, height, off, rng.randrange(1, 256)) != height]
    assert misses == []


@pytest.mark.parametrize("height", range(1, 11))
def test_sampled_flips(ten, height):
    rng = random.Random(height)
    size = len(encode(ten.chain.blocks[height - 1]))
    for _ in range(12):
        assert flip_and_verify(ten, height, rng.randrange(size), rng.randrange(1, 256)) == height


def test_genesis_tamper_detected(ten):
    from ephemerishield.encoding import EncodingError, decode
    raw = bytearray(encode(ten.genesis))
    rng = random.Random(3)
    for _ in range(40):
        b = bytearray(raw)
        b[rng.randrange(len(b))] ^= rng.randrange(1, 256)
        try:
            g = decode(bytes(b))
        except EncodingError:
            continue
        res = verify_chain(g, ten.chain.blocks)
        assert not res.ok and res.height in (0, 1)


# -- pruning -----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tenday():
    return ten_day_chain()


def test_prune_refused_without_snapshot(ten):
    with pytest.raises(PruneRefused):
        prune(ten.chain)


def test_prune_ten_days_to_three(tenday):
    full = tenday.chain
    assert verify(full).ok
    before = replay(full).state_hash()
    pruned = prune(full)
    kept = [b.height for b in pruned.blocks]
    # blocks dated within three days of the tip timestamp, plus the snapshot block
    assert kept == [7, 8, 9, 10]
    assert pruned.snapshot_state.height == 9
    assert all(b.timestamp >= full.tip.timestamp.plus_seconds(-3 * DAY) for b in pruned.blocks)
    res = verify(pruned)
    assert res.ok and res.height == 10
    assert replay(pruned).state_hash() == before == tenday.state.state_hash()
    assert prune(pruned).blocks == pruned.blocks


def test_prune_short_retention_keeps_snapshot_block(tenday):
    pruned = prune(tenday.chain, retention_seconds=1.0)
    assert [b.height for b in pruned.blocks] == [9, 10]
    assert verify(pruned).ok


def test_lookup_after_trim(tenday):
    state = tenday.state
    hist = state.history(1)
    assert all(h.epoch >= state.pruned_before for h in hist)
    old = START.plus_seconds(DAY)
    assert state.lookup(1, old).status == "pruned"
    assert state.lookup(1, hist[-1].epoch).status == "found"
    assert state.lookup(1, hist[-1].epoch.plus_seconds(1)).status == "not_found"
    assert state.lookup(999, START).status == "pruned"


def test_snapshot_state_tamper_detected(tenday):
    pruned = prune(tenday.chain)
    bad = pruned.snapshot_state.copy()
    bad.nonces["prov"] += 1
    res = verify(Chain(pruned.genesis, pruned.blocks, bad))
    assert not res.ok and res.height == 9


# -- storage ----------------------------------------------------------------------------------------

def test_storage_round_trip(tmp_path, ten):
    write_chain(tmp_path, ten.chain)
    back = read_chain(tmp_path)
    assert back.genesis == ten.genesis and back.blocks == ten.chain.blocks
    assert verify(back).ok


def test_storage_append(tmp_path, ten):
    write_chain(tmp_path, Chain(ten.genesis, ten.chain.blocks[:4]))
    for b in ten.chain.blocks[4:]:
        append_block(tmp_path, b)
    assert read_chain(tmp_path).blocks == ten.chain.blocks


def test_storage_pruned_round_trip(tmp_path, tenday):
    pruned = prune(tenday.chain)
    write_chain(tmp_path, pruned)
    back = read_chain(tmp_path)
    assert back.snapshot_state.state_hash() == pruned.snapshot_state.state_hash()
    assert [b.height for b in back.blocks] == [7, 8, 9, 10]
    assert verify(back).ok
    assert replay(back).state_hash() == tenday.state.state_hash()


def test_storage_faults(tmp_path, ten):
    write_chain(tmp_path, ten.chain)
    seg = sorted((tmp_path / "blocks").glob("*.blk"))[0]
    data = seg.read_bytes()
    # cut the file in the middle of block 6
    offsets, pos = [], 0
    while pos < len(data):
        offsets.append(pos)
        pos += 4 + struct.unpack(">I", data[pos:pos + 4])[0]
    seg.write_bytes(data[:offsets[5] + 10])
    with pytest.raises(StorageError) as err:
        read_chain(tmp_path)
    assert err.value.height == 6
    seg.write_bytes(data)
    manifest = tmp_path / "MANIFEST"
    text = manifest.read_text()
    manifest.write_text(text.replace(ten.genesis.digest.hex(), "00" * 32))
    with pytest.raises(StorageError) as err:
        read_chain(tmp_path)
    assert err.value.height == 0


def test_on_disk_byte_flips(tmp_path, ten):
    """Flip bytes in the stored segment and locate the damaged block."""
    write_chain(tmp_path, ten.chain)
    seg = sorted((tmp_path / "blocks").glob("*.blk"))[0]
    data = seg.read_bytes()
    bounds, pos = [], 0
    while pos < len(data):
        end = pos + 4 + struct.unpack(">I", data[pos:pos + 4])[0]
        bounds.append((pos, end))
        pos = end
    rng = random.Random(5)
    for _ in range(60):
        off = rng.randrange(len(data))
        height = next(i + 1 for i, (a, b) in enumerate(bounds) if a <= off < b)
        b = bytearray(data)
        b[off] ^= rng.randrange(1, 256)
        seg.write_bytes(bytes(b))
        try:
            res = verify(read_chain(tmp_path))
            found = None if res.ok else res.height
        except StorageError as exc:
            found = exc.height
        # a damaged length prefix can only be noticed at or after its own record
        assert found is not None and found >= height
        if off >= bounds[height - 1][0] + 4:
            assert found == height
    seg.write_bytes(data)
