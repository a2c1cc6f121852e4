import json
import threading
from pathlib import Path

import pytest

from ephemerishield.crypto import KeyPair
from ephemerishield.elements import Epoch
from ephemerishield.ledger import read_chain, verify
from ephemerishield.node import (
    ApiError,
    ConfigError,
    Node,
    NodeClient,
    NodeConfig,
    entry_from_args,
    load_config,
    read_key_file,
    sign_request,
    submission_args,
    write_key_file,
)

FIXTURE = Path(__file__).parent / "fixtures" / "smoke.tle"
OPERATOR = KeyPair.from_seed("node-test-operator")


def tle_sets(n=None):
    lines = [ln for ln in FIXTURE.read_text().splitlines() if ln.strip()]
    sets = ["\n".join(lines[k:k + 2]) for k in range(0, len(lines), 2)]
    return sets if n is None else sets[:n]


def corrupt_checksum(tle: str) -> str:
    l1, l2 = tle.split("\n")
    bad = str((int(l1[68]) + 1) % 10)
    return l1[:68] + bad + "\n" + l2


class Session:
    def __init__(self, node):
        self.node = node
        self.seq = 0

    def call(self, op, args=None, identity=None):
        req = {"id": 1, "op": op, "args": args or {}}
        if identity:
            req["auth"] = sign_request(identity[1], identity[0], op, req["args"])
        return json.loads(self.node.handle_line(json.dumps(req).encode()))

    def submit(self, tle=None, wait=True, **kw):
        self.seq += 1
        args = submission_args(OPERATOR, "op", self.seq, tle=tle, wait=wait, **kw)
        return self.call("SubmitEphemeris", args, ("op", OPERATOR))


@pytest.fixture
def node(tmp_path):
    cfg = NodeConfig(peer_id="op", data_dir=str(tmp_path / "data"), port=0, validators=1)
    n = Node(cfg, OPERATOR)
    n.start(serve=False)
    yield n
    n.stop()


def test_get_object_not_found_carries_height(node):
    s = Session(node)
    resp = s.call("GetObject", {"object_id": 99999})
    assert resp["ok"] is False and resp["error"]["code"] == "not_found"
    assert resp["height"] == 0 and resp["id"] == 1


def test_submit_and_read_your_writes(node):
    s = Session(node)
    tle = tle_sets(1)[0]
    resp = s.submit(tle)
    assert resp["ok"], resp
    r = resp["result"]
    assert r["status"] == "applied" and r["detail"] == "FirstEntry"
    oid = r["object_id"]
    got = s.call("GetObject", {"object_id": oid})
    assert got["ok"] and got["height"] >= r["block_height"]
    assert got["result"]["latest"]["epoch"] == r["epoch"]
    point = s.call("GetObject", {"object_id": oid, "epoch": r["epoch"]})
    assert point["ok"] and point["result"]["entry"]["provider"] == "op"
    info = s.call("GetChainInfo", {"peer_id": "op"})["result"]
    assert info["nonce"] == 1 and info["objects"] == 1 and info["worker_alive"]


def test_bad_checksum_is_parse_error_and_nothing_submitted(node):
    s = Session(node)
    bad = corrupt_checksum(tle_sets(1)[0])
    with pytest.raises(ApiError):           # the client refuses to sign it
        submission_args(OPERATOR, "op", 1, tle=bad)
    args = {"tle": bad, "submitted_at_us": 0, "seq": 1, "wait": True,
            "entry_signature": "00" * 64, "signature": "00" * 64}
    resp = s.call("SubmitEphemeris", args, ("op", OPERATOR))
    err = resp["error"]
    assert err["code"] == "parse_error"
    assert err["detail"]["line"] == 1 and err["detail"]["columns"] == [69, 69]
    info = s.call("GetChainInfo")["result"]
    assert info["height"] == 0 and info["objects"] == 0


def test_replayed_submission_warns(node):
    s = Session(node)
    tle = tle_sets(1)[0]
    assert s.submit(tle)["result"]["status"] == "applied"
    again = s.submit(tle)["result"]
    assert again["status"] == "warning" and again["detail"] == "NonMonotonicEpoch"
    warnings = s.call("GetWarnings")["result"]["warnings"]
    assert len(warnings) == 1 and warnings[0]["reason"] == "NonMonotonicEpoch"


def test_element_dict_submission_and_envelope(node):
    s = Session(node)
    base = {"semi_major_axis_km": 7000.0, "eccentricity": 0.001, "inclination_deg": 51.6,
            "raan_deg": 10.0, "argp_deg": 20.0, "mean_anomaly_deg": 30.0}
    ok = s.submit(object_id=5, epoch="2024-01-01T00:00:00Z", elements=base)
    assert ok["ok"], ok
    far = dict(base, semi_major_axis_km=7100.0)
    warn = s.submit(object_id=5, epoch="2024-01-01T00:10:00Z", elements=far)["result"]
    assert warn["status"] == "warning" and warn["detail"] == "EnvelopeExceeded"


def test_auth_failures(node):
    s = Session(node)
    args = submission_args(OPERATOR, "op", 1, tle=tle_sets(1)[0])
    assert s.call("SubmitEphemeris", args)["error"]["code"] == "unauthorized"
    stranger = KeyPair.from_seed("stranger")
    assert s.call("SubmitEphemeris", args, ("op", stranger))["error"]["code"] == "unauthorized"
    assert s.call("SubmitEphemeris", args, ("ghost", stranger))["error"]["code"] == "unauthorized"
    # request signed, but the transaction signature belongs to someone else
    forged = submission_args(stranger, "op", 1, tle=tle_sets(1)[0])
    assert s.call("SubmitEphemeris", forged, ("op", OPERATOR))["error"]["code"] == "unauthorized"


def test_stale_seq(node):
    s = Session(node)
    a, b = tle_sets(2)
    assert s.submit(a)["ok"]
    s.seq = 0
    resp = s.submit(b)
    assert resp["error"]["code"] == "stale_seq" and resp["error"]["nonce"] == 1


def test_request_errors(node):
    for raw, code in ((b"{not json", "bad_json"), (b"[1, 2]", "bad_request"),
                      (b'{"op": "Launch"}', "unknown_op"),
                      (b'{"op": "GetObject", "args": []}', "bad_request"),
                      (b'{"op": "GetObject", "args": {"object_id": "x"}}', "bad_request"),
                      (b'{"op": "GetObject", "args": {}}', "bad_request"),
                      (b'{"op": "ListCatalog", "args": {"limit": -1}}', "bad_request"),
                      (b'{"op": "RequestScreening", "args": {"horizon_seconds": 1e9}}', "bad_request"),
                      (b"x" * ((1 << 20) + 1), "too_large")):
        resp = json.loads(node.handle_line(raw))
        assert resp["ok"] is False and resp["error"]["code"] == code, raw[:40]


def test_catalog_warnings_screening_verify(node):
    s = Session(node)
    for tle in tle_sets(6):
        assert s.submit(tle, wait=False)["result"]["status"] == "queued"
    assert node.wait_for_height(1, 30)
    s.submit(tle_sets(7)[-1])       # waits, so everything before it has landed
    cat = s.call("ListCatalog", {"limit": 3})["result"]
    assert cat["total"] == 7 and len(cat["objects"]) == 3
    page2 = s.call("ListCatalog", {"offset": 3, "limit": 10})["result"]
    assert len(page2["objects"]) == 4
    scr = s.call("RequestScreening", {"horizon_seconds": 3600.0, "alert_distance_km": 100.0})
    assert scr["ok"] and scr["result"]["summary"]["pairs_total"] == 21
    v = s.call("VerifyChain")["result"]
    assert v["ok"] and v["height"] == node._view.height


def test_restart_preserves_state(tmp_path):
    cfg = NodeConfig(peer_id="op", data_dir=str(tmp_path / "d"), port=0)
    n = Node(cfg, OPERATOR)
    n.start(serve=False)
    s = Session(n)
    for tle in tle_sets(3):
        assert s.submit(tle)["ok"]
    h, state_hash = n._view.height, n._view.state.state_hash()
    n.stop()
    assert verify(read_chain(tmp_path / "d")).ok
    for k, drop_state in enumerate((False, True)):
        if drop_state:
            (tmp_path / "d" / "state.bin").unlink()
        again = Node(NodeConfig(peer_id="op", data_dir=str(tmp_path / "d"), port=0), OPERATOR)
        assert again._view.height == h and again._view.state.state_hash() == state_hash
        again.start(serve=False)
        s2 = Session(again)
        s2.seq = 3 + k
        assert s2.submit(tle_sets(5)[3 + k])["result"]["status"] == "applied"
        again.stop()
        h, state_hash = again._view.height, again._view.state.state_hash()


def test_four_validators_over_tcp(tmp_path):
    cfg = NodeConfig(peer_id="op", data_dir=str(tmp_path / "d4"), port=0, validators=4)
    with Node(cfg, OPERATOR) as n:
        host, port = n.address
        with NodeClient(host, port, timeout=30) as c:
            for k, tle in enumerate(tle_sets(3), 1):
                resp = c.request("SubmitEphemeris", submission_args(OPERATOR, "op", k, tle=tle),
                                 ("op", OPERATOR))
                assert resp["ok"] and resp["result"]["status"] == "applied", resp
            info = c.request("GetChainInfo")["result"]
            assert len(info["committee"]) == 4
            assert c.request("VerifyChain")["result"]["ok"]


def test_concurrent_clients(tmp_path):
    cfg = NodeConfig(peer_id="op", data_dir=str(tmp_path / "c"), port=0)
    sets = tle_sets(12)
    results = []
    with Node(cfg, OPERATOR) as n:
        host, port = n.address

        def worker(chunk, seqs):
            with NodeClient(host, port, timeout=30) as c:
                for tle, seq in zip(chunk, seqs):
                    results.append(c.request("SubmitEphemeris",
                                             submission_args(OPERATOR, "op", seq, tle=tle),
                                             ("op", OPERATOR)))

        # disjoint, interleaved sequence numbers; gaps are allowed so every tx lands
        threads = [threading.Thread(target=worker, args=(sets[k::3], range(k + 1, 37, 3)))
                   for k in range(3)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        ok = [r for r in results if r["ok"]]
        assert len(results) == 12
        # a higher seq may commit first and make a lower one stale; nothing else may fail
        assert all(r["ok"] or r["error"]["code"] == "stale_seq" for r in results)
        assert len(ok) >= 4
        with NodeClient(host, port) as c:
            assert c.request("VerifyChain")["result"]["ok"]


def test_entry_from_args_matches_client():
    args = submission_args(OPERATOR, "op", 1, tle=tle_sets(1)[0],
                           submitted_at=Epoch.from_iso("2024-01-01T00:00:00Z"))
    entry = entry_from_args(args, "op")
    assert entry.object_id == 28654 and entry.submitted_at.micros == args["submitted_at_us"]
    signed = entry.signed(OPERATOR)
    assert signed.signature.hex() == args["entry_signature"]
    with pytest.raises(ApiError) as err:
        entry_from_args({"submitted_at_us": 0, "tle": "one line only"}, "op")
    assert err.value.code == "parse_error"


def test_config_and_keys(tmp_path):
    path = tmp_path / "id.key"
    write_key_file(path, "alice", OPERATOR)
    assert oct(path.stat().st_mode & 0o777) == "0o600"
    pid, keys = read_key_file(path)
    assert pid == "alice" and keys.public_key == OPERATOR.public_key
    conf = tmp_path / "node.json"
    conf.write_text(json.dumps({"peer_id": "alice", "validators": 4, "port": 0}))
    cfg = load_config(str(conf), data_dir="x", host=None)
    assert cfg.validators == 4 and cfg.data_dir == "x" and cfg.host == "127.0.0.1"
    assert cfg.validator_ids == ("alice-v0", "alice-v1", "alice-v2", "alice-v3")
    conf.write_text(json.dumps({"colour": "red"}))
    with pytest.raises(ConfigError):
        load_config(str(conf))
    with pytest.raises(ConfigError):
        NodeConfig(validators=0)
    with pytest.raises(ConfigError):
        NodeConfig(port=70000)
