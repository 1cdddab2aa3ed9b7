import io
import json
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cropuf.errors import FrameError, ParameterError, ProtocolError
from cropuf.extraction import model_accuracy
from cropuf.keyshare import ProbeConfig, SharedKey, derive_key
from cropuf.protocol import (
    DeviceAgent,
    DeviceServer,
    LoopbackChannel,
    SocketChannel,
    Transcript,
    TrustedThirdParty,
    bits_to_bytes,
    bytes_to_bits,
    decode_message,
    encode_message,
    xor_decrypt,
    xor_encrypt,
)
from cropuf.protocol.messages import (
    BURN_FUSE,
    DATA,
    ERROR,
    HELLO,
    KEY_ACK,
    MAX_FRAME,
    PROVISION,
    READ_REQUEST,
    READ_RESPONSE,
    SCHEMA,
    FrameDecoder,
    Message,
    read_frame,
)
from cropuf.puf import EnvCondition, PufParams, sample_puf

# -- codec ---------------------------------------------------------------------------

json_leaf = st.one_of(st.none(), st.booleans(), st.integers(-2**53, 2**53),
                      st.floats(allow_nan=False, allow_infinity=False), st.text(max_size=20))
json_value = st.recursive(json_leaf, lambda kids: st.lists(kids, max_size=4) | st.dictionaries(st.text(max_size=8), kids, max_size=4),
                          max_leaves=12)
_typed = {str: st.text(max_size=30), int: st.integers(0, 10**6), list: st.lists(json_value, max_size=5),
          dict: st.dictionaries(st.text(max_size=8), json_value, max_size=4)}


@st.composite
def messages(draw):
    kind = draw(st.sampled_from(sorted(SCHEMA)))
    payload = {name: draw(_typed[typ]) for name, typ in SCHEMA[kind].items()}
    payload.update(draw(st.dictionaries(st.text(min_size=12, max_size=16), json_value, max_size=2)))
    return Message(kind, payload, draw(st.integers(0, 2**31)))


@given(messages())
def test_round_trip_every_variant(msg):
    frame = encode_message(msg)
    assert int.from_bytes(frame[:4], "big") == len(frame) - 4
    assert decode_message(frame) == msg


@given(st.lists(messages(), min_size=1, max_size=5), st.integers(1, 50))
def test_stream_decoder_any_split(msgs, step):
    stream = b"".join(encode_message(m) for m in msgs)
    dec = FrameDecoder()
    got = []
    for i in range(0, len(stream), step):
        got.extend(dec.messages(stream[i:i + step]))
    assert got == msgs and dec.pending == 0


def test_hello_body_fields():
    frame = encode_message(Message(HELLO, {"device_id": "d", "n": 4, "m": 5}, 1))
    body = json.loads(frame[4:].decode("utf-8"))
    assert set(body) == {"v", "seq", "type", "payload"}
    assert body["payload"]["n"] == 4 and body["v"] == 1 and body["type"] == "HELLO"


def test_truncated_and_oversize_frames():
    frame = encode_message(Message(BURN_FUSE, {}, 3))
    with pytest.raises(FrameError):
        decode_message(frame[:-1])
    with pytest.raises(FrameError):
        decode_message(frame[:2])
    with pytest.raises(FrameError):
        decode_message((MAX_FRAME + 1).to_bytes(4, "big") + b"{}")
    with pytest.raises(FrameError):
        encode_message(Message(READ_REQUEST, {"paths": ["0-0-0-0-0"] * 10}), max_frame=50)
    with pytest.raises(FrameError):
        read_frame(io.BytesIO(frame[:-3]))
    with pytest.raises(EOFError):
        read_frame(io.BytesIO(b""))
    with pytest.raises(FrameError):
        FrameDecoder(max_frame=10).feed((11).to_bytes(4, "big"))


def test_truncated_frame_keeps_decoder_until_boundary():
    a, b = encode_message(Message(BURN_FUSE, {}, 1)), encode_message(Message(KEY_ACK, {"key_id": "k"}, 2))
    dec = FrameDecoder()
    assert dec.feed(a + b[:5]) == [a]
    assert dec.feed(b[5:]) == [b]


@pytest.mark.parametrize("body,code", [
    (b"not json", "bad_message"),
    (b'{"v":1,"seq":1,"type":"NOPE","payload":{}}', "bad_message"),
    (b'{"v":2,"seq":1,"type":"BURN_FUSE","payload":{}}', "version_mismatch"),
    (b'{"v":1,"seq":-1,"type":"BURN_FUSE","payload":{}}', "bad_message"),
    (b'{"v":1,"seq":1,"type":"KEY_ACK","payload":{}}', "bad_message"),
    (b'{"v":1,"seq":1,"type":"HELLO","payload":{"device_id":"x","n":true,"m":5}}', "bad_message"),
    (b'{"v":1,"seq":1,"type":"BURN_FUSE","payload":{},"extra":0}', "bad_message"),
])
def test_decode_errors(body, code):
    with pytest.raises(ProtocolError) as info:
        decode_message(len(body).to_bytes(4, "big") + body)
    assert info.value.code == code


# -- one-time pad -------------------------------------------------------------------------

def test_xor_vector():
    key = SharedKey.parse("01101001")
    cipher = xor_encrypt(key, bits_to_bytes("10100101"))
    assert bytes_to_bits(cipher) == "11001100"
    assert bytes_to_bits(xor_decrypt(key, bits_to_bytes("11001100"))) == "10100101"


@given(st.binary(max_size=32), st.integers(0, 2**32 - 1))
def test_xor_round_trip_and_identity(msg, seed):
    key = SharedKey.random(max(8 * len(msg), 1) + 5, np.random.default_rng(seed))
    assert xor_decrypt(key, xor_encrypt(key, msg)) == msg
    zeros = bytes(len(msg))
    assert xor_encrypt(key, zeros) == key.to_bytes()[:len(msg)]


def test_xor_never_cycles_short_key():
    with pytest.raises(ParameterError):
        xor_encrypt(SharedKey.parse("0110100"), b"\x00")
    with pytest.raises(ParameterError):
        bits_to_bytes("0101")


# -- device agent ------------------------------------------------------------------------------

def frame(kind, payload, seq):
    return encode_message(Message(kind, payload, seq))


def test_device_answers_reads_and_refuses_after_burn(device):
    agent = DeviceAgent(device, "dev", np.random.default_rng(0))
    assert agent.open_session().type == HELLO
    reply = decode_message(agent.handle_frame(frame(READ_REQUEST, {"paths": ["0-1-2-3-0"], "repeats": 3,
                                                                   "aggregate": "none"}, 1)))
    assert reply.type == READ_RESPONSE and len(reply.payload["readings"][0]["counts"]) == 3
    assert decode_message(agent.handle_frame(frame(BURN_FUSE, {}, 2))).type == "BURN_ACK"
    for seq in range(3, 8):
        reply = decode_message(agent.handle_frame(frame(READ_REQUEST, {"paths": ["0-1-2-3-0"]}, seq)))
        assert (reply.type, reply.payload["code"]) == (ERROR, "fuse_burned")


@pytest.mark.parametrize("payload", [{"paths": ["0-1-2"]}, {"paths": ["0-1-2-3-0"], "repeats": 0},
                                     {"paths": ["0-1-2-3-0"], "aggregate": "median"}])
def test_device_rejects_bad_reads(device, payload):
    agent = DeviceAgent(device, "dev", np.random.default_rng(0))
    reply = decode_message(agent.handle_frame(frame(READ_REQUEST, payload, 1)))
    assert reply.payload["code"] == "bad_request"


def test_device_rejects_malformed_frames_and_sequence(device):
    agent = DeviceAgent(device, "dev", np.random.default_rng(0))
    body = b"{oops"
    reply = decode_message(agent.handle_frame(len(body).to_bytes(4, "big") + body))
    assert reply.payload["code"] == "bad_message"
    agent.handle_frame(frame(BURN_FUSE, {}, 5))
    reply = decode_message(agent.handle_frame(frame(BURN_FUSE, {}, 5)))
    assert reply.payload["code"] == "bad_sequence"
    reply = decode_message(agent.handle_frame(frame(HELLO, {"device_id": "x", "n": 4, "m": 5}, 6)))
    assert reply.payload["code"] == "unexpected_message"


# -- enrollment and provisioning -----------------------------------------------------------------

FAST_PROBE = ProbeConfig((-20.0, 25.0, 75.0), 5)


def make_agent(seed, name=None):
    return DeviceAgent(sample_puf(PufParams(seed=seed)), name or f"dev{seed}", np.random.default_rng(seed))


@pytest.fixture
def ttp():
    return TrustedThirdParty(np.random.default_rng(0), probe=FAST_PROBE)


def test_enrollment_fits_and_burns(ttp):
    agent = make_agent(1)
    ttp.enroll(LoopbackChannel(agent))
    entry = ttp.enrolled["dev1"]
    assert not agent.device.fuse_intact
    assert entry.threshold.value > 0 and entry.threshold.probe == FAST_PROBE
    assert model_accuracy(entry.model, agent.device) >= 0.999


def test_second_enrollment_refused(ttp):
    agent = make_agent(2)
    ttp.enroll(LoopbackChannel(agent))
    with pytest.raises(ProtocolError) as info:
        ttp.enroll(LoopbackChannel(agent))
    assert info.value.code == "enrollment_refused"
    other = TrustedThirdParty(np.random.default_rng(1), probe=FAST_PROBE)
    with pytest.raises(ProtocolError) as info:
        other.enroll(LoopbackChannel(agent))
    assert info.value.code == "enrollment_refused"
    assert "dev2" not in other.enrolled


def test_channel_loss_leaves_no_entry(ttp, tmp_path):
    ttp.store_dir = tmp_path
    agent = make_agent(3)
    with pytest.raises(ProtocolError) as info:
        ttp.enroll(LoopbackChannel(agent, fail_after=10))
    assert info.value.code == "session_aborted"
    assert ttp.enrolled == {} and list(tmp_path.iterdir()) == []
    assert agent.device.fuse_intact


def pair(ttp, transcript=None, tamper=None):
    a, b = make_agent(10, "alice"), make_agent(11, "bob")
    ttp.enroll(LoopbackChannel(a, transcript, "alice"))
    ttp.enroll(LoopbackChannel(b, transcript, "bob", tamper=tamper))
    return a, b


def test_provisioned_keys_agree_and_never_travel(ttp):
    tr = Transcript()
    a, b = pair(ttp, tr)
    key_id, k = ttp.provision("alice", "bob", 128)
    assert len(k) == 128 and len(key_id) == 32
    assert a.keys[key_id] == k and b.keys[key_id] == k
    for dev in (a, b):
        for t in FAST_PROBE.temps:
            assert derive_key(dev.device, dev.provisions[key_id], EnvCondition(t), dev.rng) == k
    assert not tr.contains(str(k).encode()) and not tr.contains(k.to_bytes())
    assert not tr.contains(k.to_bytes().hex().encode())
    assert ttp.keys[key_id].key == k


def test_provision_unknown_device(ttp):
    pair(ttp)
    with pytest.raises(ProtocolError) as info:
        ttp.provision("alice", "mallory")
    assert info.value.code == "unknown_device"


def test_provision_unsatisfiable_names_device(ttp):
    pair(ttp)
    ttp.max_attempts_per_bit = 200
    entry = ttp.enrolled["bob"]
    ttp.enrolled["bob"] = type(entry)(entry.device_id, entry.n, entry.m, entry.model,
                                      type(entry.threshold)(1e6))
    with pytest.raises(ProtocolError) as info:
        ttp.provision("alice", "bob", 4)
    assert info.value.code == "provisioning_failed" and "bob" in info.value.detail


def test_provision_replay_is_idempotent(ttp):
    a, _ = pair(ttp)
    key_id, k = ttp.provision("alice", "bob", 16)
    chal = {"bits": len(a.provisions[key_id]), "challenges": [c.to_dict() for c in a.provisions[key_id].per_bit]}
    reply = a.handle(Message(PROVISION, {"key_id": key_id, "challenges": chal}))
    assert reply.type == KEY_ACK and a.keys[key_id] == k


def test_provision_bad_challenges(ttp):
    a, _ = pair(ttp)
    bad_perm = {"bits": 1, "challenges": [{"perms": [[0, 0, 1, 2]] * 4, "pair": [0, 1]}]}
    wrong_dims = {"bits": 1, "challenges": [{"perms": [[0, 1, 2]] * 4, "pair": [0, 1]}]}
    for chal in (bad_perm, wrong_dims, {"bits": 1}):
        reply = a.handle(Message(PROVISION, {"key_id": "x", "challenges": chal}))
        assert (reply.type, reply.payload["code"]) == (ERROR, "bad_challenge")


def test_data_exchange_one_time(ttp):
    a, b = pair(ttp)
    key_id, _ = ttp.provision("alice", "bob", 64)
    msg = a.encrypt(key_id, b"secret!")
    assert b.handle(msg) is None and b.inbox[key_id] == b"secret!"
    assert b.handle(msg).payload["code"] == "key_reused"
    with pytest.raises(ProtocolError):
        a.encrypt(key_id, b"again")
    assert b.handle(Message(DATA, {"key_id": "nope", "ciphertext": "00"})).payload["code"] == "unknown_key"


def test_tampered_challenge_breaks_one_bit(ttp):
    def flip_first(msg):
        if msg.type != PROVISION:
            return msg
        payload = json.loads(json.dumps(msg.payload))
        payload["challenges"]["challenges"][0]["pair"].reverse()
        return Message(msg.type, payload, msg.seq)

    a, b = pair(ttp, tamper=flip_first)
    key_id, k = ttp.provision("alice", "bob", 32)
    assert a.keys[key_id] == k
    diff = [i for i, (x, y) in enumerate(zip(k.bits, b.keys[key_id].bits)) if x != y]
    assert diff == [0]


def test_store_persistence(tmp_path):
    ttp = TrustedThirdParty(np.random.default_rng(0), store_dir=tmp_path, probe=FAST_PROBE)
    ttp.enroll(LoopbackChannel(make_agent(5)))
    assert [p.name for p in tmp_path.iterdir()] == ["dev5.json"]
    again = TrustedThirdParty(np.random.default_rng(1), store_dir=tmp_path)
    assert again.load_store() == 1
    assert np.array_equal(again.enrolled["dev5"].model.entries, ttp.enrolled["dev5"].model.entries)
    assert again.enrolled["dev5"].threshold.value == ttp.enrolled["dev5"].threshold.value


def test_concurrent_provisioning_matches_serial():
    def run(parallel):
        ttp = TrustedThirdParty(np.random.default_rng(42), probe=FAST_PROBE)
        agents = [make_agent(20 + i) for i in range(4)]
        for ag in agents:
            ttp.enroll(LoopbackChannel(ag))
        jobs = [("dev20", "dev21"), ("dev22", "dev23")]
        results = {}

        def work(a, b):
            results[(a, b)] = [ttp.provision(a, b, 64) for _ in range(3)]

        if parallel:
            threads = [threading.Thread(target=work, args=j) for j in jobs]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        else:
            for j in jobs:
                work(*j)
        return {k: [(kid, str(key)) for kid, key in v] for k, v in results.items()}

    assert run(True) == run(False)


def test_socket_transport_end_to_end():
    ttp = TrustedThirdParty(np.random.default_rng(0), probe=FAST_PROBE)
    servers, channels = [], []
    tr = Transcript()
    try:
        for seed, name in ((30, "alice"), (31, "bob")):
            srv = DeviceServer(make_agent(seed, name))
            threading.Thread(target=srv.serve_forever, daemon=True).start()
            servers.append(srv)
            channels.append(SocketChannel("127.0.0.1", srv.port, transcript=tr))
        for ch in channels:
            ttp.enroll(ch)
        key_id, k = ttp.provision("alice", "bob", 48)
        assert all(s.agent.keys[key_id] == k for s in servers)
        assert not tr.contains(str(k).encode())
    finally:
        for ch in channels:
            ch.close()
        for srv in servers:
            srv.shutdown()
            srv.server_close()


def test_socket_server_reports_bad_frame():
    srv = DeviceServer(make_agent(32))
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    try:
        ch = SocketChannel("127.0.0.1", srv.port)
        ch.sock.sendall((MAX_FRAME + 1).to_bytes(4, "big"))
        reply = ch._read()
        assert reply.type == ERROR and reply.payload["code"] == "bad_frame"
        ch.close()
    finally:
        srv.shutdown()
        srv.server_close()
