import json
import socket
import struct
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_manifest, wait_for
from netforge import metrics
from netforge.remote_agent import (MAX_FRAME, PROTOCOL_VERSION, Agent,
                                   AgentClient, ConnectionLost, Frame,
                                   FrameTooLarge, ProtocolError, RemoteError,
                                   client_connect, decode_payload,
                                   encode_frame, HELLO, HELLO_ACK, ERROR)
from netforge.session_engine import SessionManager, SimulatedBackend

NET_TEXT = """name: "tiny"
layer {
  name: "in"
  type: "Input"
  top: "in"
}
layer {
  name: "act"
  type: "ReLU"
  bottom: "in"
  top: "act"
}
"""

SOLVER_TEXT = """base_lr: 0.01
max_iter: 300
display: 10
test_interval: 100
test_iter: 2
snapshot: 100
lr_policy: "fixed"
"""


@pytest.fixture
def agent(tmp_path):
    root = tmp_path / "agent_root"
    root.mkdir()
    (root / "datasets").mkdir()
    make_manifest(root / "datasets", "mnist.manifest")
    with Agent(root, port=0,
               backend_factory=lambda seed: SimulatedBackend(
                   seed=seed, step_delay=0.0)) as running:
        yield running


def connect(agent_fixture) -> AgentClient:
    return client_connect(f"127.0.0.1:{agent_fixture.port}")


class TestFraming:
    json_bodies = st.dictionaries(
        st.text(st.characters(min_codepoint=32, max_codepoint=126),
                min_size=1, max_size=10),
        st.one_of(st.integers(-2**31, 2**31), st.booleans(),
                  st.text(max_size=20), st.none()),
        max_size=6)

    @settings(max_examples=150, deadline=None)
    @given(kind=st.sampled_from([0x01, 0x10, 0x20, 0x31, 0x70, 0x7F]),
           body=json_bodies,
           attachment=st.one_of(st.none(), st.binary(max_size=2048)))
    def test_encode_decode_identity(self, kind, body, attachment):
        frame = Frame(kind, body, attachment)
        raw = encode_frame(frame)
        length = struct.unpack(">I", raw[:4])[0]
        assert length == len(raw) - 4
        decoded = decode_payload(raw[4:])
        assert decoded.kind == kind
        # the encoder records the attachment length in the body
        stripped = {k: v for k, v in decoded.body.items()
                    if k != "attachmentLength"}
        assert stripped == {k: v for k, v in body.items()
                            if k != "attachmentLength"}
        assert (decoded.attachment or None) == (attachment or None)

    def test_oversize_encode_rejected(self):
        with pytest.raises(FrameTooLarge):
            encode_frame(Frame(0x31, {}, b"\x00" * (MAX_FRAME + 1)))

    def test_oversize_length_rejected_before_buffering(self, agent):
        sock = socket.create_connection(("127.0.0.1", agent.port), timeout=5)
        try:
            sock.sendall(struct.pack(">I", MAX_FRAME + 100))
            sock.settimeout(5)
            data = sock.recv(65536)
            # server must hang up without waiting for the announced payload
            assert data == b"" or b"FRAME_TOO_LARGE" in data
        finally:
            sock.close()


class TestHandshake:
    def test_version_match(self, agent):
        with connect(agent) as client:
            assert client.host.protocol_version == PROTOCOL_VERSION
            assert client.host.host_id

    def test_version_mismatch_rejected(self, agent):
        sock = socket.create_connection(("127.0.0.1", agent.port), timeout=5)
        try:
            payload = json.dumps({"protocolVersion": 99,
                                  "clientName": "test"}).encode()
            sock.sendall(encode_frame(Frame(HELLO, {"protocolVersion": 99})))
            length = struct.unpack(">I", sock.recv(4))[0]
            buf = b""
            while len(buf) < length:
                buf += sock.recv(length - len(buf))
            frame = decode_payload(buf)
            assert frame.kind == ERROR
            assert frame.body["code"] == "VERSION_MISMATCH"
        finally:
            sock.close()

    def test_ping(self, agent):
        with connect(agent) as client:
            client.ping()


class TestDatasets:
    def test_list_and_probe(self, agent):
        with connect(agent) as client:
            listed = client.list_datasets()
            assert len(listed) == 1
            stats = client.probe_dataset(listed[0]["id"])
            assert stats["itemCount"] == 60000
            assert stats["dims"] == [1, 28, 28]

    def test_probe_missing(self, agent):
        with connect(agent) as client:
            with pytest.raises(RemoteError) as exc:
                client.probe_dataset("ds-nope")
            assert exc.value.code == "DATASET_MISSING"


class TestSessions:
    def test_lifecycle_and_errors(self, agent):
        with connect(agent) as client:
            sid = client.create_session(NET_TEXT, SOLVER_TEXT, seed=1)
            assert client.status(sid)["state"] == "WAITING"
            with pytest.raises(RemoteError) as exc:
                client.control(sid, "pause")
            assert exc.value.code == "ILLEGAL_TRANSITION"
            client.control(sid, "start", seed=1)
            wait_for(lambda: client.status(sid)["state"] == "FINISHED")
            status = client.status(sid)
            assert status["iteration"] == 300
            assert status["latestSnapshot"] == 300
            client.control(sid, "delete")
            with pytest.raises(RemoteError) as exc:
                client.status(sid)
            assert exc.value.code == "NO_SUCH_SESSION"

    def test_session_ids_monotonic_across_connections(self, agent):
        with connect(agent) as client:
            first = client.create_session(NET_TEXT, SOLVER_TEXT)
        with connect(agent) as client:
            second = client.create_session(NET_TEXT, SOLVER_TEXT)
        assert second == first + 1

    def test_bad_net_rejected(self, agent):
        with connect(agent) as client:
            with pytest.raises(RemoteError) as exc:
                client.create_session("layer {", SOLVER_TEXT)
            assert exc.value.code == "BAD_REQUEST"


class TestLogStreaming:
    def run_session(self, client, seed=1):
        sid = client.create_session(NET_TEXT, SOLVER_TEXT, seed=seed)
        client.control(sid, "start", seed=seed)
        wait_for(lambda: client.status(sid)["state"] == "FINISHED")
        return sid

    def test_full_stream_matches_file(self, agent):
        with connect(agent) as client:
            sid = self.run_session(client)
            collected = b""
            for offset, chunk, eof in client.subscribe_log(sid, 0):
                assert offset == len(collected)
                collected += chunk
            on_disk = (agent.root / "sessions" / f"{sid:06d}"
                       / "train.log").read_bytes()
            assert collected == on_disk

    def test_reconnect_resumes_at_offset(self, agent):
        with connect(agent) as client:
            sid = self.run_session(client)
            full = b""
            for _, chunk, eof in client.subscribe_log(sid, 0):
                full += chunk
        # take the first half on one connection, the rest on a second one
        half = len(full) // 2
        with connect(agent) as client:
            again = b""
            for offset, chunk, eof in client.subscribe_log(sid, 0):
                again += chunk
                if len(again) >= half:
                    break
        with connect(agent) as client:
            rest = b""
            start = None
            for offset, chunk, eof in client.subscribe_log(sid, len(again)):
                if start is None:
                    start = offset
                rest += chunk
            assert start == len(again)
        assert again + rest == full

    def test_subscribe_finished_at_eof_terminal_chunk(self, agent):
        with connect(agent) as client:
            sid = self.run_session(client)
            size = len((agent.root / "sessions" / f"{sid:06d}"
                        / "train.log").read_bytes())
            chunks = list(client.subscribe_log(sid, size))
            assert chunks[-1][2] is True
            assert chunks[-1][1] == b""


class TestSnapshots:
    def test_fetch_snapshot_payload(self, agent):
        with connect(agent) as client:
            sid = client.create_session(NET_TEXT, SOLVER_TEXT, seed=5)
            client.control(sid, "start", seed=5)
            wait_for(lambda: client.status(sid)["state"] == "FINISHED")
            data = client.fetch_snapshot(sid, 300)
            assert data == b"seed=5 iteration=300\n"

    def test_fetch_missing_snapshot(self, agent):
        with connect(agent) as client:
            sid = client.create_session(NET_TEXT, SOLVER_TEXT)
            with pytest.raises(RemoteError):
                client.fetch_snapshot(sid, 123)


class TestRemoteLocalEquivalence:
    def test_csv_byte_identical_to_local_run(self, agent, tmp_path):
        with connect(agent) as client:
            sid = client.create_session(NET_TEXT, SOLVER_TEXT, seed=1)
            client.control(sid, "start", seed=1)
            wait_for(lambda: client.status(sid)["state"] == "FINISHED")
            remote_log = b""
            for _, chunk, _ in client.subscribe_log(sid, 0):
                remote_log += chunk

        from netforge.prototext import parse_text_format
        manager = SessionManager(tmp_path / "local")
        manager.create_from_documents(1, parse_text_format(NET_TEXT),
                                      parse_text_format(SOLVER_TEXT))
        manager.start(1, SimulatedBackend(seed=1, step_delay=0.0))
        wait_for(lambda: manager.get(1).state == "FINISHED")
        local_log = manager.get(1).log_path.read_bytes()
        assert remote_log == local_log

        keys = ["train/loss", "test0/accuracy", "lr"]
        local_csv, _ = metrics.export_csv(
            [metrics.bundle_from_events(
                "s", metrics.parse_log_text(local_log.decode()))], keys)
        remote_csv, _ = metrics.export_csv(
            [metrics.bundle_from_events(
                "s", metrics.parse_log_text(remote_log.decode()))], keys)
        assert remote_csv == local_csv
