"""Remote training agent and client protocol.

Wire format: length-prefixed frames over one long-lived TCP connection.
  length: uint32 big-endian, byte count of kind + body + attachment
  kind:   one byte from the registered set
  body:   UTF-8 JSON object; when an attachment follows, the body carries
          an exact "attachmentLength" field
  attachment: raw bytes

The agent exposes datasets and sessions under one root directory; the trust
model is "anyone who can reach the port" — bind to loopback or a private
interface, there is no authentication or TLS.
"""

from __future__ import annotations

import json
import queue
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import project_store, prototext, session_engine
from .session_engine import SessionManager, SimulatedBackend

PROTOCOL_VERSION = 1
MAX_FRAME = 64 * 1024 * 1024  # 64 MiB cap, enforced before buffering
SNAPSHOT_CHUNK = 1024 * 1024

# Registered message kinds
HELLO = 0x01
HELLO_ACK = 0x02
LIST_DATASETS = 0x10
DATASETS = 0x11
PROBE_DATASET = 0x12
DATASET_STATS = 0x13
CREATE_SESSION = 0x20
SESSION_CREATED = 0x21
START = 0x22
PAUSE = 0x23
RESUME = 0x24
STATUS_REQ = 0x25
STATUS = 0x26
SUBSCRIBE_LOG = 0x30
LOG_CHUNK = 0x31
FETCH_SNAPSHOT = 0x32
SNAPSHOT_DATA = 0x33
DELETE_SESSION = 0x34
ERROR = 0x7F
PING = 0x70
PONG = 0x71

KNOWN_KINDS = frozenset({
    HELLO, HELLO_ACK, LIST_DATASETS, DATASETS, PROBE_DATASET, DATASET_STATS,
    CREATE_SESSION, SESSION_CREATED, START, PAUSE, RESUME, STATUS_REQ, STATUS,
    SUBSCRIBE_LOG, LOG_CHUNK, FETCH_SNAPSHOT, SNAPSHOT_DATA, DELETE_SESSION,
    ERROR, PING, PONG,
})


class ProtocolError(Exception):
    pass


class FrameTooLarge(ProtocolError):
    pass


class ConnectionLost(ProtocolError):
    pass


class RemoteError(ProtocolError):
    def __init__(self, code: str, message: str):
        self.code = code
        self.remote_message = message
        super().__init__(f"{code}: {message}")


@dataclass(frozen=True)
class Frame:
    kind: int
    body: dict
    attachment: bytes | None = None


@dataclass
class RemoteHost:
    host_id: str
    address: str  # host:port
    protocol_version: int = PROTOCOL_VERSION
    last_seen: float = 0.0
    datasets: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Framing

def encode_frame(frame: Frame) -> bytes:
    body = dict(frame.body)
    if frame.attachment is not None:
        body["attachmentLength"] = len(frame.attachment)
    body_bytes = json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = bytes([frame.kind]) + body_bytes + (frame.attachment or b"")
    if len(payload) > MAX_FRAME:
        raise FrameTooLarge(f"{len(payload)} bytes exceeds the {MAX_FRAME} cap")
    return struct.pack(">I", len(payload)) + payload


def _json_object_extent(data: bytes) -> int:
    """Byte length of the JSON object at the start of `data`."""
    if not data or data[0:1] != b"{":
        raise ProtocolError("frame body must be a JSON object")
    depth = 0
    in_string = False
    escaped = False
    for i, byte in enumerate(data):
        c = chr(byte)
        if in_string:
            if escaped:
                escaped = False
            elif c == "\\":
                escaped = True
            elif c == '"':
                in_string = False
        elif c == '"':
            in_string = True
        elif c == "{":
            depth += 1
        elif c == "}":
            depth -= 1
            if depth == 0:
                return i + 1
    raise ProtocolError("unterminated JSON body")


def decode_payload(payload: bytes) -> Frame:
    if not payload:
        raise ProtocolError("empty frame payload")
    kind = payload[0]
    if kind not in KNOWN_KINDS:
        raise ProtocolError(f"unknown frame kind 0x{kind:02x}")
    rest = payload[1:]
    body_len = _json_object_extent(rest)
    body = json.loads(rest[:body_len].decode("utf-8"))
    attachment = None
    declared = body.get("attachmentLength")
    trailing = rest[body_len:]
    if declared is not None:
        if declared != len(trailing):
            raise ProtocolError(
                f"attachmentLength {declared} != {len(trailing)} trailing bytes")
        attachment = trailing
    elif trailing:
        raise ProtocolError("trailing bytes without declared attachmentLength")
    return Frame(kind, body, attachment)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ConnectionLost("peer closed the connection")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> Frame:
    header = _recv_exact(sock, 4)
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME:
        raise FrameTooLarge(f"declared length {length} exceeds the cap")
    return decode_payload(_recv_exact(sock, length))


def send_frame(sock: socket.socket, frame: Frame, lock: threading.Lock | None = None) -> None:
    data = encode_frame(frame)
    if lock is not None:
        with lock:
            sock.sendall(data)
    else:
        sock.sendall(data)


# ---------------------------------------------------------------------------
# Agent (server side)

class PortInUse(ProtocolError):
    pass


class RootDirMissing(ProtocolError):
    pass


class Agent:
    """Serves datasets and training sessions under one root directory."""

    def __init__(self, root_dir, port: int = 0, host: str = "127.0.0.1",
                 backend_factory=None, host_id: str | None = None):
        self.root = Path(root_dir)
        if not self.root.is_dir():
            raise RootDirMissing(str(self.root))
        (self.root / "datasets").mkdir(exist_ok=True)
        self.manager = SessionManager(self.root / "sessions")
        self.backend_factory = backend_factory or (
            lambda seed: SimulatedBackend(seed=seed))
        self.host_id = host_id or f"agent@{host}"
        self._backends: dict[int, object] = {}
        self._counter_lock = threading.Lock()

        agent = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                agent._serve_connection(self.request)

        try:
            self._server = socketserver.ThreadingTCPServer((host, port), Handler)
        except OSError as exc:
            raise PortInUse(str(exc)) from exc
        self._server.daemon_threads = True
        self.port = self._server.server_address[1]
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        args=(0.05,), daemon=True)

    def start(self) -> "Agent":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    # -- per-connection loop ---------------------------------------------------

    def _serve_connection(self, sock: socket.socket) -> None:
        send_lock = threading.Lock()
        try:
            hello = read_frame(sock)
            if hello.kind != HELLO or hello.body.get("version") != PROTOCOL_VERSION:
                send_frame(sock, Frame(ERROR, {
                    "code": "VERSION_MISMATCH",
                    "message": f"agent speaks protocol {PROTOCOL_VERSION}",
                }), send_lock)
                return
            send_frame(sock, Frame(HELLO_ACK, {
                "version": PROTOCOL_VERSION, "hostId": self.host_id}), send_lock)
            while True:
                request = read_frame(sock)
                self._dispatch(sock, send_lock, request)
        except (ConnectionLost, ConnectionError, OSError):
            return

    def _dispatch(self, sock, send_lock, request: Frame) -> None:
        def reply(kind, body, attachment=None):
            send_frame(sock, Frame(kind, body, attachment), send_lock)

        def error(code, message):
            reply(ERROR, {"code": code, "message": message})

        try:
            if request.kind == PING:
                reply(PONG, {})
            elif request.kind == LIST_DATASETS:
                reply(DATASETS, {"datasets": self._list_datasets()})
            elif request.kind == PROBE_DATASET:
                self._probe(request.body, reply, error)
            elif request.kind == CREATE_SESSION:
                self._create_session(request.body, reply, error)
            elif request.kind in (START, PAUSE, RESUME, DELETE_SESSION):
                self._control(request.kind, request.body, reply, error)
            elif request.kind == STATUS_REQ:
                self._status(request.body, reply, error)
            elif request.kind == SUBSCRIBE_LOG:
                self._subscribe_log(sock, send_lock, request.body, error)
            elif request.kind == FETCH_SNAPSHOT:
                self._fetch_snapshot(request.body, reply, error)
            else:
                error("BAD_REQUEST", f"unexpected frame kind 0x{request.kind:02x}")
        except session_engine.NoSuchSession as exc:
            error("NO_SUCH_SESSION", str(exc))
        except session_engine.IllegalTransition as exc:
            error("ILLEGAL_TRANSITION", str(exc))
        except (ConnectionLost, ConnectionError, OSError):
            raise
        except Exception as exc:  # keep the connection alive on handler bugs
            error("INTERNAL", f"{type(exc).__name__}: {exc}")

    # -- request handlers --------------------------------------------------------

    def _list_datasets(self) -> list[dict]:
        out = []
        for manifest in sorted((self.root / "datasets").glob("*.manifest")):
            entry = {"id": manifest.stem, "format": "MANIFEST",
                     "path": str(manifest.relative_to(self.root))}
            try:
                stats = project_store.read_dataset_manifest(manifest)
                entry["stats"] = {"itemCount": stats.item_count,
                                  "dims": list(stats.dims)}
            except project_store.ManifestMalformed:
                entry["stats"] = None
            out.append(entry)
        return out

    def _probe(self, body, reply, error) -> None:
        manifest = self.root / "datasets" / f"{body.get('id')}.manifest"
        if not manifest.is_file():
            error("DATASET_MISSING", f"no dataset {body.get('id')!r} on this host")
            return
        try:
            stats = project_store.read_dataset_manifest(manifest)
        except project_store.ManifestMalformed as exc:
            error("INTERNAL", str(exc))
            return
        reply(DATASET_STATS, {"id": body["id"], "itemCount": stats.item_count,
                              "dims": list(stats.dims)})

    def _next_session_id(self) -> int:
        counter_path = self.root / "session_counter"
        with self._counter_lock:
            current = 0
            if counter_path.is_file():
                current = int(counter_path.read_text().strip())
            current += 1
            project_store.atomic_write(counter_path, str(current))
            return current

    def _create_session(self, body, reply, error) -> None:
        net_text = body.get("net")
        solver_text = body.get("solver")
        if not isinstance(net_text, str) or not isinstance(solver_text, str):
            error("BAD_REQUEST", "CREATE_SESSION body needs `net` and `solver` text")
            return
        try:
            net_doc = prototext.parse_text_format(net_text)
            solver_doc = prototext.parse_text_format(solver_text)
            session_id = self._next_session_id()
            session = self.manager.create_from_documents(session_id, net_doc,
                                                         solver_doc)
        except (prototext.PrototextError, session_engine.SessionError) as exc:
            error("BAD_REQUEST", str(exc))
            return
        seed = body.get("seed", 1)
        self._backends[session_id] = self.backend_factory(seed)
        reply(SESSION_CREATED, {"sessionId": session.id})

    def _status_body(self, session_id: int) -> dict:
        session = self.manager.get(session_id)
        snapshots = session.snapshots
        return {
            "sessionId": session.id,
            "state": session.state,
            "iteration": session.iteration,
            "latestSnapshot": snapshots[-1].iteration if snapshots else None,
        }

    def _control(self, kind: int, body, reply, error) -> None:
        session_id = int(body.get("sessionId", -1))
        if kind == START:
            backend = self._backends.get(session_id)
            if backend is None:
                backend = self.backend_factory(body.get("seed", 1))
                self._backends[session_id] = backend
            self.manager.start(session_id, backend)
        elif kind == PAUSE:
            self.manager.pause(session_id, at_iteration=body.get("atIteration"))
        elif kind == RESUME:
            backend = self._backends.get(session_id)
            if backend is None:
                backend = self.backend_factory(body.get("seed", 1))
                self._backends[session_id] = backend
            self.manager.resume(session_id, backend)
        elif kind == DELETE_SESSION:
            self.manager.delete(session_id)
            self._backends.pop(session_id, None)
            reply(STATUS, {"sessionId": session_id, "state": "DELETED",
                           "iteration": 0, "latestSnapshot": None})
            return
        reply(STATUS, self._status_body(session_id))

    def _status(self, body, reply, error) -> None:
        reply(STATUS, self._status_body(int(body.get("sessionId", -1))))

    def _subscribe_log(self, sock, send_lock, body, error) -> None:
        session_id = int(body.get("sessionId", -1))
        session = self.manager.get(session_id)  # raises NoSuchSession
        offset = int(body.get("lastAckedOffset", 0))

        def stream():
            pos = offset
            path = session.log_path
            while True:
                size = path.stat().st_size if path.exists() else 0
                if size > pos:
                    with open(path, "rb") as fh:
                        fh.seek(pos)
                        data = fh.read()
                    try:
                        send_frame(sock, Frame(LOG_CHUNK, {
                            "sessionId": session_id, "startOffset": pos,
                        }, data), send_lock)
                    except (ConnectionError, OSError):
                        return
                    pos += len(data)
                else:
                    state = self.manager.get(session_id).state
                    if state in ("FINISHED", "FAILED", "PAUSED", "WAITING"):
                        try:
                            send_frame(sock, Frame(LOG_CHUNK, {
                                "sessionId": session_id, "startOffset": pos,
                                "eof": True,
                            }, b""), send_lock)
                        except (ConnectionError, OSError):
                            pass
                        return
                    time.sleep(0.05)

        threading.Thread(target=stream, daemon=True).start()

    def _fetch_snapshot(self, body, reply, error) -> None:
        session = self.manager.get(int(body.get("sessionId", -1)))
        iteration = int(body.get("iteration", -1))
        match = [s for s in session.snapshots if s.iteration == iteration]
        if not match:
            error("BAD_REQUEST", f"no snapshot at iteration {iteration}")
            return
        data = match[0].weights_path.read_bytes()
        total = len(data)
        offset = 0
        while True:
            chunk = data[offset:offset + SNAPSHOT_CHUNK]
            last = offset + len(chunk) >= total
            reply(SNAPSHOT_DATA, {
                "sessionId": session.id, "iteration": iteration,
                "offset": offset, "totalLength": total, "last": last,
            }, chunk)
            offset += len(chunk)
            if last:
                break


def agent_serve(root_dir, port: int, host: str = "127.0.0.1",
                backend_factory=None) -> Agent:
    """Start an agent; returns the running instance (stop() to shut down)."""
    return Agent(root_dir, port=port, host=host,
                 backend_factory=backend_factory).start()


# ---------------------------------------------------------------------------
# Client

class AgentClient:
    """One framed connection to an agent.

    Requests are serialized: each gets exactly one non-LOG_CHUNK reply.
    LOG_CHUNK frames are routed to the active log subscription.
    """

    def __init__(self, address: str, timeout: float = 10.0):
        host, _, port = address.rpartition(":")
        self.address = address
        self._sock = socket.create_connection((host, int(port)), timeout=timeout)
        self._send_lock = threading.Lock()
        self._request_lock = threading.Lock()
        self._replies: "queue.Queue[Frame]" = queue.Queue()
        self._log_chunks: "queue.Queue[Frame]" = queue.Queue()
        self._closed = False
        self._subscribing = False
        self._reader = threading.Thread(target=self._read_loop, daemon=True)

        send_frame(self._sock, Frame(HELLO, {"version": PROTOCOL_VERSION}),
                   self._send_lock)
        ack = read_frame(self._sock)
        if ack.kind == ERROR:
            raise RemoteError(ack.body.get("code", "?"), ack.body.get("message", ""))
        if ack.kind != HELLO_ACK:
            raise ProtocolError(f"expected HELLO_ACK, got 0x{ack.kind:02x}")
        self.host = RemoteHost(host_id=ack.body.get("hostId", address),
                               address=address,
                               protocol_version=ack.body.get("version", 0),
                               last_seen=time.time())
        self._reader.start()

    def close(self) -> None:
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _read_loop(self) -> None:
        try:
            while True:
                frame = read_frame(self._sock)
                if frame.kind == LOG_CHUNK or (frame.kind == ERROR
                                               and self._subscribing):
                    self._log_chunks.put(frame)
                else:
                    self._replies.put(frame)
        except (ConnectionLost, ConnectionError, OSError):
            sentinel = Frame(ERROR, {"code": "CONNECTION_LOST",
                                     "message": "connection lost"})
            self._replies.put(sentinel)
            self._log_chunks.put(sentinel)

    def request(self, kind: int, body: dict, attachment: bytes | None = None,
                timeout: float = 30.0) -> Frame:
        with self._request_lock:
            send_frame(self._sock, Frame(kind, body, attachment), self._send_lock)
            reply = self._replies.get(timeout=timeout)
        if reply.kind == ERROR:
            code = reply.body.get("code", "?")
            if code == "CONNECTION_LOST":
                raise ConnectionLost("connection lost")
            raise RemoteError(code, reply.body.get("message", ""))
        return reply

    # -- convenience wrappers ---------------------------------------------------

    def ping(self) -> None:
        self.request(PING, {})
        self.host.last_seen = time.time()

    def list_datasets(self) -> list[dict]:
        reply = self.request(LIST_DATASETS, {})
        self.host.datasets = reply.body.get("datasets", [])
        return self.host.datasets

    def probe_dataset(self, dataset_id: str) -> dict:
        return self.request(PROBE_DATASET, {"id": dataset_id}).body

    def create_session(self, net_text: str, solver_text: str,
                       seed: int | None = None) -> int:
        body = {"net": net_text, "solver": solver_text}
        if seed is not None:
            body["seed"] = seed
        return self.request(CREATE_SESSION, body).body["sessionId"]

    def control(self, session_id: int, action: str, **extra) -> dict:
        kinds = {"start": START, "pause": PAUSE, "resume": RESUME,
                 "delete": DELETE_SESSION}
        body = {"sessionId": session_id, **extra}
        return self.request(kinds[action], body, timeout=120.0).body

    def status(self, session_id: int) -> dict:
        return self.request(STATUS_REQ, {"sessionId": session_id}).body

    def subscribe_log(self, session_id: int, last_acked_offset: int = 0):
        """Yield (start_offset, bytes, eof) triples until the terminal chunk."""
        self._subscribing = True
        with self._request_lock:
            send_frame(self._sock, Frame(SUBSCRIBE_LOG, {
                "sessionId": session_id, "lastAckedOffset": last_acked_offset,
            }), self._send_lock)
        try:
            while True:
                frame = self._log_chunks.get(timeout=60.0)
                if frame.kind == ERROR:
                    code = frame.body.get("code", "?")
                    if code == "CONNECTION_LOST":
                        raise ConnectionLost("connection lost")
                    raise RemoteError(code, frame.body.get("message", ""))
                eof = bool(frame.body.get("eof"))
                yield frame.body["startOffset"], frame.attachment or b"", eof
                if eof:
                    return
        finally:
            self._subscribing = False

    def fetch_snapshot(self, session_id: int, iteration: int) -> bytes:
        parts: list[bytes] = []
        with self._request_lock:
            send_frame(self._sock, Frame(FETCH_SNAPSHOT, {
                "sessionId": session_id, "iteration": iteration,
            }), self._send_lock)
            while True:
                frame = self._replies.get(timeout=30.0)
                if frame.kind == ERROR:
                    raise RemoteError(frame.body.get("code", "?"),
                                      frame.body.get("message", ""))
                parts.append(frame.attachment or b"")
                if frame.body.get("last", True):
                    break
        return b"".join(parts)


def client_connect(address: str) -> AgentClient:
    return AgentClient(address)
