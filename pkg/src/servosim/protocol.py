"""Estimator wire protocol: length-prefixed JSON frames over TCP.

Frame: 4-byte big-endian unsigned payload length, then a UTF-8 JSON object.
Handshake: client sends {"op":"hello","schema":1}; the server answers
{"op":"hello","schema":1,"name":...}. Estimate requests carry a PNG-base64
image and are answered with a 6-number pose in file units (m, deg) or an
error, correlated by id. One request is in flight per connection.
"""

from __future__ import annotations

import base64
import hashlib
import json
import socket
import struct
import threading

from servosim.errors import (
    ConnectionLost,
    EstimatorTimeout,
    EstimatorUnreachable,
    ProtocolError,
)
from servosim.image import ImageBuffer, decode_png, encode_png

SCHEMA = 1
MAX_FRAME_BYTES = 16 * 1024 * 1024
DEFAULT_TIMEOUT = 2.0


def send_frame(sock: socket.socket, payload: dict) -> None:
    data = json.dumps(payload, separators=(",", ":")).encode("utf-8")
    if len(data) > MAX_FRAME_BYTES:
        raise ProtocolError(f"frame of {len(data)} bytes exceeds the {MAX_FRAME_BYTES} limit")
    try:
        sock.sendall(struct.pack(">I", len(data)) + data)
    except (BrokenPipeError, ConnectionResetError, OSError) as e:
        raise ConnectionLost(f"send failed: {e}")


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        try:
            chunk = sock.recv(n - got)
        except socket.timeout:
            raise EstimatorTimeout("no reply within the deadline")
        except (ConnectionResetError, OSError) as e:
            raise ConnectionLost(f"recv failed: {e}")
        if not chunk:
            raise ConnectionLost("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def recv_frame(sock: socket.socket) -> dict:
    header = _recv_exact(sock, 4)
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME_BYTES:
        raise ProtocolError(f"announced frame of {length} bytes exceeds the limit")
    payload = _recv_exact(sock, length)
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"malformed frame payload: {e}")
    if not isinstance(obj, dict):
        raise ProtocolError("frame payload must be a JSON object")
    return obj


def image_to_wire(img: ImageBuffer) -> str:
    return base64.b64encode(encode_png(img)).decode("ascii")


def image_from_wire(data: str) -> ImageBuffer:
    try:
        raw = base64.b64decode(data, validate=True)
        return decode_png(raw)
    except Exception as e:
        raise ProtocolError(f"undecodable image payload: {e}")


def image_digest(img: ImageBuffer) -> str:
    """Digest of the raw decoded pixel bytes, for loopback fidelity checks."""
    return hashlib.sha256(img.tobytes()).hexdigest()


class EstimatorClient:
    """Blocking request/response client for the estimator protocol."""

    def __init__(self, host: str, port: int, timeout: float = DEFAULT_TIMEOUT):
        self.address = (host, port)
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._next_id = 1
        self.server_name = None

    def connect(self) -> None:
        try:
            sock = socket.create_connection(self.address, timeout=self.timeout)
        except OSError as e:
            raise EstimatorUnreachable(f"cannot connect to {self.address}: {e}")
        sock.settimeout(self.timeout)
        self._sock = sock
        send_frame(sock, {"op": "hello", "schema": SCHEMA})
        reply = recv_frame(sock)
        if reply.get("op") != "hello" or reply.get("schema") != SCHEMA:
            self.close()
            raise ProtocolError(f"unexpected handshake reply: {reply}")
        self.server_name = reply.get("name")

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    @property
    def connected(self) -> bool:
        return self._sock is not None

    def _round_trip(self, request: dict) -> dict:
        if self._sock is None:
            raise ConnectionLost("client is not connected")
        send_frame(self._sock, request)
        return recv_frame(self._sock)

    def request_estimate(
        self,
        image: ImageBuffer,
        truth_file_units: list[float] | None = None,
        phase: str | None = None,
    ) -> tuple[list[float], dict]:
        """Send an estimate request; returns (pose in file units, full reply)."""
        req_id = self._next_id
        self._next_id += 1
        request = {
            "id": req_id,
            "op": "estimate",
            "width": image.width,
            "height": image.height,
            "encoding": "png-base64",
            "image": image_to_wire(image),
        }
        if truth_file_units is not None:
            request["truth"] = [float(v) for v in truth_file_units]
        if phase is not None:
            request["phase"] = phase
        reply = self._round_trip(request)
        if reply.get("id") != req_id:
            raise ProtocolError(f"reply id {reply.get('id')} does not match request {req_id}")
        if "error" in reply:
            raise ProtocolError(f"estimator error: {reply['error']}")
        pose = reply.get("pose")
        if (
            not isinstance(pose, list)
            or len(pose) != 6
            or not all(isinstance(v, (int, float)) for v in pose)
        ):
            raise ProtocolError(f"reply pose must be a 6-number list, got {pose!r}")
        return [float(v) for v in pose], reply


class EstimatorServer:
    """Sequential estimator service: one connection, one request at a time.

    ``handler(request) -> dict`` receives every non-hello frame and returns
    the reply payload. Malformed frames are answered with an error frame and
    the connection stays open; new connections are accepted after a client
    disconnects.
    """

    def __init__(self, handler, name: str, host: str = "127.0.0.1", port: int = 0):
        self.handler = handler
        self.name = name
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(1)
        self._listener.settimeout(0.1)
        self.port = self._listener.getsockname()[1]
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def serve_forever(self) -> None:
        try:
            while not self._stop.is_set():
                try:
                    conn, _ = self._listener.accept()
                except socket.timeout:
                    continue
                with conn:
                    conn.settimeout(0.1)
                    self._serve_connection(conn)
        finally:
            self._listener.close()

    def _serve_connection(self, conn: socket.socket) -> None:
        while not self._stop.is_set():
            try:
                request = recv_frame(conn)
            except EstimatorTimeout:
                continue
            except ConnectionLost:
                return
            except ProtocolError as e:
                try:
                    send_frame(conn, {"id": 0, "error": str(e)})
                    continue
                except ConnectionLost:
                    return
            try:
                self._answer(conn, request)
            except ConnectionLost:
                return

    def _answer(self, conn: socket.socket, request: dict) -> None:
        if request.get("op") == "hello":
            if request.get("schema") != SCHEMA:
                send_frame(conn, {"op": "hello", "error": "unsupported schema"})
            else:
                send_frame(conn, {"op": "hello", "schema": SCHEMA, "name": self.name})
            return
        req_id = request.get("id")
        req_id = req_id if isinstance(req_id, int) else 0
        try:
            reply = self.handler(request)
        except ProtocolError as e:
            reply = {"error": str(e)}
        except Exception as e:  # service stays up whatever the handler does
            reply = {"error": f"internal error: {e}"}
        reply = dict(reply)
        reply["id"] = req_id
        send_frame(conn, reply)

    def start(self) -> "EstimatorServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
            self._thread = None
