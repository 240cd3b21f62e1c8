"""Estimator service: answers pose requests over the wire protocol.

Own implementation of the framing (4-byte big-endian length + UTF-8 JSON),
handshake, and estimate schema; one request in flight per connection,
reconnects accepted, malformed frames answered with error frames. Replies
include a digest of the decoded image pixels for transport checks. Unknown
optional request fields (e.g. "truth", "phase") are ignored.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import socket
import struct
import threading

import numpy as np
from PIL import Image

from vsregressor.model import RegressorModel

SCHEMA = 1
MAX_FRAME_BYTES = 16 * 1024 * 1024


class FrameError(Exception):
    pass


def _send(sock: socket.socket, payload: dict) -> None:
    data = json.dumps(payload, separators=(",", ":")).encode("utf-8")
    sock.sendall(struct.pack(">I", len(data)) + data)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            return None
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def _recv(sock: socket.socket):
    header = _recv_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME_BYTES:
        raise FrameError(f"frame of {length} bytes exceeds the limit")
    payload = _recv_exact(sock, length)
    if payload is None:
        return None
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FrameError(f"malformed payload: {e}")
    if not isinstance(obj, dict):
        raise FrameError("payload must be a JSON object")
    return obj


class RegressorServer:
    """Serves model predictions; conforms to the estimator protocol."""

    def __init__(self, model: RegressorModel, host: str = "127.0.0.1", port: int = 0, name: str = "vsregressor"):
        self.model = model
        self.name = name
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(1)
        self._listener.settimeout(0.1)
        self.port = self._listener.getsockname()[1]
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def _estimate(self, request: dict) -> dict:
        for key, kind in (("width", int), ("height", int), ("image", str)):
            if not isinstance(request.get(key), kind):
                return {"error": f"estimate request needs '{key}'"}
        if request.get("encoding") != "png-base64":
            return {"error": f"unsupported encoding {request.get('encoding')!r}"}
        try:
            raw = base64.b64decode(request["image"], validate=True)
            with Image.open(io.BytesIO(raw)) as img:
                gray = img.convert("L")
                arr = np.asarray(gray, dtype=np.uint8)
        except Exception as e:
            return {"error": f"undecodable image: {e}"}
        if arr.shape != (request["height"], request["width"]):
            return {
                "error": f"image is {arr.shape[1]}x{arr.shape[0]}, header says "
                f"{request['width']}x{request['height']}"
            }
        pose = self.model.predict_image(arr)
        return {
            "pose": [float(v) for v in pose],
            "image_sha256": hashlib.sha256(arr.tobytes()).hexdigest(),
        }

    def _answer(self, conn: socket.socket, request: dict) -> None:
        if request.get("op") == "hello":
            if request.get("schema") != SCHEMA:
                _send(conn, {"op": "hello", "error": "unsupported schema"})
            else:
                _send(conn, {"op": "hello", "schema": SCHEMA, "name": self.name})
            return
        req_id = request.get("id")
        req_id = req_id if isinstance(req_id, int) else 0
        if request.get("op") == "estimate":
            try:
                reply = self._estimate(request)
            except Exception as e:  # keep serving whatever happens
                reply = {"error": f"internal error: {e}"}
        else:
            reply = {"error": f"unknown op {request.get('op')!r}"}
        reply = dict(reply)
        reply["id"] = req_id
        _send(conn, reply)

    def _serve_connection(self, conn: socket.socket) -> None:
        while not self._stop.is_set():
            try:
                request = _recv(conn)
            except socket.timeout:
                continue
            except FrameError as e:
                try:
                    _send(conn, {"id": 0, "error": str(e)})
                    continue
                except OSError:
                    return
            except OSError:
                return
            if request is None:
                return
            try:
                self._answer(conn, request)
            except OSError:
                return

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

    def start(self) -> "RegressorServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
            self._thread = None
