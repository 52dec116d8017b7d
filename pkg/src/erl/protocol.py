"""Newline-delimited JSON request/response transport for external policies and retrievers.

Endpoints are written as ``tcp://HOST:PORT`` (one connection per request) or
``stdio:COMMAND`` (a long-lived child process speaking one JSON object per
line on stdin/stdout). Requests carry ``kind`` (``"generate"`` or
``"retrieve"``), ``attempt`` and ``episode_nonce`` plus the kind-specific fields
``stage``/``context``/``round`` or ``query``/``k``. Responses carry ``text`` or
``documents``.
"""

from __future__ import annotations

import itertools
import json
import logging
import selectors
import shlex
import socket
import socketserver
import subprocess
import sys
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, TextIO

log = logging.getLogger(__name__)

Handler = Callable[[dict], dict]


class TransportError(RuntimeError):
    """The endpoint could not be reached or did not answer in time."""


class MalformedResponse(ValueError):
    pass


def encode(obj: dict) -> bytes:
    return (json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n").encode("utf-8")


@dataclass
class TransportStats:
    requests: int = 0
    retries: int = 0
    failures: list[str] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record_retry(self, reason: str) -> None:
        with self._lock:
            self.retries += 1
            self.failures.append(reason)


class _TcpTransport:
    def __init__(self, host: str, port: int):
        self.host, self.port = host, port

    def roundtrip(self, payload: dict, timeout: float) -> dict:
        with socket.create_connection((self.host, self.port), timeout=timeout) as sock:
            sock.settimeout(timeout)
            sock.sendall(encode(payload))
            buf = b""
            while not buf.endswith(b"\n"):
                chunk = sock.recv(65536)
                if not chunk:
                    raise ConnectionError("connection closed before a full response")
                buf += chunk
        return json.loads(buf.decode("utf-8"))

    def close(self) -> None:
        pass


class _StdioTransport:
    def __init__(self, command: str):
        self.command = command
        self._proc: Optional[subprocess.Popen] = None
        self._lock = threading.Lock()
        self._seq = itertools.count(1)

    def _ensure(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(shlex.split(self.command), stdin=subprocess.PIPE,
                                          stdout=subprocess.PIPE, bufsize=0)
        return self._proc

    def roundtrip(self, payload: dict, timeout: float) -> dict:
        with self._lock:
            proc = self._ensure()
            seq = next(self._seq)
            proc.stdin.write(encode({**payload, "seq": seq}))
            proc.stdin.flush()
            sel = selectors.DefaultSelector()
            sel.register(proc.stdout, selectors.EVENT_READ)
            try:
                while True:
                    if not sel.select(timeout):
                        raise TimeoutError(f"no response within {timeout}s")
                    line = proc.stdout.readline()
                    if not line:
                        raise ConnectionError("worker process exited")
                    resp = json.loads(line.decode("utf-8"))
                    if resp.get("seq", seq) == seq:  # stale replies to timed-out requests are skipped
                        return resp
            finally:
                sel.close()

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()


class JsonLineClient:
    """Request/response client with a per-request timeout and transport retries."""

    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 1):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.stats = TransportStats()
        if endpoint.startswith("tcp://"):
            host, _, port = endpoint[len("tcp://"):].rpartition(":")
            if not host or not port.isdigit():
                raise ValueError(f"bad tcp endpoint {endpoint!r}")
            self._transport = _TcpTransport(host, int(port))
        elif endpoint.startswith("stdio:"):
            self._transport = _StdioTransport(endpoint[len("stdio:"):])
        else:
            raise ValueError(f"unknown endpoint scheme in {endpoint!r} (expected tcp:// or stdio:)")

    def request(self, payload: dict) -> dict:
        with self.stats._lock:
            self.stats.requests += 1
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._transport.roundtrip(payload, self.timeout)
            except (OSError, TimeoutError, ConnectionError, json.JSONDecodeError) as exc:
                last = exc
                if attempt < self.retries:
                    self.stats.record_retry(f"{payload.get('episode_nonce')}: {exc!r}")
                    log.warning("transport retry %d for %s: %s", attempt + 1, self.endpoint, exc)
                continue
            if not isinstance(resp, dict):
                raise MalformedResponse("response is not a JSON object")
            return resp
        raise TransportError(f"{self.endpoint}: {last!r}")

    def close(self) -> None:
        self._transport.close()


# -- serving side ------------------------------------------------------------


class _LineHandler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            if not raw.strip():
                continue
            try:
                resp = self.server.handler(json.loads(raw.decode("utf-8")))
            except Exception as exc:  # report to the client instead of dropping the line
                resp = {"error": repr(exc)}
            self.wfile.write(encode(resp))
            self.wfile.flush()


class JsonLineServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, handler: Handler, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _LineHandler)
        self.handler = handler
        self._thread: Optional[threading.Thread] = None

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"tcp://{host}:{port}"

    def start(self) -> "JsonLineServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve_stdio(handler: Handler, stdin: TextIO = sys.stdin, stdout: TextIO = sys.stdout) -> None:
    """Answer one request per input line until EOF; replies echo the request ``seq``."""
    for line in stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        resp = dict(handler(req))
        if "seq" in req:
            resp["seq"] = req["seq"]
        stdout.write(json.dumps(resp, ensure_ascii=False, sort_keys=True) + "\n")
        stdout.flush()
