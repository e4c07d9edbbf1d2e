"""Score-only access to a victim model, with exact query metering."""

from __future__ import annotations

import socket
import socketserver
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from leba import nets
from leba.tensor import ContractError, gaussian_kernel, smooth


class BudgetExceeded(RuntimeError):
    """The oracle's query budget is spent."""


class MalformedRequest(ValueError):
    """A query image does not fit the victim's input."""


@dataclass(frozen=True)
class OracleResponse:
    probs: np.ndarray
    query_index: int


@dataclass(frozen=True)
class DefenseSpec:
    kind: str = "none"  # none | quantize | blur
    levels: int = 256
    size: int = 3
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "quantize", "blur"):
            raise ContractError(f"unknown defense {self.kind!r}")
        if self.kind == "quantize" and self.levels < 2:
            raise ContractError(f"quantize needs levels >= 2, got {self.levels}")

    @classmethod
    def parse(cls, text: str) -> "DefenseSpec":
        """Parse 'none', 'quantize:16' or 'blur:3:1.0'."""
        kind, *args = text.split(":")
        if kind == "quantize":
            return cls(kind, levels=int(args[0]) if args else 256)
        if kind == "blur":
            return cls(
                kind,
                size=int(args[0]) if args else 3,
                sigma=float(args[1]) if len(args) > 1 else 1.0,
            )
        return cls(kind)

    def __str__(self) -> str:
        if self.kind == "quantize":
            return f"quantize:{self.levels}"
        if self.kind == "blur":
            return f"blur:{self.size}:{self.sigma:g}"
        return "none"


def defense_transform(spec: DefenseSpec) -> Callable[[np.ndarray], np.ndarray]:
    if spec.kind == "quantize":
        L = spec.levels - 1
        return lambda x: np.round(x * L) / L
    if spec.kind == "blur":
        k = gaussian_kernel(spec.size, spec.sigma)
        return lambda x: smooth(x, k)
    return lambda x: x


class Oracle:
    """Victim behind a query counter; only probability vectors leave it.

    The model is captured in a closure so the object itself carries no
    reference to parameters.
    """

    def __init__(self, forward: Callable[[np.ndarray], np.ndarray], input_shape, max_queries=None):
        self._forward = forward
        self.input_shape = tuple(input_shape)
        self.max_queries = max_queries
        self._used = 0
        self._lock = threading.Lock()

    @property
    def used(self) -> int:
        return self._used

    def reset(self, max_queries: Optional[int] = None) -> None:
        with self._lock:
            self._used = 0
            self.max_queries = max_queries

    def query(self, X: np.ndarray) -> OracleResponse:
        X = np.asarray(X, dtype=np.float64)
        if X.shape != self.input_shape:
            raise MalformedRequest(f"query shape {X.shape} does not match {self.input_shape}")
        with self._lock:
            if self.max_queries is not None and self._used >= self.max_queries:
                raise BudgetExceeded(f"budget of {self.max_queries} queries exhausted")
            self._used += 1
            index = self._used
        return OracleResponse(self._forward(X), index)


def wrap_defense(victim: nets.Model, spec: DefenseSpec = DefenseSpec(), max_queries=None) -> Oracle:
    transform = defense_transform(spec)
    model = victim.copy()

    def forward(X: np.ndarray) -> np.ndarray:
        return nets.predict(model, transform(X))

    return Oracle(forward, victim.spec.input_shape, max_queries)


def local_oracle(victim: nets.Model, max_queries=None) -> Oracle:
    return wrap_defense(victim, DefenseSpec(), max_queries)


def adversarial_train(
    spec: nets.ModelSpec,
    data: nets.LabeledDataset,
    epochs: int,
    lr: float,
    fgsm_eps: float,
    batch: int = 32,
) -> tuple[nets.Model, float]:
    """Train with half of every batch replaced by FGSM examples at ``fgsm_eps``."""
    if fgsm_eps < 0:
        raise ContractError(f"fgsm_eps must be non-negative, got {fgsm_eps}")
    return nets.train(nets.init_model(spec), data, epochs, lr, batch, fgsm_eps=fgsm_eps)


def robust_accuracy(model: nets.Model, data: nets.LabeledDataset, eps: float) -> float:
    """Accuracy on FGSM examples crafted against the model itself."""
    adv = nets.fgsm(model, data.images, data.labels, eps)
    return nets.accuracy(model, nets.LabeledDataset(adv, data.labels))


# ---------------------------------------------------------------- wire protocol
#
# request:  b"LEBA1" | 3 x u32 LE shape | prod(shape) x f64 LE pixels
# response: u8 status | u32 K | K x f64 LE probs | u64 LE query counter

WIRE_MAGIC = b"LEBA1"
STATUS_OK, STATUS_BUDGET, STATUS_MALFORMED = 0, 1, 2
MAX_PIXELS = 1 << 22


class ProtocolError(ValueError):
    """Bytes on the wire do not form a valid frame."""


def encode_request(X: np.ndarray) -> bytes:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ContractError(f"wire images are 3-D (C, H, W), got shape {X.shape}")
    return WIRE_MAGIC + struct.pack("<3I", *X.shape) + X.astype("<f8").tobytes()


def decode_request(buf: bytes) -> np.ndarray:
    if len(buf) < 17:
        raise ProtocolError(f"request header truncated at offset {len(buf)}")
    if buf[:5] != WIRE_MAGIC:
        raise ProtocolError("bad magic at offset 0")
    shape = struct.unpack("<3I", buf[5:17])
    need = 17 + 8 * int(np.prod(shape))
    if len(buf) != need:
        raise ProtocolError(f"request payload is {len(buf) - 17} bytes, expected {need - 17}")
    return np.frombuffer(buf, dtype="<f8", offset=17).reshape(shape).astype(np.float64)


def encode_response(status: int, probs: Optional[np.ndarray], counter: int) -> bytes:
    probs = np.zeros(0) if probs is None else np.asarray(probs, dtype=np.float64)
    return (
        struct.pack("<BI", status, probs.size)
        + probs.astype("<f8").tobytes()
        + struct.pack("<Q", counter)
    )


def decode_response(buf: bytes) -> tuple[int, np.ndarray, int]:
    if len(buf) < 5:
        raise ProtocolError(f"response header truncated at offset {len(buf)}")
    status, k = struct.unpack("<BI", buf[:5])
    if len(buf) != 5 + 8 * k + 8:
        raise ProtocolError(f"response is {len(buf)} bytes, expected {5 + 8 * k + 8}")
    probs = np.frombuffer(buf, dtype="<f8", offset=5, count=k).astype(np.float64)
    (counter,) = struct.unpack("<Q", buf[5 + 8 * k :])
    return status, probs, counter


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    """Read exactly n bytes; b"" on clean EOF before the first byte."""
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 16))
        if not chunk:
            if got == 0:
                return b""
            raise ProtocolError(f"connection closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def _drain(sock: socket.socket) -> None:
    """Discard whatever the peer has already sent."""
    sock.settimeout(0.05)
    try:
        while sock.recv(1 << 16):
            pass
    except (socket.timeout, BlockingIOError):
        pass


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        sock: socket.socket = self.request
        oracle: Oracle = self.server.oracle
        while True:
            sock.settimeout(None)
            try:
                head = _recv_exact(sock, 5)
                if not head:
                    return
                sock.settimeout(self.server.frame_timeout)
                if head != WIRE_MAGIC:
                    raise ProtocolError("bad magic at offset 0")
                shape = struct.unpack("<3I", _recv_exact(sock, 12))
                n = int(np.prod(shape))
                if n > MAX_PIXELS:
                    raise ProtocolError(f"image of {n} pixels exceeds {MAX_PIXELS}")
                X = np.frombuffer(_recv_exact(sock, 8 * n), dtype="<f8").reshape(shape)
            except (ProtocolError, socket.timeout):
                _drain(sock)
                sock.settimeout(None)
                sock.sendall(encode_response(STATUS_MALFORMED, None, oracle.used))
                continue
            except OSError:
                return
            sock.settimeout(None)
            try:
                resp = oracle.query(X.astype(np.float64))
                out = encode_response(STATUS_OK, resp.probs, resp.query_index)
            except BudgetExceeded:
                out = encode_response(STATUS_BUDGET, None, oracle.used)
            except MalformedRequest:
                out = encode_response(STATUS_MALFORMED, None, oracle.used)
            sock.sendall(out)


class OracleServer(socketserver.ThreadingTCPServer):
    """Serves one oracle; every connection shares its counter."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, oracle: Oracle, host: str = "127.0.0.1", port: int = 0, frame_timeout: float = 1.0):
        super().__init__((host, port), _Handler)
        self.oracle = oracle
        self.frame_timeout = frame_timeout

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"


def serve(oracle: Oracle, endpoint: str = "127.0.0.1:0", background: bool = True, frame_timeout: float = 1.0):
    """Start a server for ``oracle`` at host:port (port 0 picks a free one)."""
    host, port = parse_endpoint(endpoint)
    server = OracleServer(oracle, host, port, frame_timeout)
    if background:
        threading.Thread(target=server.serve_forever, daemon=True).start()
    else:
        server.serve_forever()
    return server


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ContractError(f"endpoint must be host:port, got {endpoint!r}")
    return host or "127.0.0.1", int(port)


class RemoteOracle:
    """Client side of the wire protocol, interchangeable with ``Oracle.query``."""

    def __init__(self, endpoint: str, input_shape, timeout: float = 30.0):
        self.input_shape = tuple(input_shape)
        self._sock = socket.create_connection(parse_endpoint(endpoint), timeout=timeout)
        self.last_counter = 0

    @property
    def used(self) -> int:
        return self.last_counter

    def send_raw(self, payload: bytes) -> tuple[int, np.ndarray, int]:
        """Send arbitrary bytes as one frame and decode the reply (for protocol tests)."""
        self._sock.sendall(payload)
        head = _recv_exact(self._sock, 5)
        if not head:
            raise ProtocolError("server closed the connection")
        (k,) = struct.unpack("<I", head[1:5])
        status, probs, counter = decode_response(head + _recv_exact(self._sock, 8 * k + 8))
        self.last_counter = counter
        return status, probs, counter

    def query(self, X: np.ndarray) -> OracleResponse:
        status, probs, counter = self.send_raw(encode_request(X))
        if status == STATUS_BUDGET:
            raise BudgetExceeded(f"remote budget exhausted after {counter} queries")
        if status != STATUS_OK:
            raise MalformedRequest(f"server rejected the frame (status {status})")
        return OracleResponse(probs, counter)

    def close(self) -> None:
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
