"""TCP bank service: embedding query in, scored memory records out.

Framing (little-endian): magic "EM3W", version u16, kind u16, payload
length u32, payload.  Kinds: 1 query, 2 result, 3 error.  A query payload
is the f32 embedding followed by k as u32.  A result payload is a u32
record count then per record: id u64, score f32, blob length u32, blob,
where the blob is a bank record (same bytes as stored on disk).  An error
payload is a code u16 plus a UTF-8 message.

The server keeps connections open across queries.  A malformed payload
gets an error frame and the connection stays usable; a corrupt frame
header cannot be resynchronised, so the server answers with an error frame
and closes.
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading

import numpy as np

from .bank import MemoryBank, decode_record, encode_record
from .errors import ProtocolError, StateError, TransportError
from .retrieval import RetrievalIndex, parse_endpoint

WIRE_MAGIC = b"EM3W"
WIRE_VERSION = 1

KIND_QUERY = 1
KIND_RESULT = 2
KIND_ERROR = 3

ERR_MALFORMED = 1
ERR_VERSION = 2
ERR_UNSUPPORTED = 3
ERR_INTERNAL = 4

_HEADER = struct.Struct("<4sHHI")
MAX_PAYLOAD = 16 * 1024 * 1024

DEFAULT_TIMEOUT = 5.0


# -- frame and payload codecs -------------------------------------------


def encode_frame(kind: int, payload: bytes, version: int = WIRE_VERSION) -> bytes:
    return _HEADER.pack(WIRE_MAGIC, version, kind, len(payload)) + payload


def decode_frame(buf: bytes) -> tuple[int, bytes]:
    if len(buf) < _HEADER.size:
        raise ProtocolError("frame shorter than its header")
    magic, version, kind, length = _HEADER.unpack_from(buf)
    if magic != WIRE_MAGIC:
        raise ProtocolError("bad frame magic")
    if version != WIRE_VERSION:
        raise ProtocolError(f"unsupported wire version {version}")
    if len(buf) != _HEADER.size + length:
        raise ProtocolError("frame length does not match its header")
    return kind, buf[_HEADER.size:]


def encode_query(query: np.ndarray, k: int) -> bytes:
    vec = np.ascontiguousarray(query, dtype="<f4")
    if vec.ndim != 1:
        raise ProtocolError("query embedding must be one-dimensional")
    if k < 0:
        raise ProtocolError("k must be >= 0")
    return vec.tobytes() + struct.pack("<I", k)


def decode_query(payload: bytes) -> tuple[np.ndarray, int]:
    if len(payload) < 8 or (len(payload) - 4) % 4 != 0:
        raise ProtocolError("malformed query payload")
    (k,) = struct.unpack_from("<I", payload, len(payload) - 4)
    vec = np.frombuffer(payload[:-4], dtype="<f4").copy()
    return vec, k


def encode_result(records) -> bytes:
    """records: iterable of (ref_id, score, record_blob)."""
    parts = [struct.pack("<I", len(records))]
    for ref_id, score, blob in records:
        parts.append(struct.pack("<QfI", ref_id, float(score), len(blob)))
        parts.append(blob)
    return b"".join(parts)


def decode_result(payload: bytes) -> list[tuple[int, float, bytes]]:
    if len(payload) < 4:
        raise ProtocolError("malformed result payload")
    (count,) = struct.unpack_from("<I", payload)
    offset = 4
    out = []
    for _ in range(count):
        if offset + 16 > len(payload):
            raise ProtocolError("truncated result record")
        ref_id, score, blob_len = struct.unpack_from("<QfI", payload, offset)
        offset += 16
        if offset + blob_len > len(payload):
            raise ProtocolError("truncated result record blob")
        out.append((ref_id, float(score), payload[offset:offset + blob_len]))
        offset += blob_len
    if offset != len(payload):
        raise ProtocolError("trailing bytes after result records")
    return out


def encode_error(code: int, message: str) -> bytes:
    return struct.pack("<H", code) + message.encode("utf-8")


def decode_error(payload: bytes) -> tuple[int, str]:
    if len(payload) < 2:
        raise ProtocolError("malformed error payload")
    (code,) = struct.unpack_from("<H", payload)
    return code, payload[2:].decode("utf-8", errors="replace")


# -- stream helpers -----------------------------------------------------


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def send_frame(sock: socket.socket, kind: int, payload: bytes,
               version: int = WIRE_VERSION) -> None:
    sock.sendall(encode_frame(kind, payload, version=version))


def recv_frame(sock: socket.socket) -> tuple[int, bytes]:
    header = _recv_exact(sock, _HEADER.size)
    magic, version, kind, length = _HEADER.unpack(header)
    if magic != WIRE_MAGIC:
        raise ProtocolError("bad frame magic")
    if version != WIRE_VERSION:
        raise ProtocolError(f"unsupported wire version {version}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"frame payload of {length} bytes exceeds limit")
    return kind, _recv_exact(sock, length)


# -- server -------------------------------------------------------------


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        sock = self.request
        while True:
            try:
                header = _recv_exact(sock, _HEADER.size)
            except (ConnectionError, OSError):
                return
            magic, version, kind, length = _HEADER.unpack(header)
            if magic != WIRE_MAGIC or length > MAX_PAYLOAD:
                # The stream cannot be resynchronised after a bad header.
                self._reply_error(sock, ERR_MALFORMED, "bad frame header")
                return
            try:
                payload = _recv_exact(sock, length)
            except (ConnectionError, OSError):
                return
            if version != WIRE_VERSION:
                self._reply_error(sock, ERR_VERSION,
                                  f"unsupported wire version {version}")
                continue
            if kind != KIND_QUERY:
                self._reply_error(sock, ERR_UNSUPPORTED,
                                  f"unsupported frame kind {kind}")
                continue
            try:
                self._answer(sock, payload)
            except (ConnectionError, OSError):
                return

    def _reply_error(self, sock, code: int, message: str) -> None:
        try:
            send_frame(sock, KIND_ERROR, encode_error(code, message))
        except OSError:
            pass

    def _answer(self, sock, payload: bytes) -> None:
        server: BankServer = self.server
        try:
            vec, k = decode_query(payload)
        except ProtocolError as exc:
            self._reply_error(sock, ERR_MALFORMED, str(exc))
            return
        if vec.shape[0] != server.index.dim:
            self._reply_error(sock, ERR_MALFORMED,
                              f"query dim {vec.shape[0]} != index dim "
                              f"{server.index.dim}")
            return
        if not np.all(np.isfinite(vec)):
            self._reply_error(sock, ERR_MALFORMED, "non-finite query embedding")
            return
        records = []
        if k > 0 and len(server.index) > 0:
            try:
                result = server.index.search(vec, k)
                for ref_id, score in result.hits:
                    blob = encode_record(server.bank.get_codes(ref_id))
                    records.append((ref_id, score, blob))
            except Exception as exc:
                self._reply_error(sock, ERR_INTERNAL, str(exc))
                return
        send_frame(sock, KIND_RESULT, encode_result(records))


class BankServer(socketserver.ThreadingTCPServer):
    """Serves bank records for nearest-embedding queries over one index."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, bank: MemoryBank, index: RetrievalIndex,
                 host: str = "127.0.0.1", port: int = 0):
        self.bank = bank
        self.index = index
        super().__init__((host, port), _Handler)
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> None:
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
            self._thread = None


def serve_bank(bank: MemoryBank, index: RetrievalIndex,
               host: str = "127.0.0.1", port: int = 0) -> BankServer:
    """Start a server thread; caller stops it with .stop()."""
    server = BankServer(bank, index, host=host, port=port)
    server.start()
    return server


# -- client -------------------------------------------------------------


class BankClient:
    """Fetches decoded explicit memories from a bank server.

    Each query opens its own connection, so a client works across server
    restarts.  Quantized records need the bank's codebooks to decode.
    """

    def __init__(self, endpoint: str, key_codebook=None, value_codebook=None,
                 timeout: float = DEFAULT_TIMEOUT):
        self.host, self.port = parse_endpoint(endpoint)
        self.key_codebook = key_codebook
        self.value_codebook = value_codebook
        self.timeout = timeout

    def query(self, embedding: np.ndarray, k: int):
        """Returns [(ref_id, score, ExplicitMemory)], best first."""
        payload = encode_query(embedding, k)
        try:
            with socket.create_connection((self.host, self.port),
                                          timeout=self.timeout) as sock:
                send_frame(sock, KIND_QUERY, payload)
                kind, reply = recv_frame(sock)
        except ProtocolError:
            raise
        except (OSError, ConnectionError) as exc:
            raise TransportError(f"bank service at {self.host}:{self.port} "
                                 f"unreachable: {exc}") from exc
        if kind == KIND_ERROR:
            code, message = decode_error(reply)
            raise ProtocolError(f"bank service error {code}: {message}")
        if kind != KIND_RESULT:
            raise ProtocolError(f"unexpected frame kind {kind}")
        out = []
        for ref_id, score, blob in decode_result(reply):
            mem = decode_record(blob, ref_id=ref_id)
            out.append((ref_id, score, self._materialise(mem)))
        return out

    def _materialise(self, mem):
        from .bank import QuantizedMemory, dequantize_memory
        if isinstance(mem, QuantizedMemory):
            if self.key_codebook is None or self.value_codebook is None:
                raise StateError("received quantized records but no codebooks "
                                 "were provided to decode them")
            return dequantize_memory(mem, self.key_codebook, self.value_codebook)
        return mem


def client_query(endpoint: str, embedding: np.ndarray, k: int,
                 key_codebook=None, value_codebook=None,
                 timeout: float = DEFAULT_TIMEOUT):
    """One-shot convenience wrapper around BankClient.query."""
    client = BankClient(endpoint, key_codebook=key_codebook,
                        value_codebook=value_codebook, timeout=timeout)
    return client.query(embedding, k)
