"""Retrieval: embedding, exact cosine search, and leakage filtering.

The built-in embedder hashes byte n-grams (n = 1..3) of the token sequence
into a fixed number of buckets and L2-normalizes the counts; it is fully
deterministic, which the engine's reproducibility guarantees rely on.  An
external embedding service can stand in through RemoteEmbedder, which speaks
a one-round request/response exchange.

Search is an exact full scan by cosine score.  The overlap metric bounds how
much of a candidate reference is duplicated inside a probe text; retrieval
results at or above the threshold are dropped by filter_leakage to keep
evaluation probes from answering themselves.
"""

from __future__ import annotations

import hashlib
import socket
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    CompatibilityError,
    FormatError,
    InputError,
    NotFoundError,
    ShapeError,
    TransportError,
    UsageError,
)

INDEX_MAGIC = b"EM3I"
INDEX_VERSION = 1

EMBED_DIM = 256
_NGRAM_MAX = 3

LEAKAGE_THRESHOLD = 2.0 / 3.0


class NgramEmbedder:
    """Hashed bag of token n-grams, L2-normalized."""

    def __init__(self, dim: int = EMBED_DIM, max_n: int = _NGRAM_MAX):
        if dim < 1 or max_n < 1:
            raise UsageError("dim and max_n must be >= 1")
        self.dim = dim
        self.max_n = max_n

    def embed(self, tokens) -> np.ndarray:
        tokens = [int(t) for t in tokens]
        if not tokens:
            raise InputError("cannot embed an empty token sequence")
        counts = np.zeros(self.dim, np.float64)
        for n in range(1, self.max_n + 1):
            for i in range(len(tokens) - n + 1):
                gram = struct.pack(f"<B{n}I", n, *tokens[i:i + n])
                digest = hashlib.blake2b(gram, digest_size=8).digest()
                counts[int.from_bytes(digest, "little") % self.dim] += 1.0
        vec = counts / np.linalg.norm(counts)
        return vec.astype(np.float32)


class RemoteEmbedder:
    """Client for an external embedding service with the same contract.

    One exchange per call: request = u32 token count then the token ids as
    u32 little-endian; response = dim f32 values.  The endpoint is a
    host:port string.
    """

    def __init__(self, endpoint: str, dim: int = EMBED_DIM, timeout: float = 5.0):
        self.host, self.port = parse_endpoint(endpoint)
        self.dim = dim
        self.timeout = timeout

    def embed(self, tokens) -> np.ndarray:
        tokens = [int(t) for t in tokens]
        if not tokens:
            raise InputError("cannot embed an empty token sequence")
        request = struct.pack(f"<I{len(tokens)}I", len(tokens), *tokens)
        try:
            with socket.create_connection((self.host, self.port),
                                          timeout=self.timeout) as sock:
                sock.sendall(request)
                need = self.dim * 4
                data = b""
                while len(data) < need:
                    part = sock.recv(need - len(data))
                    if not part:
                        raise TransportError("embedder closed the connection early")
                    data += part
        except OSError as exc:
            raise TransportError(f"embedder at {self.host}:{self.port}: {exc}") from exc
        vec = np.frombuffer(data, "<f4", self.dim).astype(np.float32)
        norm = float(np.linalg.norm(vec))
        if not np.isfinite(norm) or norm == 0.0:
            raise FormatError("embedder returned a non-normalizable vector")
        return vec / np.float32(norm)


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host:
        raise UsageError(f"endpoint {endpoint!r} is not host:port")
    try:
        return host, int(port)
    except ValueError:
        raise UsageError(f"endpoint port {port!r} is not an integer") from None


@dataclass
class SearchResult:
    hits: list[tuple[int, float]]  # (ref_id, cosine score), best first
    truncated: bool                # True when k exceeded the index size


class RetrievalIndex:
    """Flat exact-cosine index over unit embeddings, with the reference
    token sequences kept alongside for overlap filtering."""

    def __init__(self, dim: int = EMBED_DIM):
        self.dim = dim
        self._ids: list[int] = []
        self._tokens: dict[int, tuple[int, ...]] = {}
        self._matrix = np.zeros((0, dim), np.float32)

    def __len__(self) -> int:
        return len(self._ids)

    def ids(self) -> list[int]:
        return list(self._ids)

    def add(self, ref_id: int, tokens, embedding: np.ndarray) -> None:
        if ref_id in self._tokens:
            raise UsageError(f"duplicate ref_id {ref_id}")
        vec = np.asarray(embedding, np.float32)
        if vec.shape != (self.dim,):
            raise ShapeError(f"embedding must be ({self.dim},), got {vec.shape}")
        norm = float(np.linalg.norm(vec))
        if abs(norm - 1.0) > 1e-5:
            raise ShapeError(f"embedding norm {norm} is not 1")
        self._ids.append(int(ref_id))
        self._tokens[int(ref_id)] = tuple(int(t) for t in tokens)
        self._matrix = np.vstack([self._matrix, vec[None, :]])

    @classmethod
    def build(cls, entries, embedder) -> "RetrievalIndex":
        """entries: iterable of (ref_id, tokens)."""
        index = cls(dim=embedder.dim)
        for ref_id, tokens in entries:
            index.add(ref_id, tokens, embedder.embed(tokens))
        return index

    def tokens(self, ref_id: int) -> tuple[int, ...]:
        try:
            return self._tokens[ref_id]
        except KeyError:
            raise NotFoundError(f"ref id {ref_id} not in index") from None

    def search(self, query: np.ndarray, k: int) -> SearchResult:
        """Exact top-k by cosine score, descending, ties to the lower id."""
        if k < 1:
            raise UsageError("k must be >= 1")
        if len(self._ids) == 0:
            raise UsageError("index is empty")
        q = np.asarray(query, np.float32)
        if q.shape != (self.dim,):
            raise ShapeError(f"query must be ({self.dim},), got {q.shape}")
        if not np.isfinite(q).all():
            raise InputError("query vector contains non-finite values")
        scores = self._matrix @ q
        ids = np.asarray(self._ids)
        order = np.lexsort((ids, -scores.astype(np.float64)))
        top = order[:min(k, len(ids))]
        hits = [(int(ids[i]), float(scores[i])) for i in top]
        return SearchResult(hits=hits, truncated=k > len(ids))

    def save(self, path) -> None:
        blob = bytearray()
        blob += INDEX_MAGIC
        blob += struct.pack("<HHQ", INDEX_VERSION, self.dim, len(self._ids))
        blob += struct.pack(f"<{len(self._ids)}Q", *self._ids)
        blob += np.ascontiguousarray(self._matrix, "<f4").tobytes()
        for ref_id in self._ids:
            seq = self._tokens[ref_id]
            blob += struct.pack(f"<I{len(seq)}I", len(seq), *seq)
        with open(path, "wb") as f:
            f.write(blob)

    @classmethod
    def load(cls, path) -> "RetrievalIndex":
        with open(path, "rb") as f:
            buf = f.read()
        if buf[:4] != INDEX_MAGIC:
            raise FormatError("not an index file (bad magic)")
        version, dim, count = struct.unpack_from("<HHQ", buf, 4)
        if version != INDEX_VERSION:
            raise CompatibilityError(f"index file version {version}, expected "
                                     f"{INDEX_VERSION}")
        offset = 4 + struct.calcsize("<HHQ")
        if offset + count * 8 + count * dim * 4 > len(buf):
            raise FormatError("index file truncated")
        ids = struct.unpack_from(f"<{count}Q", buf, offset)
        offset += count * 8
        matrix = np.frombuffer(buf, "<f4", count * dim, offset) \
            .reshape(count, dim).astype(np.float32)
        offset += count * dim * 4
        index = cls(dim=dim)
        index._ids = [int(i) for i in ids]
        index._matrix = matrix
        for ref_id in index._ids:
            if offset + 4 > len(buf):
                raise FormatError("index file truncated in token sequences")
            (n,) = struct.unpack_from("<I", buf, offset)
            offset += 4
            if offset + n * 4 > len(buf):
                raise FormatError("index file truncated in token sequences")
            index._tokens[ref_id] = struct.unpack_from(f"<{n}I", buf, offset)
            offset += n * 4
        if offset != len(buf):
            raise FormatError(f"{len(buf) - offset} trailing bytes in index file")
        return index


def overlap(t, r) -> float:
    """Windowed longest-common-subsequence ratio in [0, 1].

    Equals max N/|r| over common subsequences of t and r whose matched
    indices in t span at most 2|r|; computed as LCS DP over contiguous
    windows of t of length 2|r|+1 (a span of <= 2|r| fits exactly inside
    2|r|+1 consecutive positions).
    """
    t = [int(x) for x in t]
    r = [int(x) for x in r]
    lr = len(r)
    if lr == 0:
        raise InputError("empty reference sequence")
    lt = len(t)
    if lt == 0:
        return 0.0
    width = 2 * lr + 1
    starts = range(lt - width + 1) if lt > width else (0,)
    best = 0
    for start in starts:
        window = t[start:start + width]
        prev = [0] * (lr + 1)
        for a in window:
            cur = [0]
            append = cur.append
            diag = prev[0]
            for j, b in enumerate(r, 1):
                up = prev[j]
                if a == b:
                    v = diag + 1
                else:
                    v = up if up >= cur[j - 1] else cur[j - 1]
                append(v)
                diag = up
            prev = cur
        if prev[lr] > best:
            best = prev[lr]
            if best == lr:
                break
    return best / lr


def filter_leakage(index: RetrievalIndex, candidates, probe,
                   threshold: float = LEAKAGE_THRESHOLD):
    """Drop (id, score) candidates whose reference overlaps the probe at or
    above the threshold; order is preserved.  Returns (kept, n_removed)."""
    if not 0.0 < threshold <= 1.0:
        raise UsageError(f"threshold {threshold} outside (0, 1]")
    probe = [int(x) for x in probe]
    kept = []
    removed = 0
    for ref_id, score in candidates:
        if overlap(probe, index.tokens(ref_id)) >= threshold:
            removed += 1
        else:
            kept.append((ref_id, score))
    return kept, removed


def serve_embedder(embedder, host: str = "127.0.0.1", port: int = 0):
    """Run an embedding service for RemoteEmbedder; returns the bound
    (server socket, host, port).  Intended for tests and local pipelines."""
    srv = socket.create_server((host, port))
    return srv, srv.getsockname()[0], srv.getsockname()[1]


def embedder_serve_once(srv_socket, embedder) -> None:
    """Accept one connection and answer one embed request."""
    conn, _ = srv_socket.accept()
    with conn:
        head = _read_exact(conn, 4)
        (count,) = struct.unpack("<I", head)
        body = _read_exact(conn, count * 4)
        tokens = struct.unpack(f"<{count}I", body)
        vec = embedder.embed(tokens)
        conn.sendall(np.ascontiguousarray(vec, "<f4").tobytes())


def _read_exact(conn, n: int) -> bytes:
    data = b""
    while len(data) < n:
        part = conn.recv(n - len(data))
        if not part:
            raise TransportError("connection closed mid-request")
        data += part
    return data
