"""Residual product quantization for memory key/value vectors.

A codebook is a learned rotation followed by staged product quantization:
level 1 codes the rotated vector, level 2 codes the residual, one byte per
subvector.  The contract at full-scale geometry is 4 + 10 = 14 code bytes
per 80-dim vector, a compression rate of 80*2/14 = 11.4 against two-byte
scalars.  Desk geometry uses 2 + 2 subvectors of 16 centroids over 16 dims.

Training is deterministic given a seed.  Encoding uses direct squared
distances (matching an exhaustive centroid scan); decoding is the inverse
rotation of the summed centroids.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, StateError, TrainingError

_KMEANS_ITERS = 25


@dataclass(frozen=True)
class QuantizerSpec:
    dim: int
    level_subvectors: tuple[int, ...]  # subvector count per residual level
    n_centroids: int = 256

    def validate(self) -> None:
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        if not self.level_subvectors:
            raise ConfigError("at least one residual level required")
        for s in self.level_subvectors:
            if s < 1 or self.dim % s != 0:
                raise ConfigError(f"subvector count {s} must divide dim {self.dim}")
        if not 2 <= self.n_centroids <= 256:
            raise ConfigError("n_centroids must be in [2, 256] (one code byte)")

    @property
    def code_bytes(self) -> int:
        return sum(self.level_subvectors)

    def compression_rate(self, bytes_per_scalar: int = 2) -> float:
        return self.dim * bytes_per_scalar / self.code_bytes

    @classmethod
    def reference(cls) -> "QuantizerSpec":
        """Full-scale geometry: 14 bytes per 80-dim vector."""
        return cls(dim=80, level_subvectors=(4, 10), n_centroids=256)

    @classmethod
    def desk(cls, dim: int = 16) -> "QuantizerSpec":
        return cls(dim=dim, level_subvectors=(2, 2), n_centroids=16)


@dataclass
class Codebook:
    spec: QuantizerSpec
    rotation: np.ndarray          # (dim, dim) f32, orthonormal
    centroids: list[np.ndarray] = field(default_factory=list)
    # per level: (n_subvectors, n_centroids, dim // n_subvectors) f32
    train_max_err: float = 0.0    # max row L2 error over the training sample
    trained: bool = False


def _nearest(rows: np.ndarray, cents: np.ndarray) -> np.ndarray:
    """Index of the closest centroid per row by direct squared distance,
    ties to the lower index.  Distances in float64 so assignment does not
    depend on summation order."""
    out = np.empty(len(rows), np.int64)
    c64 = cents.astype(np.float64)
    for start in range(0, len(rows), 1024):
        block = rows[start:start + 1024].astype(np.float64)
        diff = block[:, None, :] - c64[None, :, :]
        d2 = np.einsum("nkm,nkm->nk", diff, diff)
        out[start:start + len(block)] = np.argmin(d2, axis=1)
    return out


def _kmeans(rows: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    cents = rows[rng.choice(len(rows), size=k, replace=False)].copy()
    assign = np.full(len(rows), -1, np.int64)
    for _ in range(_KMEANS_ITERS):
        new_assign = _nearest(rows, cents)
        if (new_assign == assign).all():
            break
        assign = new_assign
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(cents, dtype=np.float64)
        np.add.at(sums, assign, rows)
        nonempty = counts > 0
        cents[nonempty] = (sums[nonempty] / counts[nonempty, None]).astype(np.float32)
    # A cluster whose members are all one identical vector gets that vector
    # verbatim, so fully degenerate inputs reconstruct exactly.
    for c in range(k):
        members = np.flatnonzero(assign == c)
        if len(members) and (rows[members] == rows[members[0]]).all():
            cents[c] = rows[members[0]]
    return cents


def _rotation_from_pca(x: np.ndarray) -> np.ndarray:
    centered = x.astype(np.float64) - x.mean(axis=0, dtype=np.float64)
    cov = centered.T @ centered / max(len(x), 1)
    if not np.isfinite(cov).all() or np.abs(cov).max() < 1e-12:
        return np.eye(x.shape[1], dtype=np.float32)
    _, vecs = np.linalg.eigh(cov)
    vecs = vecs[:, ::-1]  # descending variance
    for j in range(vecs.shape[1]):
        col = vecs[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            vecs[:, j] = -col
    return vecs.astype(np.float32)


def quantizer_train(samples: np.ndarray, spec: QuantizerSpec,
                    seed: int = 0) -> Codebook:
    """Train rotation and per-level sub-codebooks on sample vectors."""
    spec.validate()
    x = np.ascontiguousarray(samples, np.float32)
    if x.ndim != 2 or x.shape[1] != spec.dim:
        raise ShapeError(f"samples must be (N, {spec.dim}), got {x.shape}")
    if len(x) < spec.n_centroids:
        raise TrainingError(f"{len(x)} samples < {spec.n_centroids} centroids")
    rotation = _rotation_from_pca(x)
    rng = np.random.default_rng(seed)
    cb = Codebook(spec=spec, rotation=rotation)
    data = x @ rotation
    for n_sub in spec.level_subvectors:
        sub_dim = spec.dim // n_sub
        level = np.empty((n_sub, spec.n_centroids, sub_dim), np.float32)
        for s in range(n_sub):
            level[s] = _kmeans(data[:, s * sub_dim:(s + 1) * sub_dim],
                               spec.n_centroids, rng)
        cb.centroids.append(level)
        data = data - _decode_rotated(_encode_rotated(data, level), level)
    cb.trained = True
    err = x - quantizer_decode(quantizer_encode(x, cb), cb)
    cb.train_max_err = float(np.sqrt((err * err).sum(axis=1)).max())
    return cb


def _encode_rotated(y: np.ndarray, level: np.ndarray) -> np.ndarray:
    n_sub, _, sub_dim = level.shape
    codes = np.empty((len(y), n_sub), np.uint8)
    for s in range(n_sub):
        codes[:, s] = _nearest(y[:, s * sub_dim:(s + 1) * sub_dim], level[s])
    return codes


def _decode_rotated(codes: np.ndarray, level: np.ndarray) -> np.ndarray:
    n_sub, _, sub_dim = level.shape
    out = np.empty((len(codes), n_sub * sub_dim), np.float32)
    for s in range(n_sub):
        out[:, s * sub_dim:(s + 1) * sub_dim] = level[s][codes[:, s]]
    return out


def quantizer_encode(v: np.ndarray, cb: Codebook) -> np.ndarray:
    """Vector(s) -> uint8 codes of length spec.code_bytes."""
    if not cb.trained:
        raise StateError("codebook is not trained")
    v = np.asarray(v, np.float32)
    single = v.ndim == 1
    x = v[None, :] if single else v
    if x.ndim != 2 or x.shape[1] != cb.spec.dim:
        raise ShapeError(f"expected vectors of dim {cb.spec.dim}, got {v.shape}")
    y = x @ cb.rotation
    parts = []
    for level in cb.centroids:
        codes = _encode_rotated(y, level)
        parts.append(codes)
        y = y - _decode_rotated(codes, level)
    out = np.concatenate(parts, axis=1)
    return out[0] if single else out


def quantizer_decode(codes: np.ndarray, cb: Codebook) -> np.ndarray:
    """Codes -> reconstructed vector(s): inverse rotation of summed centroids."""
    if not cb.trained:
        raise StateError("codebook is not trained")
    codes = np.asarray(codes, np.uint8)
    single = codes.ndim == 1
    c = codes[None, :] if single else codes
    if c.ndim != 2 or c.shape[1] != cb.spec.code_bytes:
        raise FormatError(f"expected {cb.spec.code_bytes} code bytes, got shape "
                          f"{codes.shape}")
    y = np.zeros((len(c), cb.spec.dim), np.float32)
    offset = 0
    for level in cb.centroids:
        n_sub = level.shape[0]
        y += _decode_rotated(c[:, offset:offset + n_sub], level)
        offset += n_sub
    out = y @ cb.rotation.T
    return out[0] if single else out
