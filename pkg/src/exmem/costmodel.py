"""Write/read cost accounting for the three memory formats.

For a piece of knowledge used n times, total cost = cost_write + n * cost_read.
The three formats trade these off in opposite directions:

  implicit (model parameters): writing means training on the text three or
  more times; reading is free at inference (0 is a lower bound).
  explicit memory: writing runs the reference through the memory layers
  once; reading attends to l_mem retained tokens per chunk.
  external plain text: writing is free; reading re-encodes the reference
  next to every chunk that uses it.

All formulas count 2 flops per multiply-add, quadratic attention terms at
their causal half, and are evaluated in 64-bit floats; results are reported
in TFlops.  Defaults reproduce the full-scale 2.4B shape with a 2048-token
training window.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import ModelConfig
from .errors import ConfigError

TFLOP = 1.0e12

FORMAT_IMPLICIT = "implicit"
FORMAT_EXPLICIT = "explicit"
FORMAT_EXTERNAL = "external"
FORMATS = (FORMAT_IMPLICIT, FORMAT_EXPLICIT, FORMAT_EXTERNAL)

# Tie preference: the format with the cheaper write wins an exact tie.
_TIE_ORDER = {FORMAT_EXTERNAL: 0, FORMAT_EXPLICIT: 1, FORMAT_IMPLICIT: 2}


@dataclass(frozen=True)
class CostParams:
    L: int = 44
    H: int = 40
    H_kv: int = 8
    d_h: int = 80
    W: int = 3200
    n_vocab: int = 60416
    L_mem: int = 22
    l_ref: int = 128
    l_chunk: int = 64
    l_mem: int = 8
    l_train: int = 2048

    @property
    def d(self) -> int:
        return self.H * self.d_h

    def validate(self) -> None:
        if min(self.L, self.H, self.H_kv, self.d_h, self.W, self.n_vocab,
               self.L_mem, self.l_ref, self.l_chunk, self.l_train) < 1:
            raise ConfigError("cost parameters must be >= 1")
        if self.l_mem < 0:
            raise ConfigError("l_mem must be >= 0")
        if self.L_mem > self.L:
            raise ConfigError(f"L_mem={self.L_mem} exceeds L={self.L}")

    @classmethod
    def from_model_config(cls, cfg: ModelConfig, l_train: int = 2048) -> "CostParams":
        return cls(L=cfg.L, H=cfg.H, H_kv=cfg.H_kv, d_h=cfg.d_h, W=cfg.W,
                   n_vocab=cfg.n_vocab, L_mem=cfg.L_mem, l_ref=cfg.l_ref,
                   l_chunk=cfg.l_chunk, l_mem=cfg.l_mem, l_train=l_train)


@dataclass(frozen=True)
class CostReport:
    write_implicit: float   # TFlops
    write_explicit: float
    write_external: float
    read_implicit: float
    read_explicit: float
    read_external: float
    n_lo: float
    n_hi: float


def cost_write_implicit(p: CostParams) -> float:
    """Train the reference into the weights: three passes (forward, two
    backward-sized) over all blocks plus the LM head, in TFlops."""
    p.validate()
    d = float(p.d)
    per_block = p.l_ref * (2.0 * d * d + 2.0 * d * p.d_h * p.H_kv + 3.0 * d * p.W) \
        + 2.0 * p.l_ref * (p.l_train / 2.0) * d
    flops = 3.0 * 2.0 * (p.L * per_block + p.l_ref * float(p.n_vocab) * d)
    return flops / TFLOP


def cost_write_explicit(p: CostParams) -> float:
    """Encode the reference through the memory layers once, in TFlops:
    L_mem attention sublayers, L_mem - 1 MLP sublayers."""
    p.validate()
    d = float(p.d)
    attn = p.l_ref * (2.0 * d * d + 2.0 * d * p.d_h * p.H_kv) \
        + 2.0 * (p.l_ref * p.l_ref / 2.0) * d
    flops = 2.0 * (p.L_mem * attn + (p.L_mem - 1) * (p.l_ref * 3.0 * d * p.W)
                   + p.L_mem * float(p.l_ref) * p.l_ref * d)
    return flops / TFLOP


def cost_write_external(p: CostParams) -> float:
    """Plain text costs nothing to store."""
    p.validate()
    return 0.0


def cost_read_implicit(p: CostParams) -> float:
    """Lower bound: parameters are read by inference anyway."""
    p.validate()
    return 0.0


def cost_read_explicit(p: CostParams) -> float:
    """Attend one memory's l_mem tokens from every memory layer for one
    l_chunk-token chunk, in TFlops."""
    p.validate()
    return 2.0 * p.L_mem * 2.0 * p.l_chunk * p.l_mem * float(p.d) / TFLOP


def cost_read_external(p: CostParams) -> float:
    """Re-encode the reference alongside one chunk: all L blocks with the
    chunk attending across the reference, in TFlops."""
    p.validate()
    d = float(p.d)
    attn = p.l_ref * (2.0 * d * d + 2.0 * d * p.d_h * p.H_kv) \
        + 2.0 * p.l_ref * (p.l_ref / 2.0 + p.l_chunk) * d
    flops = 2.0 * (p.L * attn + (p.L - 1) * (p.l_ref * 3.0 * d * p.W))
    return flops / TFLOP


def total_cost(p: CostParams, fmt: str, n: float) -> float:
    """cost_write + n * cost_read for the given format, in TFlops."""
    if fmt == FORMAT_IMPLICIT:
        return cost_write_implicit(p) + n * cost_read_implicit(p)
    if fmt == FORMAT_EXPLICIT:
        return cost_write_explicit(p) + n * cost_read_explicit(p)
    if fmt == FORMAT_EXTERNAL:
        return cost_write_external(p) + n * cost_read_external(p)
    raise ConfigError(f"unknown format {fmt!r}")


def advantage_interval(p: CostParams) -> tuple[float, float]:
    """Usage-count interval (n_lo, n_hi) on which explicit memory is the
    cheapest format: n_lo = w_e / (r_x - r_e), n_hi = (w_i - w_e) / r_e."""
    w_i = cost_write_implicit(p)
    w_e = cost_write_explicit(p)
    r_e = cost_read_explicit(p)
    r_x = cost_read_external(p)
    n_lo = w_e / (r_x - r_e) if r_x > r_e else float("inf")
    n_hi = (w_i - w_e) / r_e if r_e > 0 else float("inf")
    return n_lo, n_hi


def optimal_format(p: CostParams, n: float) -> tuple[str, tuple[float, float]]:
    """Cheapest format at usage count n, plus the explicit-advantage interval."""
    if n < 0:
        raise ConfigError("usage count n must be >= 0")
    costs = {fmt: total_cost(p, fmt, n) for fmt in FORMATS}
    best = min(FORMATS, key=lambda f: (costs[f], _TIE_ORDER[f]))
    return best, advantage_interval(p)


def cost_report(p: CostParams) -> CostReport:
    n_lo, n_hi = advantage_interval(p)
    return CostReport(
        write_implicit=cost_write_implicit(p),
        write_explicit=cost_write_explicit(p),
        write_external=cost_write_external(p),
        read_implicit=cost_read_implicit(p),
        read_explicit=cost_read_explicit(p),
        read_external=cost_read_external(p),
        n_lo=n_lo, n_hi=n_hi,
    )


def log_range(start: float, stop: float, points: int) -> list[float]:
    """Geometrically spaced n values from start to stop inclusive."""
    if start <= 0 or stop <= start or points < 2:
        raise ConfigError("need 0 < start < stop and points >= 2")
    ratio = (stop / start) ** (1.0 / (points - 1))
    return [start * ratio ** i for i in range(points)]


def emit_curves(p: CostParams, n_values) -> list[tuple]:
    """Rows (n, c_implicit, c_explicit, c_external, argmin format) for each
    usage count; argmin matches optimal_format at every row."""
    rows = []
    for n in n_values:
        n = float(n)
        fmt, _ = optimal_format(p, n)
        rows.append((n,
                     total_cost(p, FORMAT_IMPLICIT, n),
                     total_cost(p, FORMAT_EXPLICIT, n),
                     total_cost(p, FORMAT_EXTERNAL, n),
                     fmt))
    return rows
