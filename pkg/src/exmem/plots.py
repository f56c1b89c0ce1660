"""Figure rendering for the cost and bench reports.

Uses the Agg backend so figures render to files in headless runs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .costmodel import FORMAT_EXPLICIT, FORMAT_EXTERNAL, FORMAT_IMPLICIT

_LABELS = {
    FORMAT_IMPLICIT: "implicit (weights)",
    FORMAT_EXPLICIT: "explicit (sparse KV)",
    FORMAT_EXTERNAL: "external (plain text)",
}


def save_cost_figure(rows, interval, path) -> None:
    """Total cost per format against expected reads, log-log, with the
    boundaries of the explicit-memory advantage interval marked.

    rows: (n, implicit, explicit, external, best) tuples from emit_curves.
    """
    n = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    ax.loglog(n, [r[1] for r in rows], label=_LABELS[FORMAT_IMPLICIT])
    ax.loglog(n, [r[2] for r in rows], label=_LABELS[FORMAT_EXPLICIT])
    ax.loglog(n, [r[3] for r in rows], label=_LABELS[FORMAT_EXTERNAL])
    lo, hi = interval
    for bound, name in ((lo, "n_lo"), (hi, "n_hi")):
        if bound != float("inf") and n[0] <= bound <= n[-1]:
            ax.axvline(bound, color="grey", linestyle="--", linewidth=0.8)
            ax.annotate(f"{name} = {bound:.4g}", xy=(bound, ax.get_ylim()[0]),
                        xytext=(3, 6), textcoords="offset points",
                        fontsize=8, rotation=90, va="bottom")
    ax.set_xlabel("expected reads per reference")
    ax.set_ylabel("total cost (TFLOPs)")
    ax.set_title("knowledge format cost vs expected usage")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_bench_figure(memory_runs, plain_runs, path) -> None:
    """Per-run wall times for memory and memory-free decoding.

    The first run of each series is the warmup that summaries discard.
    """
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    x_mem = range(len(memory_runs))
    x_plain = range(len(plain_runs))
    ax.plot(x_mem, memory_runs, marker="o", label="with memory")
    ax.plot(x_plain, plain_runs, marker="s", label="without memory")
    if memory_runs:
        ax.axvspan(-0.5, 0.5, color="grey", alpha=0.15, label="warmup (discarded)")
    ax.set_xlabel("run")
    ax.set_ylabel("seconds")
    ax.set_title("decode wall time per run")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
