"""Report rendering: delimited outputs plus figure files.

Every run writes the same delimited trio (requests.jsonl, summary.json,
steps.csv); sweeps add candidates.csv and frontier.csv.  Figures render
through the Agg backend into the same directory unless disabled.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .metrics import CandidatePoint, RoundRecord, SummaryReport
from .orchestration import SimulationResult, StepLog
from .sweep import SweepReport

REQUESTS_FILE = "requests.jsonl"
SUMMARY_FILE = "summary.json"
STEPS_FILE = "steps.csv"
CANDIDATES_FILE = "candidates.csv"
FRONTIER_FILE = "frontier.csv"


def _record_row(r: RoundRecord) -> dict:
    row = {
        "rid": r.rid,
        "session": r.session,
        "round": r.round_idx,
        "input_len": r.input_len,
        "output_len": r.output_len,
        "prompt_tokens": r.prompt_tokens,
        "arrival_ns": r.arrival_ns,
        "enqueue_ns": r.enqueue_ns,
        "admit_ns": r.admit_ns,
        "prefill_end_ns": r.prefill_end_ns,
        "finish_ns": r.finish_ns,
        "committed": r.committed,
        "cached_tokens": r.cached_tokens,
        "preemptions": r.preemptions,
        "transfer_starts": r.transfer_starts,
        "transfer_ends": r.transfer_ends,
        "prefix_hit_blocks": r.prefix_hit_blocks,
        "prefix_lookup_blocks": r.prefix_lookup_blocks,
    }
    if r.mtp_counters is not None:
        row["mtp"] = list(r.mtp_counters)
    if r.commit_times is not None:
        row["commit_times"] = r.commit_times
    return row


def write_requests(records: dict[int, RoundRecord], out_dir: Path) -> Path:
    path = out_dir / REQUESTS_FILE
    with path.open("w") as fh:
        for rid in sorted(records):
            fh.write(json.dumps(_record_row(records[rid])) + "\n")
    return path


def summary_payload(summary: SummaryReport, extra: dict | None = None) -> dict:
    doc = {
        "num_rounds": summary.num_rounds,
        "num_sessions": summary.num_sessions,
        "makespan_ms": summary.makespan_ns / 1e6,
        "total_committed_tokens": summary.total_committed,
        "throughput_tok_s": summary.throughput_tok_s,
        "hidden_planning_tok_s": summary.hidden_planning_tok_s,
        "latency_ms": {
            metric: {str(int(q)): v / 1e6 for q, v in qs.items()}
            for metric, qs in summary.latency_percentiles.items()
        },
        "padded_tokens": summary.padded_tokens,
        "useful_tokens": summary.useful_tokens,
        "padding_inflation": summary.padding_inflation,
        "prefix_hit_blocks": summary.prefix_hit_blocks,
        "prefix_lookup_blocks": summary.prefix_lookup_blocks,
        "prefix_hit_ratio": summary.prefix_hit_ratio,
        "preemptions": summary.preemptions,
        "compute_bound_share": summary.compute_bound_share,
    }
    if extra:
        doc.update(extra)
    return doc


def write_summary(summary: SummaryReport, out_dir: Path,
                  extra: dict | None = None) -> Path:
    path = out_dir / SUMMARY_FILE
    path.write_text(json.dumps(summary_payload(summary, extra), indent=2) + "\n")
    return path


def write_steps(step_logs: dict[str, list[StepLog]], out_dir: Path) -> Path:
    path = out_dir / STEPS_FILE
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["replica", "start_ns", "end_ns", "batch_size",
                    "prefill_tokens", "decode_tokens", "padded_tokens",
                    "kernel_only"])
        for name in sorted(step_logs):
            for s in step_logs[name]:
                w.writerow([name, s.start_ns, s.end_ns, s.size,
                            s.prefill_tokens, s.decode_tokens,
                            s.padded_tokens, int(s.kernel_only)])
    return path


def _point_row(p: CandidatePoint) -> list:
    gpus = dict(p.meta).get("total_gpus", "")
    return [p.name, p.architecture, f"{p.generation_speed:.3f}",
            f"{p.throughput:.3f}", f"{p.p95_ttft_ms:.3f}",
            f"{p.p95_tpot_ms:.3f}", gpus]


_POINT_HEADER = ["name", "architecture", "generation_speed_tok_s_user",
                 "throughput_tok_s", "p95_ttft_ms", "p95_tpot_ms", "total_gpus"]


def write_candidates(report: SweepReport, out_dir: Path) -> Path:
    path = out_dir / CANDIDATES_FILE
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_POINT_HEADER + ["status", "reason"])
        for c in report.candidates:
            if c.point is not None:
                w.writerow(_point_row(c.point) + [c.status, c.reason])
            else:
                w.writerow([c.name, c.spec.architecture.value, "", "", "", "",
                            c.total_gpus or "", c.status, c.reason])
    return path


def write_frontier(report: SweepReport, out_dir: Path) -> Path:
    path = out_dir / FRONTIER_FILE
    best_names = {p.name for p in report.best_per_architecture.values()}
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_POINT_HEADER + ["best_of_architecture"])
        for p in report.frontier:
            w.writerow(_point_row(p) + [int(p.name in best_names)])
    return path


# -- figures ------------------------------------------------------------------

def _matplotlib():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def render_run_figures(result: SimulationResult, summary: SummaryReport,
                       out_dir: Path) -> list[Path]:
    plt = _matplotlib()
    written = []

    if summary.kv_timelines:
        fig, ax = plt.subplots(figsize=(8, 4.5))
        for name in sorted(summary.kv_timelines):
            samples = summary.kv_timelines[name]
            if not samples:
                continue
            ts = [s[0] / 1e6 for s in samples]
            free = [s[1] for s in samples]
            ax.plot(ts, free, label=name, drawstyle="steps-post")
        ax.set_xlabel("time (ms)")
        ax.set_ylabel("free KV blocks")
        ax.set_title("KV block availability")
        ax.legend(fontsize=7)
        fig.tight_layout()
        p = out_dir / "kv_blocks.png"
        fig.savefig(p, dpi=110)
        plt.close(fig)
        written.append(p)

    finished = [r for r in result.records.values() if r.finish_ns is not None]
    if finished:
        fig, axes = plt.subplots(1, 2, figsize=(9, 4))
        ttft = sorted(r.ttft_ns / 1e6 for r in finished)
        e2e = sorted(r.e2e_ns / 1e6 for r in finished)
        for ax, series, label in ((axes[0], ttft, "TTFT (ms)"),
                                  (axes[1], e2e, "E2E (ms)")):
            n = len(series)
            ax.plot(series, [(i + 1) / n for i in range(n)])
            ax.set_xlabel(label)
            ax.set_ylabel("CDF")
            ax.grid(True, alpha=0.3)
        fig.suptitle("Latency distributions")
        fig.tight_layout()
        p = out_dir / "latency.png"
        fig.savefig(p, dpi=110)
        plt.close(fig)
        written.append(p)

    steps = [(name, s) for name, log in result.step_logs.items() for s in log]
    if steps:
        fig, ax = plt.subplots(figsize=(8, 4.5))
        ts = [s.end_ns / 1e6 for _, s in steps]
        pre = [s.prefill_tokens for _, s in steps]
        dec = [s.decode_tokens for _, s in steps]
        ax.scatter(ts, pre, s=6, label="prefill tokens", alpha=0.6)
        ax.scatter(ts, dec, s=6, label="decode tokens", alpha=0.6)
        ax.set_xlabel("batch end (ms)")
        ax.set_ylabel("tokens in batch")
        ax.set_title("Batch mix over time")
        ax.legend(fontsize=8)
        fig.tight_layout()
        p = out_dir / "batch_mix.png"
        fig.savefig(p, dpi=110)
        plt.close(fig)
        written.append(p)

    return written


def render_sweep_figure(report: SweepReport, out_dir: Path) -> list[Path]:
    plt = _matplotlib()
    points = report.simulated_points()
    if not points:
        return []
    fig, ax = plt.subplots(figsize=(7, 5))
    frontier_names = {p.name for p in report.frontier}
    by_arch: dict[str, list[CandidatePoint]] = {}
    for p in points:
        by_arch.setdefault(p.architecture, []).append(p)
    for arch in sorted(by_arch):
        pts = by_arch[arch]
        ax.scatter([p.generation_speed for p in pts],
                   [p.throughput for p in pts], s=18, alpha=0.55, label=arch)
    front = sorted(report.frontier, key=lambda p: p.generation_speed)
    if front:
        ax.plot([p.generation_speed for p in front],
                [p.throughput for p in front],
                "k--", linewidth=1, label="frontier")
        hl = [p for p in points if p.name in frontier_names]
        ax.scatter([p.generation_speed for p in hl],
                   [p.throughput for p in hl],
                   facecolors="none", edgecolors="black", s=60)
    ax.set_xlabel("generation speed (tokens/s per user)")
    ax.set_ylabel("throughput (tokens/s)")
    ax.set_title("Throughput vs generation speed")
    ax.legend(fontsize=8)
    fig.tight_layout()
    p = out_dir / "frontier.png"
    fig.savefig(p, dpi=110)
    plt.close(fig)
    return [p]


# -- entry points -------------------------------------------------------------

def write_run_report(result: SimulationResult, out_dir: str | Path, *,
                     quantiles: tuple[int, ...] = (50, 95),
                     figures: bool = True,
                     extra: dict | None = None) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = result.summarize(quantiles=quantiles)
    written = {
        "requests": write_requests(result.records, out),
        "summary": write_summary(summary, out, extra),
        "steps": write_steps(result.step_logs, out),
    }
    if figures:
        for p in render_run_figures(result, summary, out):
            written[p.stem] = p
    return written


def write_sweep_report(report: SweepReport, out_dir: str | Path, *,
                       figures: bool = True) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {
        "candidates": write_candidates(report, out),
        "frontier": write_frontier(report, out),
    }
    if figures:
        for p in render_sweep_figure(report, out):
            written[p.stem] = p
    return written
