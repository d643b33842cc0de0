"""Command line front end: simulate one scenario, sweep a grid, score prices.

Flags are grouped the way scenarios decompose: workload, hardware,
serving/runtime, and metrics.  Every override edits the loaded spec through
the same dotted-path machinery the sweep grid uses.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .config import (
    ConfigError,
    ReconfigConfig,
    RoleConfig,
    ServingSpec,
    SpecDecodeConfig,
    default_gpu_catalog,
    load_gpu_catalog,
    load_spec,
    parse_spec,
)
from .fidelity import load_coefficient_tables
from .metrics import SlaThresholds, score_allocation
from .orchestration import run_simulation
from .report import (
    summary_payload,
    write_run_report,
    write_sweep_report,
)
from .sweep import GridSpec, apply_axis_value, run_sweep


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on|off, got {value!r}")
    return value == "on"


def _parse_reconfig(text: str) -> ReconfigConfig:
    """threshold,pp:tp:dp,cost_ms  e.g.  0.1,1:1:4,5.0"""
    try:
        thr_s, layout_s, cost_s = text.split(",")
        pp, tp, dp = (int(v) for v in layout_s.split(":"))
        return ReconfigConfig(
            threshold=float(thr_s),
            target=RoleConfig(pp=pp, tp_attn=tp, dp_attn=dp),
            cost_ns=int(float(cost_s) * 1e6))
    except (ValueError, ConfigError) as exc:
        raise argparse.ArgumentTypeError(
            f"--reconfig wants 'threshold,pp:tp:dp,cost_ms': {exc}") from None


def _parse_spec_decode(text: str) -> SpecDecodeConfig:
    try:
        k_s, p_s = text.split(",")
        return SpecDecodeConfig(verify_tokens=int(k_s), acceptance=float(p_s))
    except (ValueError, ConfigError) as exc:
        raise argparse.ArgumentTypeError(
            f"--spec-decode wants 'k,p': {exc}") from None


def _add_common_groups(p: argparse.ArgumentParser) -> None:
    wl = p.add_argument_group("workload")
    wl.add_argument("--workload", metavar="PATTERN",
                    help="override workload.pattern")
    wl.add_argument("--trace", metavar="PATH", help="trace file for pattern=trace")
    wl.add_argument("--qps", type=float, help="arrival rate override")
    wl.add_argument("--arrival", choices=("burst", "rate", "poisson"),
                    help="arrival process override")
    wl.add_argument("--num-requests", type=int)
    wl.add_argument("--seed", type=int)
    wl.add_argument("--agentic-mix", type=float,
                    help="heavy-session fraction for agentic workloads")

    hw = p.add_argument_group("hardware")
    hw.add_argument("--gpu-catalog", metavar="PATH",
                    help="extra GPU catalog file (yaml/json)")
    hw.add_argument("--cost-model", default=None, metavar="analytical|file:PATH",
                    help="operator cost source (default analytical)")

    rt = p.add_argument_group("serving/runtime")
    rt.add_argument("--scheduler",
                    choices=("vllm_v1", "sglang", "mlfq_skip_join", "h2q_br"))
    rt.add_argument("--h2q-L", type=int, dest="h2q_short_prompt",
                    help="short-queue prompt bound")
    rt.add_argument("--h2q-C", type=int, dest="h2q_history",
                    help="session history demotion bound")
    rt.add_argument("--h2q-B", type=int, dest="h2q_release_bound",
                    help="bounded-release pass count")
    rt.add_argument("--watermark", type=float)
    rt.add_argument("--chunk-budget", type=int)
    rt.add_argument("--cuda-graph", type=_on_off, metavar="on|off")
    rt.add_argument("--capture-bins", metavar="N,N,...",
                    help="decode capture sizes")
    rt.add_argument("--spec-decode", type=_parse_spec_decode, metavar="k,p")
    rt.add_argument("--prefix-cache", type=_on_off, metavar="on|off")
    rt.add_argument("--afd-delta-ep", type=float, metavar="US",
                    help="EP combine slack in microseconds")
    rt.add_argument("--moe-routing", choices=("balanced", "skew"))
    rt.add_argument("--reconfig", type=_parse_reconfig,
                    metavar="thr,pp:tp:dp,cost_ms")

    mx = p.add_argument_group("metrics")
    mx.add_argument("--out-dir", metavar="DIR", help="write report files here")
    mx.add_argument("--quantiles", default="50,95", metavar="Q,Q,...")
    mx.add_argument("--event-trace", action="store_true",
                    help="record per-token commit times")
    mx.add_argument("--no-figures", action="store_true",
                    help="skip figure rendering")
    p.add_argument("--executor", default="sequential",
                   choices=("sequential", "threaded"))


_RUNTIME_FLAGS = (
    ("scheduler", "runtime.scheduler"),
    ("h2q_short_prompt", "runtime.h2q_short_prompt"),
    ("h2q_history", "runtime.h2q_history"),
    ("h2q_release_bound", "runtime.h2q_release_bound"),
    ("watermark", "runtime.watermark"),
    ("chunk_budget", "runtime.chunk_budget"),
    ("cuda_graph", "runtime.cuda_graph"),
    ("spec_decode", "runtime.spec_decode"),
    ("prefix_cache", "runtime.prefix_cache"),
    ("moe_routing", "runtime.moe_routing"),
    ("reconfig", "runtime.reconfig"),
)

_WORKLOAD_FLAGS = (
    ("workload", "workload.pattern"),
    ("trace", "workload.trace_path"),
    ("num_requests", "workload.num_requests"),
    ("seed", "workload.seed"),
    ("agentic_mix", "workload.agentic_mix"),
    ("qps", "workload.arrival.qps"),
    ("arrival", "workload.arrival.kind"),
)


def apply_overrides(spec: ServingSpec, args: argparse.Namespace) -> ServingSpec:
    for attr, path in _WORKLOAD_FLAGS + _RUNTIME_FLAGS:
        value = getattr(args, attr, None)
        if value is None:
            continue
        if attr in ("spec_decode", "reconfig"):
            node = getattr(spec, path.split(".")[0])
            spec = replace(spec, runtime=replace(node, **{attr: value}))
        else:
            spec = apply_axis_value(spec, path, value)
    if getattr(args, "capture_bins", None):
        bins = tuple(int(v) for v in args.capture_bins.split(","))
        spec = replace(spec, runtime=replace(spec.runtime, capture_bins=bins))
    if getattr(args, "afd_delta_ep", None) is not None:
        spec = replace(spec, runtime=replace(
            spec.runtime, delta_ep_ns=int(args.afd_delta_ep * 1000)))
    if getattr(args, "gpu_catalog", None):
        catalog = dict(spec.gpu_catalog)
        catalog.update(load_gpu_catalog(args.gpu_catalog))
        spec = replace(spec, gpu_catalog=catalog)
    return spec


def _load_tables(arg: str | None):
    if arg is None or arg == "analytical":
        return None
    if arg.startswith("file:"):
        return load_coefficient_tables(arg[5:])
    raise SystemExit(f"--cost-model must be 'analytical' or 'file:PATH', got {arg!r}")


def _quantiles(text: str) -> tuple[int, ...]:
    return tuple(int(q) for q in text.split(","))


# -- subcommands ----------------------------------------------------------------

def cmd_simulate(args: argparse.Namespace) -> int:
    spec = apply_overrides(load_spec(args.spec), args)
    tables = _load_tables(args.cost_model)
    result = run_simulation(spec, executor=args.executor,
                            keep_commit_times=args.event_trace,
                            tables=tables)
    quantiles = _quantiles(args.quantiles)
    summary = result.summarize(quantiles=quantiles)
    doc = summary_payload(summary, {
        "architecture": spec.architecture.value,
        "total_gpus": result.plan.total_gpus,
        "executor": result.executor,
        "events_processed": result.events_processed,
    })
    if args.out_dir:
        written = write_run_report(result, args.out_dir, quantiles=quantiles,
                                   figures=not args.no_figures,
                                   extra={"architecture": spec.architecture.value,
                                          "total_gpus": result.plan.total_gpus})
        doc["report_files"] = {k: str(v) for k, v in written.items()}
    json.dump(doc, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def _grid_from_file(path: str) -> GridSpec:
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, dict):
        raise SystemExit(f"{path}: grid file must be a mapping")
    if "base_spec" in raw:
        base = load_spec(Path(path).parent / raw["base_spec"])
    elif "base" in raw:
        base = parse_spec(yaml.safe_dump(raw["base"]),
                          base_dir=Path(path).parent)
    else:
        raise SystemExit(f"{path}: grid needs 'base' (inline) or 'base_spec' (path)")
    return GridSpec(
        base=base,
        axes={str(k): list(v) for k, v in (raw.get("axes") or {}).items()},
        budget_gpus=raw.get("budget_gpus"),
        exact_budget=bool(raw.get("exact_budget", False)),
    )


def cmd_sweep(args: argparse.Namespace) -> int:
    grid = _grid_from_file(args.grid)
    if args.budget is not None:
        grid.budget_gpus = args.budget
    sla = None
    if args.sla_ttft_ms is not None or args.sla_tpot_ms is not None:
        sla = SlaThresholds(max_p95_ttft_ms=args.sla_ttft_ms,
                            max_p95_tpot_ms=args.sla_tpot_ms)
    report = run_sweep(grid, sla, executor=args.executor)
    doc = {
        "candidates": len(report.candidates),
        "simulated": report.simulated,
        "skipped": report.skipped,
        "frontier": [p.name for p in report.frontier],
        "best_per_architecture": {a: p.name for a, p in
                                  report.best_per_architecture.items()},
    }
    if args.out_dir:
        written = write_sweep_report(report, args.out_dir,
                                     figures=not args.no_figures)
        doc["report_files"] = {k: str(v) for k, v in written.items()}
    json.dump(doc, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def _alloc_roles(entry: dict, catalog) -> dict:
    alloc = {}
    for role, item in entry.items():
        name = item["gpu"]
        if name not in catalog:
            raise SystemExit(f"unknown GPU type {name!r}")
        alloc[str(role)] = (int(item["count"]), catalog[name])
    return alloc


def cmd_score(args: argparse.Namespace) -> int:
    raw = yaml.safe_load(Path(args.alloc).read_text())
    catalog = default_gpu_catalog()
    if args.gpu_catalog:
        catalog.update(load_gpu_catalog(args.gpu_catalog))
    score = score_allocation(
        _alloc_roles(raw["candidate"]["roles"], catalog),
        _alloc_roles(raw["baseline"]["roles"], catalog),
        float(raw["candidate"].get("throughput", 1.0)),
        float(raw["baseline"].get("throughput", 1.0)),
        sla_ok=bool(raw.get("sla_ok", True)),
        bottlenecks=raw.get("bottlenecks"),
        roi_threshold=float(raw.get("roi_threshold", 1.08)),
    )
    doc = {
        "price_per_hour": score.price_per_hour,
        "baseline_price_per_hour": score.baseline_price_per_hour,
        "spend_ratio": score.spend_ratio,
        "cost_efficiency": score.cost_efficiency,
        "gates": {"alignment": score.alignment_ok, "sla": score.sla_ok,
                  "roi": score.roi_ok},
        "accepted": score.accepted,
    }
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "score.json").write_text(json.dumps(doc, indent=2) + "\n")
    json.dump(doc, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="servesim",
        description="Discrete-event simulator for LLM serving architectures")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one scenario")
    sim.add_argument("--spec", required=True, metavar="PATH",
                     help="scenario file (yaml)")
    _add_common_groups(sim)
    sim.set_defaults(func=cmd_simulate)

    sw = sub.add_parser("sweep", help="enumerate and rank a config grid")
    sw.add_argument("--grid", required=True, metavar="PATH",
                    help="grid file (yaml): base/base_spec, axes, budget_gpus")
    sw.add_argument("--budget", type=int, help="GPU budget override")
    sw.add_argument("--sla-ttft-ms", type=float, help="p95 TTFT cap")
    sw.add_argument("--sla-tpot-ms", type=float, help="p95 TPOT cap")
    sw.add_argument("--out-dir", metavar="DIR")
    sw.add_argument("--no-figures", action="store_true")
    sw.add_argument("--executor", default="sequential",
                    choices=("sequential", "threaded"))
    sw.set_defaults(func=cmd_sweep)

    sc = sub.add_parser("score", help="price an allocation against a baseline")
    sc.add_argument("--alloc", required=True, metavar="PATH",
                    help="allocation file (yaml): baseline, candidate, gates")
    sc.add_argument("--gpu-catalog", metavar="PATH")
    sc.add_argument("--out-dir", metavar="DIR")
    sc.set_defaults(func=cmd_score)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
