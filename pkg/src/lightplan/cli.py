"""Command-line entry point: ``lightplan <command> [options]``.

Exit status is 0 on success, 2 for unreadable or invalid input and 3 when
the planner finds no policy that fits in memory.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from decimal import Decimal
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__, batcher, hrm, opcost, pipesim, planner
from .config import (HardwareSpec, ParseError, Policy, ValidationError, parse_config, parse_value,
                     spec_dict, validate)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NO_POLICY = 3

SWEEP_FIELDS = tuple(f.name for f in dataclasses.fields(HardwareSpec)) + ("cpu_scale",)
CPU_SCALED = ("m_c", "b_c", "p_c")


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# formatting

def _num(x):
    """Round floats to 9 significant digits so artifacts are stable across platforms."""
    if isinstance(x, bool) or x is None or isinstance(x, (str, int)):
        return x
    if isinstance(x, (np.integer,)):
        return int(x)
    x = float(x)
    if not math.isfinite(x):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    return float(f"{x:.9g}")


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return _num(obj)


def _csv_cell(x):
    x = _num(x)
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return f"{x:.9g}"
    return str(x)


class Emitter:
    """Writes one artifact per command (JSON or CSV), each carrying the run manifest."""

    def __init__(self, args, command: str):
        self.args = args
        self.command = command
        self.configs: List[str] = []
        self.specs: Dict[str, dict] = {}

    def record(self, config_path, hw=None, model=None, workload=None, policy=None):
        self.configs.append(str(config_path))
        for name, obj in (("hardware", hw), ("model", model), ("workload", workload), ("policy", policy)):
            if obj is not None:
                self.specs[name] = spec_dict(obj)

    def _target(self) -> Optional[Path]:
        if self.args.out is None:
            return None
        return Path(self.args.out) / f"{self.command}.{self.args.format}"

    def manifest(self, target):
        return _clean({
            "command": self.command,
            "config": self.configs,
            "specs": self.specs,
            "version": __version__,
            "outputs": [str(target)] if target is not None else [],
        })

    def emit(self, payload: dict, rows: Sequence[dict], columns: Sequence[str]):
        target = self._target()
        manifest = self.manifest(target)
        if self.args.format == "json":
            text = json.dumps({**_clean(payload), "manifest": manifest}, indent=2, allow_nan=False) + "\n"
        else:
            buf = io.StringIO()
            buf.write("# manifest: " + json.dumps(manifest, sort_keys=True) + "\n")
            writer = csv.writer(buf, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_csv_cell(row.get(c)) for c in columns])
            text = buf.getvalue()
        if target is None:
            sys.stdout.write(text)
        else:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(text, encoding="utf-8")
            print(target)


# ---------------------------------------------------------------------------
# shared helpers

def _load(args, emitter: Emitter, need_policy: bool = False):
    hw, model, workload, policy = parse_config(args.config)
    if getattr(args, "tp", 1) != 1:
        hw = planner.apply_tensor_parallelism(hw, args.tp)
    if need_policy and policy is None:
        raise UsageError(f"{args.config}: this command needs a [policy] section (or run `plan` first)")
    emitter.record(args.config, hw, model, workload, policy)
    return hw, model, workload, policy


def _int_list(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise UsageError(f"values must be integers >= 1, got {text!r}")
    return values


def _breakdown_dict(b: planner.LatencyBreakdown) -> dict:
    return {"comm": b.comm_cpu_to_gpu, "t_cpu": b.t_cpu, "t_gpu": b.t_gpu, "t_layer": b.t_layer,
            "t_attn_g": b.t_attn_g, "t_ffn_g": b.t_ffn_g, "t_attn_c": b.t_attn_c, "t_ffn_c": b.t_ffn_c,
            "t_proj_g": b.t_proj_g}


def _plan_dict(result: planner.PlanResult) -> dict:
    return {
        "policy": spec_dict(result.policy),
        "latency": _breakdown_dict(result.breakdown),
        "memory": {"gpu_bytes": result.memory.gpu_bytes, "cpu_bytes": result.memory.cpu_bytes},
        "throughput": {"decode": result.decode_throughput, "generation": result.generation_throughput},
        "objective": result.objective,
        "ctx": result.ctx,
    }


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


# ---------------------------------------------------------------------------
# commands

def cmd_roofline(args) -> int:
    em = Emitter(args, "roofline")
    hw, model, _, policy = _load(args, em)
    mus = _int_list(args.mu)
    ctxs = _int_list(args.ctx)
    r_w = policy.r_w if policy is not None else 0.0
    profiles = []
    for op in args.op:
        for mu in mus:
            if op == "ffn":
                profiles.append((f"ffn_mu{mu}", opcost.moe_ffn_profile(model, mu, r_w)))
                continue
            for ctx in ctxs:
                profiles.append((f"attn_mu{mu}_ctx{ctx}", opcost.attn_decode_profile(model, mu, ctx)))
    points = hrm.roofline_series(profiles, hw)
    rows = [dataclasses.asdict(p) for p in points]
    turning = []
    for name, prof in profiles:
        I_i, I_j = prof.intensity("gpu"), prof.intensity("cpu")
        p1 = hrm.turning_point_p1(I_j, hw)
        p2 = hrm.turning_point_p2(I_i, hw)
        turning.append({"series": name, "p1": p1, "p1_bound": p1 * hw.b_cg, "p2": p2,
                        "p2_bound": p2 * hw.b_cg, "balance_gap": hrm.balance_gap(I_i, I_j, hw)})
    em.emit({"points": rows, "turning_points": turning}, rows, ["series", "kind", "intensity", "bound"])
    return EXIT_OK


def _grid_from_args(args) -> planner.SearchGrid:
    kwargs = {}
    if args.max_n_ub is not None:
        kwargs["n_ub_values"] = tuple(range(1, args.max_n_ub + 1))
    if args.mu_values is not None:
        kwargs["mu_values"] = tuple(_int_list(args.mu_values))
    return planner.SearchGrid(**kwargs)


def cmd_plan(args) -> int:
    em = Emitter(args, "plan")
    hw, model, workload, _ = _load(args, em)
    result = planner.search_policy(hw, model, workload, grid=_grid_from_args(args), ctx=args.ctx_point,
                                   objective=args.objective)
    payload = _plan_dict(result)
    em.emit(payload, [_flatten(payload)], list(_flatten(payload)))
    return EXIT_OK


def cmd_latency(args) -> int:
    em = Emitter(args, "latency")
    hw, model, workload, policy = _load(args, em, need_policy=True)
    result = planner.estimate_throughput(hw, model, workload, policy, ctx=args.ctx_point,
                                         objective=args.objective)
    payload = _plan_dict(result)
    em.emit(payload, [_flatten(payload)], list(_flatten(payload)))
    return EXIT_OK


def cmd_simulate(args) -> int:
    em = Emitter(args, "simulate")
    hw, model, workload, policy = _load(args, em, need_policy=True)
    dag = pipesim.build_schedule(hw, model, workload, policy, args.schedule, layers=args.layers, steps=args.steps)
    timeline = pipesim.simulate(dag)
    m = pipesim.metrics(timeline)
    rows = pipesim.timeline_rows(timeline)
    payload = {"schedule": args.schedule, "tasks": rows, "makespan": m.makespan,
               "utilization": m.utilization, "steady_layer_time": m.steady_layer_time}
    em.emit(payload, rows, ["kind", "step", "layer", "microbatch", "page", "resource", "start", "end"])
    return EXIT_OK


def cmd_batch(args) -> int:
    em = Emitter(args, "batch")
    em.configs.append(str(args.requests))
    try:
        requests = batcher.read_requests(args.requests)
    except OSError as exc:
        raise UsageError(f"cannot read requests file {args.requests}: {exc.strerror}") from None
    plan = batcher.batch_requests(requests, n_ub=args.n_ub, ubs=args.ubs, gen_len=args.gen_len,
                                  cache_size=args.cache_size, flush_partial=not args.no_flush)
    payload = plan.to_dict()
    rows = [{"micro_batch": i, "ids": " ".join(map(str, ids)), "tokens": tok}
            for i, (ids, tok) in enumerate(zip(payload["micro_batches"], payload["sums"]))]
    rows += [{"micro_batch": "aborted", "ids": " ".join(map(str, payload["aborted"])), "tokens": ""}]
    em.emit(payload, rows, ["micro_batch", "ids", "tokens"])
    return EXIT_OK


def parse_vary(spec: str):
    """``field=start:stop:count`` -> (field, [values]); endpoints accept the config suffixes."""
    if "=" not in spec:
        raise UsageError(f"--vary expects field=start:stop:count, got {spec!r}")
    name, rng = (s.strip() for s in spec.split("=", 1))
    if name not in SWEEP_FIELDS:
        raise UsageError(f"--vary: unknown field {name!r}; choose from {', '.join(SWEEP_FIELDS)}")
    parts = rng.split(":")
    if len(parts) != 3:
        raise UsageError(f"--vary {name}: expected start:stop:count, got {rng!r}")
    try:
        if name == "cpu_scale":
            start, stop = float(Decimal(parts[0])), float(Decimal(parts[1]))
        else:
            start, stop = float(parse_value(name, parts[0])), float(parse_value(name, parts[1]))
        count = int(parts[2])
    except (ValueError, ArithmeticError, ParseError) as exc:
        raise UsageError(f"--vary {name}: {exc}") from None
    if count < 1:
        raise UsageError(f"--vary {name}: count must be >= 1")
    if count == 1:
        return name, [start]
    return name, [float(v) for v in np.linspace(start, stop, count)]


def _threads() -> int:
    raw = os.environ.get("LIGHTPLAN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"LIGHTPLAN_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def sweep_points(hw: HardwareSpec, axes):
    """Cartesian product of the --vary axes, first axis slowest."""
    points = [({}, hw)]
    for name, values in axes:
        nxt = []
        for labels, base in points:
            for v in values:
                if name == "cpu_scale":
                    changed = dataclasses.replace(base, **{f: getattr(base, f) * v for f in CPU_SCALED})
                else:
                    changed = dataclasses.replace(base, **{name: v})
                nxt.append(({**labels, name: v}, changed))
        points = nxt
    return points


def cmd_sweep(args) -> int:
    em = Emitter(args, "sweep")
    hw, model, workload, _ = _load(args, em)
    axes = [parse_vary(v) for v in args.vary or []]
    if not axes:
        raise UsageError("sweep needs at least one --vary field=start:stop:count")
    points = sweep_points(hw, axes)
    for _, point_hw in points:
        validate(point_hw)
    grid = _grid_from_args(args)

    def solve(point):
        labels, point_hw = point
        try:
            res = planner.search_policy(point_hw, model, workload, grid=grid, ctx=args.ctx_point,
                                        objective=args.objective)
        except planner.NoFeasiblePolicy as exc:
            return {**labels, "feasible": False, "constraint": exc.constraint}
        row = {**labels, "feasible": True, "constraint": ""}
        row.update(spec_dict(res.policy))
        row.update(t_layer=res.breakdown.t_layer, objective=res.objective,
                   generation_throughput=res.generation_throughput)
        return row

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        rows = list(pool.map(solve, points))  # map keeps grid order
    columns = [name for name, _ in axes] + ["feasible", "constraint", "N", "mu", "A_g", "F_g", "r_w", "r_c",
                                            "t_layer", "objective", "generation_throughput"]
    em.emit({"axes": [name for name, _ in axes], "rows": rows}, rows, columns)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lightplan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="directory for the artifact (default: stdout)")
    common.add_argument("--format", choices=("json", "csv"), default="json")

    with_config = argparse.ArgumentParser(add_help=False, parents=[common])
    with_config.add_argument("--config", required=True, help="hardware/model/workload[/policy] config file")
    with_config.add_argument("--tp", type=int, default=1, help="tensor-parallel GPU count (default 1)")

    model_opts = argparse.ArgumentParser(add_help=False)
    model_opts.add_argument("--objective", choices=planner.OBJECTIVES, default="per_token")
    model_opts.add_argument("--ctx", dest="ctx_point", type=float, default=None,
                            help="context length for the latency model (default s + n/2)")

    grid_opts = argparse.ArgumentParser(add_help=False)
    grid_opts.add_argument("--max-n-ub", type=int, default=None, help="largest micro-batch count to search")
    grid_opts.add_argument("--mu-values", default=None, help="comma-separated micro-batch sizes to search")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("roofline", parents=[with_config], help="roof curves and operator points")
    p.add_argument("--op", nargs="+", choices=("attn", "ffn"), default=["attn", "ffn"])
    p.add_argument("--mu", default="1,4,16,64,256", help="comma-separated micro-batch sizes")
    p.add_argument("--ctx", default="512,2048", help="comma-separated context lengths (attention only)")
    p.set_defaults(func=cmd_roofline)

    p = sub.add_parser("plan", parents=[with_config, model_opts, grid_opts], help="search the best policy")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("latency", parents=[with_config, model_opts], help="evaluate the config's policy")
    p.set_defaults(func=cmd_latency)

    p = sub.add_parser("simulate", parents=[with_config], help="simulate a pipeline schedule")
    p.add_argument("--schedule", choices=pipesim.SCHEDULES, default="cgopipe")
    p.add_argument("--layers", type=int, default=None, help="layers to simulate (default: all)")
    p.add_argument("--steps", type=int, default=1, help="decode steps to simulate")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("batch", parents=[common], help="pack requests into micro-batches")
    p.add_argument("--requests", required=True, help="id,input_len CSV or JSON-lines file")
    p.add_argument("--n-ub", type=int, default=4)
    p.add_argument("--ubs", type=int, default=32)
    p.add_argument("--gen-len", type=int, default=32)
    p.add_argument("--cache-size", type=int, default=131072, help="token budget per micro-batch")
    p.add_argument("--no-flush", action="store_true", help="drop partitions that never fill up")
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("sweep", parents=[with_config, model_opts, grid_opts], help="best policy over a hardware grid")
    p.add_argument("--vary", action="append", metavar="FIELD=START:STOP:COUNT",
                   help=f"repeatable; FIELD is one of {', '.join(SWEEP_FIELDS)}")
    p.set_defaults(func=cmd_sweep)
    return parser


def _fail(code: int, message: str) -> int:
    print(f"lightplan: error: {message}", file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except planner.NoFeasiblePolicy as exc:
        return _fail(EXIT_NO_POLICY, str(exc))
    except ValidationError as exc:
        return _fail(EXIT_INVALID, str(exc))
    except (ParseError, UsageError, batcher.InvalidParameters, pipesim.UnsupportedCombination,
            planner.InfeasiblePolicy) as exc:
        return _fail(EXIT_INVALID, str(exc))
    except ValueError as exc:
        return _fail(EXIT_INVALID, str(exc))


if __name__ == "__main__":
    sys.exit(main())
