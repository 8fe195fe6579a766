"""Discrete-event simulation of decode-stage pipeline schedules.

Five exclusive resources execute tasks: the GPU, the CPU, the two link
directions (``h2d``, ``d2h``) and the CPU->pinned staging copy (``ctopin``).
Each resource is a FIFO queue in launch order, like a CUDA stream: a task
starts once it reaches the head of its queue, every dependency has finished
and the resource is idle.

Schedules:

``cgopipe``
    CPU attention launched two micro-batches ahead, next-layer weights split
    into one page per micro-batch and interleaved with hidden-state uploads.
``s2``
    Same CPU/GPU overlap, whole-layer weight transfer ahead of the layer's uploads.
``s3``
    Micro-batches run one after another (no CPU/GPU overlap), whole-layer weights.
``s4``
    GPU attention with KV-cache prefetch sharing the host-to-device link with weights.
"""

from __future__ import annotations

import graphlib
import statistics
from collections import deque
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from . import opcost
from .config import HardwareSpec, ModelSpec, Policy, WorkloadSpec, validate

RESOURCES = ("gpu", "cpu", "h2d", "d2h", "ctopin")
SCHEDULES = ("cgopipe", "s2", "s3", "s4")

PRE_ATTN = "PreAttn"
OFFLOAD_QKV = "OffloadQKV"
CPU_ATTN = "CPUAttn"
LOAD_H = "LoadH"
POST_ATTN = "PostAttn"
CTOPIN = "WPage_CtoPin"
PINTOG = "WPage_PintoG"
KV_LOAD = "KVLoad"
GPU_ATTN = "GPUAttn"

RESOURCE_OF = {
    PRE_ATTN: "gpu",
    POST_ATTN: "gpu",
    GPU_ATTN: "gpu",
    CPU_ATTN: "cpu",
    OFFLOAD_QKV: "d2h",
    LOAD_H: "h2d",
    PINTOG: "h2d",
    KV_LOAD: "h2d",
    CTOPIN: "ctopin",
}
TASK_KINDS = tuple(RESOURCE_OF)


class SimulationError(RuntimeError):
    pass


class CycleDetected(SimulationError):
    pass


class ScheduleDeadlock(SimulationError):
    """FIFO launch order contradicts the dependencies."""


class EmptyTimeline(SimulationError):
    pass


class UnsupportedCombination(ValueError):
    pass


@dataclass(frozen=True)
class Task:
    id: int
    kind: str
    resource: str
    duration: float
    deps: Tuple[int, ...] = ()
    layer: int = 0
    microbatch: Optional[int] = None
    page: Optional[int] = None
    step: int = 1


@dataclass(frozen=True)
class TimelineEntry:
    task: Task
    start: float
    end: float


@dataclass
class Timeline:
    entries: List[TimelineEntry]
    makespan: float
    busy: Dict[str, float]
    layers_per_step: Optional[int] = None


@dataclass(frozen=True)
class Metrics:
    makespan: float
    utilization: Dict[str, float]
    steady_layer_time: float


# ---------------------------------------------------------------------------
# durations

def _roofline_time(nbytes, flops, bandwidth, peak):
    return max(nbytes / bandwidth, flops / peak)


def task_durations(hw: HardwareSpec, model: ModelSpec, policy: Policy, ctx) -> Dict[str, float]:
    """Per-instance durations from the analytic cost model.

    Weight entries are per page (one page = one micro-batch's share of the
    layer); whole-layer transfers take ``n_ub`` times as long.
    """
    mu = policy.mu
    attn = opcost.attn_decode_profile(model, mu, ctx)
    ffn = opcost.moe_ffn_profile(model, mu, policy.r_w)
    pre, post = opcost.proj_profiles(model, mu)
    sizes = opcost.transfer_sizes(model, policy, ctx)
    page = sizes.d3 / policy.n_ub
    return {
        PRE_ATTN: _roofline_time(pre.bytes_gpu, pre.flops, hw.b_g, hw.p_g),
        POST_ATTN: _roofline_time(post.bytes_gpu + ffn.bytes_gpu, post.flops + ffn.flops, hw.b_g, hw.p_g),
        GPU_ATTN: _roofline_time(attn.bytes_gpu, attn.flops, hw.b_g, hw.p_g),
        CPU_ATTN: _roofline_time(attn.bytes_cpu, attn.flops, hw.b_c, hw.p_c),
        OFFLOAD_QKV: sizes.d1 / hw.b_cg,
        LOAD_H: sizes.d2 / hw.b_cg,
        KV_LOAD: sizes.d4 / hw.b_cg,
        CTOPIN: page / hw.b_c,
        PINTOG: page / hw.b_cg,
    }


# ---------------------------------------------------------------------------
# schedule construction

class _Builder:
    """Accumulates tasks in launch order and remembers ids by (kind, global layer, index)."""

    def __init__(self, n_ub: int, layers: int, steps: int, durations):
        self.n_ub = n_ub
        self.layers = layers
        self.steps = steps
        self.total_layers = layers * steps
        self.durations = durations  # callable (kind, step) -> per-instance duration
        self.tasks: List[Task] = []
        self.ids: Dict[tuple, int] = {}
        self.gated: List[Tuple[int, int]] = []  # (task id, global layer) resolved in finish()

    def step_of(self, G: int) -> int:
        return (G - 1) // self.layers + 1

    def local_layer(self, G: int) -> int:
        return (G - 1) % self.layers + 1

    def add(self, kind, G, deps=(), mb=None, page=None, scale=1):
        step = self.step_of(G)
        task = Task(id=len(self.tasks), kind=kind, resource=RESOURCE_OF[kind],
                    duration=self.durations(kind, step) * scale,
                    deps=tuple(d for d in deps if d is not None),
                    layer=self.local_layer(G), microbatch=mb, page=page, step=step)
        self.tasks.append(task)
        self.ids[(kind, G, mb if page is None else ("page", page))] = task.id
        return task.id

    def get(self, kind, G, mb=None, page=None):
        return self.ids.get((kind, G, mb if page is None else ("page", page)))

    def gate(self, task_id, G):
        """Make ``task_id`` wait for every weight transfer of layer G, even ones launched later."""
        self.gated.append((task_id, G))

    def finish(self) -> List[Task]:
        extra: Dict[int, List[int]] = {}
        for task_id, G in self.gated:
            keys = [(PINTOG, G, ("page", q)) for q in range(self.n_ub + 1)]
            extra.setdefault(task_id, []).extend(self.ids[k] for k in keys if k in self.ids)
        return [replace(t, deps=t.deps + tuple(extra[t.id])) if t.id in extra else t
                for t in self.tasks]

    def last_gpu(self, G):
        return self.get(POST_ATTN, G, self.n_ub)

    # flattened micro-batch index g (0-based) <-> (global layer, micro-batch)
    def unflatten(self, g):
        return g // self.n_ub + 1, g % self.n_ub + 1

    # pages: flattened P (0-based) <-> (global layer, page)
    def page_of(self, P):
        return P // self.n_ub + 1, P % self.n_ub + 1


def _paged_ctopin(b: _Builder, P: int):
    if P >= b.total_layers * b.n_ub:
        return
    G, q = b.page_of(P)
    prev_G, prev_q = b.page_of(P - 2 * b.n_ub) if P >= 2 * b.n_ub else (None, None)
    # pinned staging holds two layers' worth of pages
    dep = b.get(PINTOG, prev_G, page=prev_q) if prev_G else None
    b.add(CTOPIN, G, deps=[dep], page=q)


def _paged_pintog(b: _Builder, P: int):
    if P >= b.total_layers * b.n_ub:
        return
    G, q = b.page_of(P)
    # GPU weight buffer holds two layers: reuse the slot of layer G-2
    b.add(PINTOG, G, deps=[b.get(CTOPIN, G, page=q), b.last_gpu(G - 2)], page=q)


def _whole_layer_weights(b: _Builder, G: int):
    if G > b.total_layers:
        return
    b.add(CTOPIN, G, deps=[b.get(PINTOG, G - 2, page=0)], page=0, scale=b.n_ub)
    b.add(PINTOG, G, deps=[b.get(CTOPIN, G, page=0), b.last_gpu(G - 2)], page=0, scale=b.n_ub)


def _cpu_attention_head(b: _Builder, G: int, j: int, serial_after=None):
    """PreAttn -> OffloadQKV -> CPUAttn for micro-batch j of global layer G."""
    pre = b.add(PRE_ATTN, G, deps=[b.get(POST_ATTN, G - 1, j), serial_after], mb=j)
    b.gate(pre, G)
    off = b.add(OFFLOAD_QKV, G, deps=[pre], mb=j)
    b.add(CPU_ATTN, G, deps=[off], mb=j)


def _build_overlapped(b: _Builder, paged: bool):
    """CGOPipe (paged) and S2 (whole-layer weights): CPU attention two micro-batches ahead."""
    n_ub = b.n_ub
    ahead = min(2, n_ub)
    if paged:
        for P in range(n_ub):
            _paged_ctopin(b, P)
            _paged_pintog(b, P)
    else:
        _whole_layer_weights(b, 1)

    for step in range(1, b.steps + 1):
        first = (step - 1) * b.layers + 1
        last = step * b.layers
        for j in range(1, ahead + 1):
            _cpu_attention_head(b, first, j)
            if paged and step == 1:
                _paged_ctopin(b, n_ub + j - 1)
        for G in range(first, last + 1):
            for j in range(1, n_ub + 1):
                g = (G - 1) * n_ub + (j - 1)
                b.add(LOAD_H, G, deps=[b.get(CPU_ATTN, G, j)], mb=j)
                if paged:
                    _paged_pintog(b, g + n_ub)
                elif j == n_ub:
                    # the whole next layer queues behind this layer's uploads
                    _whole_layer_weights(b, G + 1)
                b.add(POST_ATTN, G, deps=[b.get(LOAD_H, G, j)], mb=j)
                G2, j2 = b.unflatten(g + ahead)
                if G2 <= last:
                    _cpu_attention_head(b, G2, j2)
                if paged:
                    _paged_ctopin(b, g + n_ub + ahead)


def _build_serial(b: _Builder):
    """S3: one micro-batch at a time through GPU, link and CPU; whole-layer weights."""
    _whole_layer_weights(b, 1)
    prev_post = None
    for G in range(1, b.total_layers + 1):
        for j in range(1, b.n_ub + 1):
            _cpu_attention_head(b, G, j, serial_after=prev_post)
            b.add(LOAD_H, G, deps=[b.get(CPU_ATTN, G, j)], mb=j)
            if j == b.n_ub:
                _whole_layer_weights(b, G + 1)
            prev_post = b.add(POST_ATTN, G, deps=[b.get(LOAD_H, G, j)], mb=j)


def _build_gpu_attention(b: _Builder):
    """S4: KV cache streamed per micro-batch (double-buffered), weights after the layer's KV."""
    _whole_layer_weights(b, 1)
    for G in range(1, b.total_layers + 1):
        for j in range(1, b.n_ub + 1):
            g = (G - 1) * b.n_ub + (j - 1)
            buffer_dep = b.get(GPU_ATTN, *b.unflatten(g - 2)) if g >= 2 else None
            kv = b.add(KV_LOAD, G, deps=[buffer_dep], mb=j)
            pre = b.add(PRE_ATTN, G, deps=[b.get(POST_ATTN, G - 1, j)], mb=j)
            b.gate(pre, G)
            attn = b.add(GPU_ATTN, G, deps=[pre, kv], mb=j)
            b.add(POST_ATTN, G, deps=[attn], mb=j)
        _whole_layer_weights(b, G + 1)


def build_schedule(hw: HardwareSpec, model: ModelSpec, workload: WorkloadSpec, policy: Policy,
                   kind: str = "cgopipe", layers: Optional[int] = None, steps: int = 1,
                   durations: Optional[Mapping[str, float]] = None) -> List[Task]:
    """Task DAG in launch order for ``steps`` decode steps over ``layers`` layers.

    Decode step ``d`` runs at context length ``s + d``.  ``durations`` overrides
    per-kind instance durations (weight kinds are per page).
    """
    validate(policy)
    if kind not in SCHEDULES:
        raise ValueError(f"unknown schedule {kind!r}; expected one of {SCHEDULES}")
    if kind == "s4":
        if not (policy.A_g and policy.F_g):
            raise UnsupportedCombination("s4 models GPU attention and GPU FFN (A_g=1, F_g=1)")
    elif policy.A_g or not policy.F_g:
        raise UnsupportedCombination(f"{kind} models CPU attention with GPU FFN (A_g=0, F_g=1); "
                                     "use s4 for A_g=1")
    layers = model.l if layers is None else layers
    if layers < 1 or steps < 1:
        raise ValueError("layers and steps must be >= 1")

    per_step = {}

    def lookup(task_kind, step):
        if durations is not None and task_kind in durations:
            return float(durations[task_kind])
        if step not in per_step:
            per_step[step] = task_durations(hw, model, policy, workload.s + step)
        return per_step[step][task_kind]

    b = _Builder(policy.n_ub, layers, steps, lookup)
    if kind == "cgopipe":
        _build_overlapped(b, paged=True)
    elif kind == "s2":
        _build_overlapped(b, paged=False)
    elif kind == "s3":
        _build_serial(b)
    else:
        _build_gpu_attention(b)
    return b.finish()


# ---------------------------------------------------------------------------
# execution

def _check_acyclic(tasks: Sequence[Task], index: Mapping[int, Task]):
    sorter = graphlib.TopologicalSorter()
    for t in tasks:
        for d in t.deps:
            if d not in index:
                raise SimulationError(f"task {t.id} depends on unknown task {d}")
        sorter.add(t.id, *t.deps)
    try:
        sorter.prepare()
    except graphlib.CycleError as exc:
        raise CycleDetected(f"dependency cycle through tasks {exc.args[1]}") from None


def simulate(dag: Sequence[Task], resources: Iterable[str] = RESOURCES,
             layers_per_step: Optional[int] = None) -> Timeline:
    """Run ``dag`` (in launch order) on FIFO resources and return the timeline."""
    resources = tuple(resources)
    index = {t.id: t for t in dag}
    if len(index) != len(dag):
        raise SimulationError("duplicate task ids")
    _check_acyclic(dag, index)
    queues = {r: deque() for r in resources}
    for t in dag:
        if t.resource not in queues:
            raise SimulationError(f"task {t.id} uses unknown resource {t.resource!r}")
        if not t.duration >= 0:
            raise SimulationError(f"task {t.id} has invalid duration {t.duration!r}")
        queues[t.resource].append(t)

    free = {r: 0.0 for r in resources}
    finish: Dict[int, float] = {}
    start: Dict[int, float] = {}
    remaining = len(dag)
    # start times are fixed once deps are placed, so any placement order gives the same result
    while remaining:
        progressed = False
        for r in resources:
            q = queues[r]
            while q and all(d in finish for d in q[0].deps):
                t = q.popleft()
                begin = max([free[r]] + [finish[d] for d in t.deps])
                start[t.id] = begin
                finish[t.id] = begin + t.duration
                free[r] = finish[t.id]
                remaining -= 1
                progressed = True
        if not progressed:
            heads = {r: q[0].id for r, q in queues.items() if q}
            raise ScheduleDeadlock(f"launch order deadlocks; blocked queue heads: {heads}")

    entries = [TimelineEntry(t, start[t.id], finish[t.id]) for t in dag]
    busy = {r: 0.0 for r in resources}
    for t in dag:
        busy[t.resource] += t.duration
    makespan = max(finish.values(), default=0.0)
    timeline = Timeline(entries, makespan, busy, layers_per_step)
    verify_timeline(timeline)
    return timeline


def verify_timeline(timeline: Timeline, rel_tol: float = 1e-9) -> None:
    """Raise AssertionError unless exclusivity, duration and dependency order all hold."""
    by_id = {e.task.id: e for e in timeline.entries}
    per_resource: Dict[str, List[TimelineEntry]] = {}
    for e in timeline.entries:
        scale = max(1.0, abs(e.end))
        assert abs((e.end - e.start) - e.task.duration) <= rel_tol * scale, f"duration mismatch on {e.task}"
        for d in e.task.deps:
            assert by_id[d].end <= e.start, f"task {e.task.id} starts before dependency {d} ends"
        per_resource.setdefault(e.task.resource, []).append(e)
    for r, entries in per_resource.items():
        entries.sort(key=lambda e: (e.start, e.end))
        for a, b in zip(entries, entries[1:]):
            assert b.start >= a.end, f"overlap on {r}: tasks {a.task.id} and {b.task.id}"


def layer_finish_times(timeline: Timeline) -> List[float]:
    """Completion time of the last GPU task of each (step, layer), in order."""
    ends: Dict[Tuple[int, int], float] = {}
    for e in timeline.entries:
        if e.task.resource == "gpu":
            key = (e.task.step, e.task.layer)
            ends[key] = max(ends.get(key, 0.0), e.end)
    return [ends[k] for k in sorted(ends)]


def metrics(timeline: Timeline) -> Metrics:
    """Makespan, per-resource utilization and the steady per-layer time.

    The steady per-layer time is the median gap between consecutive layer
    completions, skipping the first and last layer.  With fewer than three
    layers it falls back to makespan / layers.
    """
    if not timeline.entries:
        raise EmptyTimeline("timeline has no tasks")
    span = timeline.makespan
    util = {r: (b / span if span > 0 else 0.0) for r, b in timeline.busy.items()}
    ends = layer_finish_times(timeline)
    gaps = [b - a for a, b in zip(ends, ends[1:])][:-1]
    if gaps:
        steady = statistics.median(gaps)
    elif ends:
        steady = span / len(ends)
    else:
        steady = span
    return Metrics(span, util, steady)


def timeline_rows(timeline: Timeline) -> List[dict]:
    return [{
        "kind": e.task.kind,
        "step": e.task.step,
        "layer": e.task.layer,
        "microbatch": e.task.microbatch,
        "page": e.task.page,
        "resource": e.task.resource,
        "start": e.start,
        "end": e.end,
    } for e in timeline.entries]
