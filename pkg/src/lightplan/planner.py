"""Per-layer decode latency model, memory feasibility and policy search."""

from __future__ import annotations

import dataclasses
import itertools
import logging
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import opcost
from .config import HardwareSpec, ModelSpec, Policy, WorkloadSpec, validate

log = logging.getLogger(__name__)

OBJECTIVES = ("per_token", "layer")


class InfeasiblePolicy(ValueError):
    pass


class NoFeasiblePolicy(RuntimeError):
    """No candidate fits in memory.  ``constraint`` names the closest miss."""

    def __init__(self, constraint: str, needed: float, available: float, policy: Optional[Policy]):
        self.constraint = constraint
        self.needed = needed
        self.available = available
        self.policy = policy
        super().__init__(f"no feasible policy: tightest constraint is {constraint} "
                         f"({needed:.6g} bytes needed, {available:.6g} available, policy {policy})")


@dataclass(frozen=True)
class LatencyBreakdown:
    comm_cpu_to_gpu: float
    t_attn_g: float
    t_ffn_g: float
    t_attn_c: float
    t_ffn_c: float
    t_layer: float
    t_proj_g: float = 0.0  # projections, only when neither attention nor FFN is on the GPU

    @property
    def t_cpu(self) -> float:
        return self.t_attn_c + self.t_ffn_c

    @property
    def t_gpu(self) -> float:
        return self.t_attn_g + self.t_ffn_g + self.t_proj_g


@dataclass(frozen=True)
class MemoryFootprint:
    gpu_bytes: float
    cpu_bytes: float
    feasible: bool


@dataclass(frozen=True)
class PlanResult:
    policy: Policy
    breakdown: LatencyBreakdown
    memory: MemoryFootprint
    decode_throughput: float
    generation_throughput: float
    objective: float = float("nan")
    ctx: float = float("nan")


def default_ctx(workload: WorkloadSpec) -> float:
    """Mid-generation context length used as the search objective's operating point."""
    return workload.s + workload.n / 2


def _roofline_time(nbytes, flops, bandwidth, peak):
    return max(nbytes / bandwidth, flops / peak)


def comm_bytes(model: ModelSpec, policy: Policy, ctx) -> float:
    """Bytes crossing CPU->GPU per layer: streamed weights plus per-micro-batch hidden and KV uploads."""
    t = opcost.transfer_sizes(model, policy, ctx)
    return t.d3 + policy.n_ub * t.d2 + policy.n_ub * t.d4


def layer_latency(hw: HardwareSpec, model: ModelSpec, workload: WorkloadSpec, policy: Policy,
                  ctx=None, strict: bool = True) -> LatencyBreakdown:
    """Per-layer decode latency: max(comm, T_cpu, T_gpu).

    Each placed computation costs max(bytes/bandwidth, flops/peak) on its
    device.  Projections always run on the GPU and are folded into the FFN
    term (or the attention term when only attention is on the GPU).
    With ``strict`` an out-of-memory policy raises InfeasiblePolicy.
    """
    if ctx is None:
        ctx = default_ctx(workload)
    if strict:
        mem = memory_footprint(hw, model, workload, policy)
        if not mem.feasible:
            raise InfeasiblePolicy(f"{policy} needs {mem.gpu_bytes:.6g} GPU / {mem.cpu_bytes:.6g} CPU bytes")
    n_ub = policy.n_ub
    attn = opcost.attn_decode_profile(model, policy.mu, ctx)
    ffn = opcost.moe_ffn_profile(model, policy.mu, policy.r_w)
    pre, post = opcost.proj_profiles(model, policy.mu)
    proj = pre + post

    t_attn_g = t_attn_c = t_ffn_g = t_ffn_c = t_proj_g = 0.0
    proj_folded = False
    if policy.F_g:
        t_ffn_g = _roofline_time(n_ub * (ffn.bytes_gpu + proj.bytes_gpu), n_ub * (ffn.flops + proj.flops),
                                 hw.b_g, hw.p_g)
        proj_folded = True
    else:
        t_ffn_c = _roofline_time(n_ub * ffn.bytes_gpu, n_ub * ffn.flops, hw.b_c, hw.p_c)
    if policy.A_g:
        if proj_folded:
            t_attn_g = _roofline_time(n_ub * attn.bytes_gpu, n_ub * attn.flops, hw.b_g, hw.p_g)
        else:
            t_attn_g = _roofline_time(n_ub * (attn.bytes_gpu + proj.bytes_gpu), n_ub * (attn.flops + proj.flops),
                                      hw.b_g, hw.p_g)
            proj_folded = True
    else:
        t_attn_c = _roofline_time(n_ub * attn.bytes_cpu, n_ub * attn.flops, hw.b_c, hw.p_c)
    if not proj_folded:
        t_proj_g = _roofline_time(n_ub * proj.bytes_gpu, n_ub * proj.flops, hw.b_g, hw.p_g)

    comm = comm_bytes(model, policy, ctx) / hw.b_cg
    t_layer = max(comm, t_attn_c + t_ffn_c, t_attn_g + t_ffn_g + t_proj_g)
    return LatencyBreakdown(comm, t_attn_g, t_ffn_g, t_attn_c, t_ffn_c, t_layer, t_proj_g)


def activation_peak_bytes(model: ModelSpec, mu: int) -> float:
    return mu * (model.h1 + 2 * model.h2) * model.dt_w


def memory_footprint(hw: HardwareSpec, model: ModelSpec, workload: WorkloadSpec,
                     policy: Policy) -> MemoryFootprint:
    """GPU/CPU residency: static weights, the 2-layer weight double buffer and its pinned
    staging copy, the KV split by r_c, and the GPU activation peak."""
    totals = opcost.memory_totals(model, workload, policy.N)
    w_layer = opcost.layer_weight_bytes(model)
    offloaded = 1 - policy.r_w
    gpu = (policy.r_w * totals.w_total + 2 * offloaded * w_layer + policy.r_c * totals.kv_total
           + activation_peak_bytes(model, policy.mu))
    cpu = offloaded * totals.w_total + (1 - policy.r_c) * totals.kv_total + 2 * offloaded * w_layer
    return MemoryFootprint(gpu, cpu, gpu <= hw.m_g and cpu <= hw.m_c)


def apply_tensor_parallelism(hw: HardwareSpec, tp: int) -> HardwareSpec:
    """Scale GPU capacity, bandwidth and peak by ``tp``; CPU side and link unchanged."""
    if tp < 1:
        raise ValueError("tp must be >= 1")
    return dataclasses.replace(hw, m_g=hw.m_g * tp, b_g=hw.b_g * tp, p_g=hw.p_g * tp)


def cpu_attention_vs_kv_transfer(hw: HardwareSpec, model: ModelSpec, mu: int, ctx) -> Tuple[float, float]:
    """(CPU attention time, time to ship the same micro-batch's KV to the GPU)."""
    attn = opcost.attn_decode_profile(model, mu, ctx)
    policy = Policy(N=mu, mu=mu, A_g=True, F_g=True, r_w=0.0, r_c=0.0)
    d4 = opcost.transfer_sizes(model, policy, ctx).d4
    return _roofline_time(attn.bytes_cpu, attn.flops, hw.b_c, hw.p_c), d4 / hw.b_cg


def prefill_time(hw: HardwareSpec, model: ModelSpec, workload: WorkloadSpec, policy: Policy) -> float:
    """All prefill compute on the GPU with weights streamed in; I/O overlaps compute."""
    per_ub = opcost.prefill_profile(model, policy.mu, workload.s)
    compute = policy.n_ub * per_ub.flops / hw.p_g
    stream = (1 - policy.r_w) * opcost.layer_weight_bytes(model) / hw.b_cg
    return model.l * max(stream, compute)


def decode_time(hw, model, workload, policy) -> float:
    total = 0.0
    for d in range(1, workload.n + 1):
        total += layer_latency(hw, model, workload, policy, ctx=workload.s + d, strict=False).t_layer
    return model.l * total


def estimate_throughput(hw: HardwareSpec, model: ModelSpec, workload: WorkloadSpec, policy: Policy,
                        ctx=None, objective: str = "per_token") -> PlanResult:
    validate(policy)
    mem = memory_footprint(hw, model, workload, policy)
    if not mem.feasible:
        raise InfeasiblePolicy(f"{policy} does not fit: GPU {mem.gpu_bytes:.6g}/{hw.m_g:.6g}, "
                               f"CPU {mem.cpu_bytes:.6g}/{hw.m_c:.6g} bytes")
    if ctx is None:
        ctx = default_ctx(workload)
    breakdown = layer_latency(hw, model, workload, policy, ctx=ctx, strict=False)
    decode = decode_time(hw, model, workload, policy)
    prefill = prefill_time(hw, model, workload, policy)
    generated = policy.N * workload.n
    return PlanResult(policy, breakdown, mem,
                      decode_throughput=generated / decode,
                      generation_throughput=generated / (prefill + decode),
                      objective=objective_value(breakdown.t_layer, policy.N, objective),
                      ctx=ctx)


def objective_value(t_layer: float, N: int, objective: str) -> float:
    if objective == "per_token":
        return t_layer / N
    if objective == "layer":
        return t_layer
    raise ValueError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")


# ---------------------------------------------------------------------------
# search

def default_mu_values(max_pow2: int = 1024, max_mult4: int = 256) -> Tuple[int, ...]:
    pow2 = {1 << e for e in range(max_pow2.bit_length()) if (1 << e) <= max_pow2}
    return tuple(sorted(pow2 | set(range(4, max_mult4 + 1, 4))))


def ratio_values(step: float = 0.05) -> Tuple[float, ...]:
    count = int(round(1 / step))
    return tuple(round(i * step, 10) for i in range(count + 1))


@dataclass(frozen=True)
class SearchGrid:
    mu_values: Tuple[int, ...] = field(default_factory=default_mu_values)
    n_ub_values: Tuple[int, ...] = tuple(range(1, 129))
    r_w_values: Tuple[float, ...] = field(default_factory=ratio_values)
    r_c_values: Tuple[float, ...] = field(default_factory=ratio_values)
    A_g_values: Tuple[bool, ...] = (False, True)
    F_g_values: Tuple[bool, ...] = (False, True)

    def r_c_for(self, A_g: bool) -> Tuple[float, ...]:
        # KV stays on the CPU for CPU attention
        return tuple(self.r_c_values) if A_g else (0.0,)

    def candidates(self) -> Iterator[Policy]:
        for A_g, F_g in itertools.product(self.A_g_values, self.F_g_values):
            for mu, n_ub, r_w, r_c in itertools.product(self.mu_values, self.n_ub_values,
                                                          self.r_w_values, self.r_c_for(A_g)):
                yield Policy(N=mu * n_ub, mu=mu, A_g=bool(A_g), F_g=bool(F_g), r_w=r_w, r_c=r_c)

    def size(self) -> int:
        per_combo = len(self.mu_values) * len(self.n_ub_values) * len(self.r_w_values)
        return sum(per_combo * len(self.r_c_for(A_g)) for A_g in self.A_g_values for _ in self.F_g_values)


def selection_key(objective: float, mem: MemoryFootprint, policy: Policy):
    """Total order used to pick a winner: objective, then CPU bytes, then N, then the policy tuple.

    The objective is rounded to 12 significant digits so that candidates tied
    in exact arithmetic are separated by the tie-breaks, not by rounding noise.
    """
    return (float(f"{objective:.12g}"), mem.cpu_bytes, policy.N, policy.as_tuple())


def _grid_slice(hw, model, workload, ctx, mu, A_g, F_g, n_ub, r_w, r_c):
    """Vectorised twin of layer_latency/memory_footprint over (n_ub, r_w, r_c) for one mu."""
    n = n_ub[:, None, None].astype(float)
    rw = r_w[None, :, None]
    rc = r_c[None, None, :]
    N = n * mu

    attn = opcost.attn_decode_profile(model, mu, ctx)
    ffn0 = opcost.moe_ffn_profile(model, mu, 0.0)
    pre, post = opcost.proj_profiles(model, mu)
    proj = pre + post

    zero = np.zeros((len(n_ub), len(r_w), len(r_c)))
    t_attn_g = t_attn_c = t_ffn_g = t_ffn_c = t_proj_g = zero
    folded = False
    if F_g:
        t_ffn_g = np.maximum(n * (ffn0.bytes_gpu + proj.bytes_gpu) / hw.b_g,
                             n * (ffn0.flops + proj.flops) / hw.p_g) + zero
        folded = True
    else:
        t_ffn_c = np.maximum(n * ffn0.bytes_gpu / hw.b_c, n * ffn0.flops / hw.p_c) + zero
    if A_g:
        extra_b, extra_f = (0, 0) if folded else (proj.bytes_gpu, proj.flops)
        t_attn_g = np.maximum(n * (attn.bytes_gpu + extra_b) / hw.b_g,
                              n * (attn.flops + extra_f) / hw.p_g) + zero
        folded = True
    else:
        t_attn_c = np.maximum(n * attn.bytes_cpu / hw.b_c, n * attn.flops / hw.p_c) + zero
    if not folded:
        t_proj_g = np.maximum(n * proj.bytes_gpu / hw.b_g, n * proj.flops / hw.p_g) + zero

    probe = Policy(N=mu, mu=mu, A_g=A_g, F_g=F_g, r_w=0.0, r_c=0.0)
    sizes = opcost.transfer_sizes(model, probe, ctx)  # d3 and d4 at r_w = r_c = 0
    comm = ((1 - rw) * sizes.d3 + n * sizes.d2 + n * (1 - rc) * sizes.d4) / hw.b_cg
    t_layer = np.maximum(np.maximum(comm, t_attn_c + t_ffn_c), t_attn_g + t_ffn_g + t_proj_g)

    w_layer = opcost.layer_weight_bytes(model)
    w_total = model.l * w_layer
    kv_total = N * opcost.memory_totals(model, workload, 1).kv_total
    gpu = rw * w_total + 2 * (1 - rw) * w_layer + rc * kv_total + activation_peak_bytes(model, mu)
    cpu = (1 - rw) * w_total + (1 - rc) * kv_total + 2 * (1 - rw) * w_layer
    return t_layer + zero, gpu + zero, cpu + zero, N + zero


def search_policy(hw: HardwareSpec, model: ModelSpec, workload: WorkloadSpec,
                  grid: Optional[SearchGrid] = None, ctx=None, objective: str = "per_token",
                  with_throughput: bool = True, rel_band: float = 1e-9) -> PlanResult:
    """Exhaustive grid search for the feasible policy with the smallest objective.

    The grid is scored with numpy; every candidate within ``rel_band`` of the
    best score is re-scored with the scalar model and the winner is chosen by
    ``selection_key``, so the result is independent of evaluation order.
    """
    grid = grid or SearchGrid()
    if grid.size() == 0:
        raise ValueError("empty search grid")
    if ctx is None:
        ctx = default_ctx(workload)
    objective_value(1.0, 1, objective)  # reject unknown objectives early

    best = np.inf
    band: List[Tuple[float, Policy]] = []
    closest = (np.inf, None, 0.0, 0.0, None)  # (ratio, constraint, needed, available, policy)
    n_ub = np.asarray(grid.n_ub_values, dtype=np.int64)
    r_w = np.asarray(grid.r_w_values, dtype=float)

    for A_g, F_g in itertools.product(grid.A_g_values, grid.F_g_values):
        r_c = np.asarray(grid.r_c_for(A_g), dtype=float)
        for mu in grid.mu_values:
            t_layer, gpu, cpu, N = _grid_slice(hw, model, workload, ctx, mu, A_g, F_g, n_ub, r_w, r_c)
            score = t_layer / N if objective == "per_token" else t_layer
            # loose mask; the scalar model makes the final feasibility call
            feasible = (gpu <= hw.m_g * (1 + 1e-12)) & (cpu <= hw.m_c * (1 + 1e-12))
            if not feasible.any():
                ratio = np.maximum(gpu / hw.m_g, cpu / hw.m_c)
                idx = np.unravel_index(np.argmin(ratio), ratio.shape)
                if ratio[idx] < closest[0]:
                    on_gpu = gpu[idx] / hw.m_g >= cpu[idx] / hw.m_c
                    closest = (ratio[idx], "gpu_memory" if on_gpu else "cpu_memory",
                               float(gpu[idx] if on_gpu else cpu[idx]), hw.m_g if on_gpu else hw.m_c,
                               Policy(int(mu * n_ub[idx[0]]), mu, bool(A_g), bool(F_g),
                                      float(r_w[idx[1]]), float(r_c[idx[2]])))
                continue
            masked = np.where(feasible, score, np.inf)
            local = masked.min()
            if local > best * (1 + rel_band):
                continue
            if local < best:
                best = local
                band = [(s, p) for s, p in band if s <= best * (1 + rel_band)]
            for i, j, c in zip(*np.nonzero(masked <= best * (1 + rel_band))):
                band.append((float(masked[i, j, c]),
                             Policy(int(mu * n_ub[i]), int(mu), bool(A_g), bool(F_g),
                                    float(r_w[j]), float(r_c[c]))))

    if not band:
        _, constraint, needed, available, policy = closest
        raise NoFeasiblePolicy(constraint or "gpu_memory", needed, available, policy)

    winner = None
    for score, policy in band:
        if score > best * (1 + rel_band):
            continue
        mem = memory_footprint(hw, model, workload, policy)
        if not mem.feasible:
            continue
        bd = layer_latency(hw, model, workload, policy, ctx=ctx, strict=False)
        key = selection_key(objective_value(bd.t_layer, policy.N, objective), mem, policy)
        if winner is None or key < winner[0]:
            winner = (key, policy, bd, mem)
    key, policy, bd, mem = winner
    log.debug("search_policy: %d candidates in final band, winner %s", len(band), policy)
    if with_throughput:
        return estimate_throughput(hw, model, workload, policy, ctx=ctx, objective=objective)
    return PlanResult(policy, bd, mem, float("nan"), float("nan"), objective=key[0], ctx=ctx)

