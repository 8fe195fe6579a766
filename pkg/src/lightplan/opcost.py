"""Theoretical FLOP and byte counts for one transformer-MoE layer.

Only matmuls are counted.  Softmax, layer norm and router FLOPs are ignored
as lower-order terms; the router's weights are still part of the per-layer
weight bytes because they must live somewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

from .config import ModelSpec, Policy, WorkloadSpec

LEVELS = ("gpu", "cpu", "link")


@dataclass(frozen=True)
class OpProfile:
    """FLOPs and bytes touched at each memory level for one operator instance."""

    flops: float
    bytes_gpu: float
    bytes_cpu: float
    bytes_link: float

    def intensity(self, level: str) -> float:
        """Operational intensity (FLOP/byte) against ``level``; ``inf`` when no bytes move there."""
        traffic = getattr(self, f"bytes_{level}")
        if traffic == 0:
            return math.inf
        return self.flops / traffic

    def __add__(self, other: "OpProfile") -> "OpProfile":
        return OpProfile(self.flops + other.flops, self.bytes_gpu + other.bytes_gpu,
                         self.bytes_cpu + other.bytes_cpu, self.bytes_link + other.bytes_link)

    def scaled(self, factor) -> "OpProfile":
        return OpProfile(self.flops * factor, self.bytes_gpu * factor,
                         self.bytes_cpu * factor, self.bytes_link * factor)


@dataclass(frozen=True)
class TransferSizes:
    d1: float  # QKV (or hidden) device-to-host, per micro-batch
    d2: float  # hidden host-to-device, per micro-batch
    d3: float  # streamed weights, per layer
    d4: float  # KV cache host-to-device, per micro-batch


@dataclass(frozen=True)
class MemoryTotals:
    w_total: float
    kv_total: float
    expert_total: float


def _check_tokens(name, value):
    if value < 1:
        raise ValueError(f"{name} must be >= 1, got {value}")


def kv_bytes_per_token(model: ModelSpec) -> float:
    """K and V bytes for one token in one layer."""
    return 2 * model.n_kv * model.d_head * model.dt_kv


def expert_params(model: ModelSpec) -> int:
    """Parameters of all experts in one layer (gate, up and down projections)."""
    return model.n_e * 3 * model.h1 * model.h2


def layer_params(model: ModelSpec) -> int:
    return (expert_params(model)
            + model.h1 * model.qkv_dim  # fused QKV
            + model.h1 * model.h1  # O projection
            + model.h1 * model.n_e)  # router


def layer_weight_bytes(model: ModelSpec) -> float:
    """W_layer: bytes of every weight in one layer."""
    return layer_params(model) * model.dt_w


def attn_decode_profile(model: ModelSpec, mu: int, ctx) -> OpProfile:
    """Decode-step attention for ``mu`` sequences over ``ctx`` cached tokens.

    FLOPs cover QK^T and PV; bytes cover the K and V reads.  The profile is
    placement-agnostic: the same KV bytes are read from whichever level holds
    the cache, and would cross the link if the cache had to be shipped.
    """
    _check_tokens("mu", mu)
    if ctx < 1:
        raise ValueError(f"ctx must be >= 1, got {ctx}")
    flops = mu * 4 * model.n_q * model.d_head * ctx
    kv = mu * 2 * ctx * model.n_kv * model.d_head * model.dt_kv
    return OpProfile(flops, kv, kv, kv)


def moe_ffn_profile(model: ModelSpec, mu: int, r_w: float = 0.0) -> OpProfile:
    """Top-k MoE FFN for a micro-batch of ``mu`` tokens.

    Every expert of the layer is counted as read and, for the non-resident
    fraction, shipped: routing is unknown until the router runs.
    """
    _check_tokens("mu", mu)
    flops = mu * model.k * 2 * (3 * model.h1 * model.h2)
    weights = expert_params(model) * model.dt_w
    activations = mu * (model.h1 + model.h2) * model.dt_w
    offloaded = (1 - r_w) * weights
    return OpProfile(flops, weights + activations, offloaded, offloaded)


def proj_profiles(model: ModelSpec, mu: int) -> Tuple[OpProfile, OpProfile]:
    """(pre-attention QKV projection, post-attention O projection); weight reads only."""
    _check_tokens("mu", mu)
    qkv_weights = model.h1 * model.qkv_dim * model.dt_w
    o_weights = model.h1 * model.h1 * model.dt_w
    pre = OpProfile(mu * 2 * model.h1 * model.qkv_dim, qkv_weights, 0, 0)
    post = OpProfile(mu * 2 * model.h1 * model.h1, o_weights, 0, 0)
    return pre, post


def streamed_weight_bytes(model: ModelSpec, policy: Policy) -> float:
    """Weight bytes crossing the link per layer (d3)."""
    per_layer = layer_weight_bytes(model)
    if not policy.F_g:
        # experts are consumed where they live, on the CPU
        per_layer -= expert_params(model) * model.dt_w
    return (1 - policy.r_w) * per_layer


def transfer_sizes(model: ModelSpec, policy: Policy, ctx) -> TransferSizes:
    mu = policy.mu
    hidden = mu * model.h1 * model.dt_w
    if not policy.A_g:
        d1 = mu * model.qkv_dim * model.dt_w
    elif not policy.F_g:
        d1 = hidden
    else:
        d1 = 0
    d2 = hidden if (not policy.A_g or not policy.F_g) else 0
    d4 = 0
    if policy.A_g:
        d4 = (1 - policy.r_c) * mu * 2 * ctx * model.n_kv * model.d_head * model.dt_kv
    return TransferSizes(d1=d1, d2=d2, d3=streamed_weight_bytes(model, policy), d4=d4)


def memory_totals(model: ModelSpec, workload: WorkloadSpec, N: int) -> MemoryTotals:
    """Model weight bytes and the KV cache for ``N`` sequences at full length."""
    w_total = model.l * layer_weight_bytes(model)
    kv_total = N * (workload.s + workload.n) * 2 * model.n_kv * model.d_head * model.l * model.dt_kv
    expert_total = model.l * expert_params(model) * model.dt_w
    return MemoryTotals(w_total, kv_total, expert_total)


def prefill_profile(model: ModelSpec, mu: int, s: int) -> OpProfile:
    """One layer of prefill for ``mu`` prompts of ``s`` tokens, causal attention."""
    tokens = mu * s
    pre, post = proj_profiles(model, tokens)
    ffn = moe_ffn_profile(model, tokens)
    attn_flops = mu * 4 * model.n_q * model.d_head * s * (s + 1) / 2
    return pre + post + ffn + OpProfile(attn_flops, 0, 0, 0)
