"""Two-level hierarchical roofline: GPU (level i) over CPU (level j)."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

from .config import HardwareSpec
from .opcost import OpProfile

ROOF_KINDS = ("compute_i", "compute_j", "mem_i", "mem_j", "mem_ji")


class MemoryLevel(enum.Enum):
    GPU = "gpu"  # level i
    CPU = "cpu"  # level j


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class RooflinePoint:
    series: str
    kind: str  # one of ROOF_KINDS or "op_point"
    intensity: float
    bound: float


def _peaks(level: MemoryLevel, hw: HardwareSpec) -> Tuple[float, float]:
    if level is MemoryLevel.GPU:
        return hw.p_g, hw.b_g
    if level is MemoryLevel.CPU:
        return hw.p_c, hw.b_c
    raise ValueError(f"unknown level {level!r}")


def _roof(bandwidth: float, intensity: float) -> float:
    # bandwidth * inf is inf, but 0 intensity must stay 0 even for huge bandwidth
    return 0.0 if intensity == 0 else bandwidth * intensity


def attainable_local(level: MemoryLevel, I: float, hw: HardwareSpec) -> float:
    """Classic roofline at one level: min(P_peak, B_peak * I)."""
    if I < 0:
        raise ValueError("intensity must be non-negative")
    peak, bandwidth = _peaks(level, hw)
    return min(peak, _roof(bandwidth, I))


def attainable_cross(I_i: float, I_j: float, hw: HardwareSpec) -> float:
    """GPU-executed work whose data partly streams in from CPU memory."""
    if I_i < 0 or I_j < 0:
        raise ValueError("intensities must be non-negative")
    return min(hw.p_g, _roof(hw.b_g, I_i), _roof(hw.b_cg, I_j))


def turning_point_p1(I_j: float, hw: HardwareSpec) -> float:
    """CPU-side intensity below which shipping data to the GPU cannot beat computing on the CPU."""
    if I_j < 0:
        raise ValueError("intensity must be non-negative")
    return min(hw.p_c, _roof(hw.b_c, I_j)) / hw.b_cg


def turning_point_p2(I_i: float, hw: HardwareSpec) -> float:
    """CPU-side intensity below which the link, not the GPU, is the binding roof."""
    if I_i < 0:
        raise ValueError("intensity must be non-negative")
    return min(hw.p_g, _roof(hw.b_g, I_i)) / hw.b_cg


def balance_gap(I_i: float, I_j: float, hw: HardwareSpec) -> float:
    """b_g*I_i - b_cg*I_j.  Zero at the balance point; positive when the link starves the GPU."""
    return hw.b_g * I_i - hw.b_cg * I_j


def intensity_grid(lo: float = 1e-2, hi: float = 1e4, per_decade: int = 64) -> np.ndarray:
    decades = math.log10(hi) - math.log10(lo)
    count = int(round(decades * per_decade)) + 1
    return np.logspace(math.log10(lo), math.log10(hi), count)


def roof_curves(hw: HardwareSpec, grid: Sequence[float]) -> List[RooflinePoint]:
    slopes = {"mem_i": hw.b_g, "mem_j": hw.b_c, "mem_ji": hw.b_cg}
    points = []
    for kind in ROOF_KINDS:
        for I in grid:
            I = float(I)
            if kind == "compute_i":
                bound = hw.p_g
            elif kind == "compute_j":
                bound = hw.p_c
            else:
                bound = slopes[kind] * I
            points.append(RooflinePoint("roof", kind, I, bound))
    return points


def roofline_series(op_profiles: Union[Sequence[OpProfile], Sequence[Tuple[str, OpProfile]]],
                    hw: HardwareSpec, grid: Iterable[float] = None) -> List[RooflinePoint]:
    """Roof curves plus one operating point per profile per memory level.

    ``op_profiles`` may be bare profiles (named ``op0``, ``op1``, ...) or
    ``(name, profile)`` pairs.  The GPU point is bounded by the cross-level
    roofline when the profile moves bytes over the link.
    """
    if not op_profiles:
        raise EmptyInput("roofline_series needs at least one profile")
    named = []
    for idx, item in enumerate(op_profiles):
        if isinstance(item, OpProfile):
            named.append((f"op{idx}", item))
        else:
            named.append(item)

    points = []
    for name, prof in named:
        if prof.bytes_gpu <= 0 and prof.bytes_cpu <= 0:
            raise ValueError(f"profile {name!r} moves no bytes; intensity is undefined")
        I_i = prof.intensity("gpu")
        I_j = prof.intensity("cpu")
        if prof.bytes_link > 0:
            gpu_bound = attainable_cross(I_i, prof.intensity("link"), hw)
        else:
            gpu_bound = attainable_local(MemoryLevel.GPU, I_i, hw)
        points.append(RooflinePoint(f"{name}@gpu", "op_point", I_i, gpu_bound))
        points.append(RooflinePoint(f"{name}@cpu", "op_point", I_j,
                                    attainable_local(MemoryLevel.CPU, I_j, hw)))
    if grid is None:
        grid = intensity_grid()
    points.extend(roof_curves(hw, list(grid)))
    return points
