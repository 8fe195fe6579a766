"""Hardware, model, workload and policy descriptions plus their config-file grammar.

Config files are line oriented::

    [hardware]
    m_g = 24G        # bytes
    b_cg = 16G       # bytes/sec, each direction
    p_g = 121TFLOPS

    [model]
    l = 32
    ...

Memory and bandwidth values accept ``K|M|G|T`` suffixes (powers of 1000),
FLOP rates accept ``GFLOPS|TFLOPS``.  Unknown keys and sections are errors.
"""

from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass
from decimal import Decimal
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

# Violation kinds reported by validate().
NON_POSITIVE = "NonPositiveField"
DIVISIBILITY = "DivisibilityViolation"
POLICY_INCONSISTENCY = "PolicyInconsistency"
HIERARCHY = "HierarchyViolation"
RANGE = "RangeViolation"


class Violation(NamedTuple):
    kind: str
    field: str
    message: str

    def __str__(self):
        return f"{self.kind}: {self.message}"


class ValidationError(ValueError):
    """Raised when one or more invariants of a spec are violated."""

    def __init__(self, violations: List[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))

    @property
    def kinds(self) -> List[str]:
        return [v.kind for v in self.violations]


class ParseError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


@dataclass(frozen=True)
class HardwareSpec:
    m_g: float  # GPU memory, bytes
    m_c: float  # CPU memory, bytes
    b_g: float  # GPU memory bandwidth, bytes/s
    b_c: float  # CPU memory bandwidth, bytes/s
    b_cg: float  # CPU<->GPU link, bytes/s per direction
    p_g: float  # GPU peak, FLOP/s
    p_c: float  # CPU peak, FLOP/s


@dataclass(frozen=True)
class ModelSpec:
    l: int
    h1: int
    h2: int
    n_q: int
    n_kv: int
    n_e: int
    k: int
    dt_w: float = 2
    dt_kv: float = 2

    @property
    def d_head(self) -> int:
        return self.h1 // self.n_q

    @property
    def qkv_dim(self) -> int:
        """Output width of the fused QKV projection."""
        return (self.n_q + 2 * self.n_kv) * self.d_head


@dataclass(frozen=True)
class WorkloadSpec:
    s: int  # average prompt length
    n: int  # generation length


@dataclass(frozen=True)
class Policy:
    N: int
    mu: int
    A_g: bool
    F_g: bool
    r_w: float = 0.0
    r_c: float = 0.0

    @property
    def n_ub(self) -> int:
        return self.N // self.mu

    def as_tuple(self) -> tuple:
        return (self.N, self.mu, int(self.A_g), int(self.F_g), self.r_w, self.r_c)


Spec = Union[HardwareSpec, ModelSpec, WorkloadSpec, Policy]


def _positive(obj, names) -> List[Violation]:
    out = []
    for name in names:
        value = getattr(obj, name)
        if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
            out.append(Violation(NON_POSITIVE, name, f"{name} must be positive and finite, got {value!r}"))
    return out


def violations(spec: Spec) -> List[Violation]:
    """Every invariant ``spec`` breaks; empty when valid."""
    if isinstance(spec, HardwareSpec):
        out = _positive(spec, [f.name for f in dataclasses.fields(spec)])
        if not out:
            if spec.p_g < spec.p_c:
                out.append(Violation(HIERARCHY, "p_g", "GPU peak p_g must be >= CPU peak p_c"))
            if spec.b_g < spec.b_c:
                out.append(Violation(HIERARCHY, "b_g", "GPU bandwidth b_g must be >= CPU bandwidth b_c"))
        return out
    if isinstance(spec, ModelSpec):
        out = _positive(spec, [f.name for f in dataclasses.fields(spec)])
        for name in ("l", "h1", "h2", "n_q", "n_kv", "n_e", "k"):
            if not isinstance(getattr(spec, name), int) or isinstance(getattr(spec, name), bool):
                out.append(Violation(RANGE, name, f"{name} must be an integer"))
        if out:
            return out
        if spec.n_q % spec.n_kv:
            out.append(Violation(DIVISIBILITY, "n_q", f"n_q={spec.n_q} is not divisible by n_kv={spec.n_kv}"))
        if spec.h1 % spec.n_q:
            out.append(Violation(DIVISIBILITY, "h1", f"h1={spec.h1} is not divisible by n_q={spec.n_q}"))
        if not 1 <= spec.k <= spec.n_e:
            out.append(Violation(RANGE, "k", f"top-k k={spec.k} must lie in [1, n_e={spec.n_e}]"))
        return out
    if isinstance(spec, WorkloadSpec):
        out = []
        for name in ("s", "n"):
            value = getattr(spec, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                out.append(Violation(NON_POSITIVE, name, f"{name} must be an integer >= 1, got {value!r}"))
        return out
    if isinstance(spec, Policy):
        out = []
        for name in ("N", "mu"):
            value = getattr(spec, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                out.append(Violation(NON_POSITIVE, name, f"{name} must be an integer >= 1, got {value!r}"))
        for name in ("r_w", "r_c"):
            value = getattr(spec, name)
            if not (isinstance(value, (int, float)) and 0.0 <= value <= 1.0):
                out.append(Violation(RANGE, name, f"{name} must lie in [0, 1], got {value!r}"))
        bad = {v.field for v in out}
        if not bad & {"N", "mu"}:
            if spec.N < spec.mu:
                out.append(Violation(DIVISIBILITY, "N", f"N={spec.N} is smaller than mu={spec.mu}"))
            elif spec.N % spec.mu:
                out.append(Violation(DIVISIBILITY, "N", f"N={spec.N} is not divisible by mu={spec.mu}"))
        if isinstance(spec.r_c, (int, float)) and not spec.A_g and spec.r_c > 0:
            out.append(Violation(POLICY_INCONSISTENCY, "r_c",
                                 f"r_c={spec.r_c} > 0 requires GPU attention (A_g=1)"))
        return out
    raise TypeError(f"cannot validate {type(spec).__name__}")


def validate(spec: Spec) -> Spec:
    """Return ``spec`` unchanged if it is valid, else raise ValidationError."""
    found = violations(spec)
    if found:
        raise ValidationError(found)
    return spec


# ---------------------------------------------------------------------------
# config grammar

_SECTIONS = {
    "hardware": HardwareSpec,
    "model": ModelSpec,
    "workload": WorkloadSpec,
    "policy": Policy,
}

_BYTE_FIELDS = {"m_g", "m_c", "b_g", "b_c", "b_cg"}
_FLOP_FIELDS = {"p_g", "p_c"}
_INT_FIELDS = {"l", "h1", "h2", "n_q", "n_kv", "n_e", "k", "s", "n", "N", "mu"}
_BOOL_FIELDS = {"A_g", "F_g"}

_SCALE = {"": 1, "K": 10**3, "M": 10**6, "G": 10**9, "T": 10**12}
_NUMBER = r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?"
_BYTES_RE = re.compile(rf"^({_NUMBER})\s*([KMGT]?)(?:B(?:/s)?)?$")
_FLOPS_RE = re.compile(rf"^({_NUMBER})\s*(GFLOPS|TFLOPS)?$", re.IGNORECASE)


def _scaled(number: str, factor: int) -> float:
    return float(Decimal(number) * factor)


def parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _BYTE_FIELDS:
        m = _BYTES_RE.match(raw)
        if not m:
            raise ValueError(f"bad byte quantity {raw!r} for {key} (expected e.g. 16G)")
        return _scaled(m.group(1), _SCALE[m.group(2)])
    if key in _FLOP_FIELDS:
        m = _FLOPS_RE.match(raw)
        if not m:
            raise ValueError(f"bad FLOP rate {raw!r} for {key} (expected e.g. 65TFLOPS)")
        unit = (m.group(2) or "").upper()
        return _scaled(m.group(1), {"": 1, "GFLOPS": 10**9, "TFLOPS": 10**12}[unit])
    if key in _INT_FIELDS:
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{key} must be an integer, got {raw!r}") from None
    if key in _BOOL_FIELDS:
        lowered = raw.lower()
        if lowered in ("1", "true", "yes"):
            return True
        if lowered in ("0", "false", "no"):
            return False
        raise ValueError(f"{key} must be 0/1 or true/false, got {raw!r}")
    value = float(raw)
    # dtype widths are usually integral byte counts
    if key in ("dt_w", "dt_kv") and value.is_integer():
        return int(value)
    return value


def parse_config_text(text: str, path: Optional[str] = None, require_policy: bool = False
                      ) -> Tuple[HardwareSpec, ModelSpec, WorkloadSpec, Optional[Policy]]:
    sections: Dict[str, Dict[str, object]] = {}
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ParseError(f"malformed section header {line!r}", lineno, path)
            current = line[1:-1].strip()
            if current not in _SECTIONS:
                raise ParseError(f"unknown section [{current}]", lineno, path)
            if current in sections:
                raise ParseError(f"duplicate section [{current}]", lineno, path)
            sections[current] = {}
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", lineno, path)
        if current is None:
            raise ParseError("key outside of any section", lineno, path)
        key, raw = (part.strip() for part in line.split("=", 1))
        allowed = {f.name for f in dataclasses.fields(_SECTIONS[current])}
        if key not in allowed:
            raise ParseError(f"unknown key {key!r} in [{current}] (allowed: {', '.join(sorted(allowed))})",
                             lineno, path)
        if key in sections[current]:
            raise ParseError(f"duplicate key {key!r}", lineno, path)
        try:
            sections[current][key] = parse_value(key, raw)
        except ValueError as exc:
            raise ParseError(str(exc), lineno, path) from None

    required = ["hardware", "model", "workload"] + (["policy"] if require_policy else [])
    for name in required:
        if name not in sections:
            raise ParseError(f"missing [{name}] section", None, path)

    built = {}
    for name, values in sections.items():
        cls = _SECTIONS[name]
        missing = [f.name for f in dataclasses.fields(cls)
                   if f.name not in values and f.default is dataclasses.MISSING]
        if missing:
            raise ParseError(f"[{name}] is missing {', '.join(missing)}", None, path)
        built[name] = validate(cls(**values))
    return built["hardware"], built["model"], built["workload"], built.get("policy")


def parse_config(path: str, require_policy: bool = False):
    """Read and validate a config file; returns ``(hw, model, workload, policy_or_None)``."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read config: {exc.strerror}", None, str(path)) from None
    return parse_config_text(text, str(path), require_policy=require_policy)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


def serialize_config(hw: HardwareSpec, model: ModelSpec, workload: WorkloadSpec,
                     policy: Optional[Policy] = None) -> str:
    """Inverse of parse_config_text; floats are written with repr so they round-trip exactly."""
    chunks = []
    for name, obj in (("hardware", hw), ("model", model), ("workload", workload), ("policy", policy)):
        if obj is None:
            continue
        chunks.append(f"[{name}]")
        for f in dataclasses.fields(obj):
            chunks.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        chunks.append("")
    return "\n".join(chunks)


def spec_dict(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
