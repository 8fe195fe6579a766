"""Greedy balanced micro-batch packing under a per-micro-batch KV-cache token budget.

Requests are taken longest first and each goes into the open partition
holding the fewest tokens.  A partition is sealed into a micro-batch once it
holds ``ubs`` requests.  A request is aborted (deferred to the next round)
when no partition is open or when admitting it could overflow the cache
budget once every member has generated ``gen_len`` tokens.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, List, Sequence


class InvalidParameters(ValueError):
    pass


@dataclass(frozen=True)
class Request:
    id: Hashable
    input_len: int

    def __post_init__(self):
        if not isinstance(self.input_len, int) or isinstance(self.input_len, bool) or self.input_len < 1:
            raise InvalidParameters(f"request {self.id!r}: input_len must be an integer >= 1, got {self.input_len!r}")


@dataclass
class BatchPlan:
    micro_batches: List[List[Request]] = field(default_factory=list)
    aborted: List[Request] = field(default_factory=list)

    @property
    def sums(self) -> List[int]:
        return [sum(r.input_len for r in mb) for mb in self.micro_batches]

    def to_dict(self) -> dict:
        return {
            "micro_batches": [[r.id for r in mb] for mb in self.micro_batches],
            "aborted": [r.id for r in self.aborted],
            "sums": self.sums,
        }


def _check_params(n_ub, ubs, gen_len, cache_size):
    for name, value in (("n_ub", n_ub), ("ubs", ubs), ("gen_len", gen_len), ("cache_size", cache_size)):
        if not isinstance(value, int) or isinstance(value, bool):
            raise InvalidParameters(f"{name} must be an integer, got {value!r}")
    if n_ub < 1 or ubs < 1 or gen_len < 1:
        raise InvalidParameters("n_ub, ubs and gen_len must all be >= 1")
    if cache_size < gen_len + 1:
        raise InvalidParameters(f"cache_size must be >= gen_len + 1 = {gen_len + 1}, got {cache_size}")


def batch_requests(queue: Sequence[Request], n_ub: int, ubs: int, gen_len: int, cache_size: int,
                   flush_partial: bool = True) -> BatchPlan:
    """Pack ``queue`` into at most ``n_ub`` micro-batches of ``ubs`` requests.

    Equal lengths are ordered by id so the result does not depend on input
    order.  With ``flush_partial`` the partitions still open at the end are
    emitted as smaller micro-batches; without it they are dropped, which is
    the bare greedy procedure.
    """
    _check_params(n_ub, ubs, gen_len, cache_size)
    try:
        ordered = sorted(queue, key=lambda r: (-r.input_len, r.id))
    except TypeError:  # ids of mixed types
        ordered = sorted(queue, key=lambda r: (-r.input_len, type(r.id).__name__, str(r.id)))
    # open partitions keep their original slot so argmin ties go to the lowest index
    members: List[List[Request]] = [[] for _ in range(n_ub)]
    sums = [0] * n_ub
    open_slots = list(range(n_ub))
    plan = BatchPlan()

    for req in ordered:
        if not open_slots:
            plan.aborted.append(req)
            continue
        slot = min(open_slots, key=lambda i: (sums[i], i))
        if sums[slot] + req.input_len + (1 + len(members[slot])) * gen_len > cache_size:
            plan.aborted.append(req)
            continue
        members[slot].append(req)
        sums[slot] += req.input_len
        if len(members[slot]) == ubs:
            plan.micro_batches.append(members[slot])
            open_slots.remove(slot)

    if flush_partial:
        plan.micro_batches.extend(members[i] for i in open_slots if members[i])
    return plan


def _coerce_id(raw: str):
    raw = raw.strip()
    try:
        return int(raw)
    except ValueError:
        return raw


def _parse_len(value, where):
    try:
        n = int(value)
    except (TypeError, ValueError):
        raise InvalidParameters(f"{where}: input_len {value!r} is not an integer") from None
    if isinstance(value, float) and value != n:
        raise InvalidParameters(f"{where}: input_len {value!r} is not an integer")
    return n


def parse_requests_text(text: str, fmt: str = "csv", source: str = "<string>") -> List[Request]:
    """Parse ``id,input_len`` CSV (optional header) or JSON lines ``{"id", "input_len"}``."""
    requests = []
    if fmt == "jsonl":
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            where = f"{source}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvalidParameters(f"{where}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or "id" not in obj or "input_len" not in obj:
                raise InvalidParameters(f"{where}: expected an object with 'id' and 'input_len'")
            requests.append(Request(obj["id"], _parse_len(obj["input_len"], where)))
        return requests
    if fmt != "csv":
        raise InvalidParameters(f"unknown request format {fmt!r}")
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), 1):
        if not row or all(not c.strip() for c in row) or row[0].lstrip().startswith("#"):
            continue
        where = f"{source}:{lineno}"
        if len(row) != 2:
            raise InvalidParameters(f"{where}: expected 'id,input_len', got {len(row)} fields")
        if lineno == 1 and row[1].strip() == "input_len":
            continue
        requests.append(Request(_coerce_id(row[0]), _parse_len(row[1].strip(), where)))
    return requests


def read_requests(path) -> List[Request]:
    path = Path(path)
    fmt = "jsonl" if path.suffix in (".jsonl", ".json", ".ndjson") else "csv"
    return parse_requests_text(path.read_text(), fmt, str(path))
