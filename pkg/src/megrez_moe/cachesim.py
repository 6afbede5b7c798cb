"""Discrete-event simulation of routed-expert weight movement on a small device.

One record of a ``SelectionTrace`` is one MoE layer executed for one token:
the experts it selected and the pool (``group``) they come from.  A cache
entry is keyed by ``(group, expert)``, so experts of a shared pool are the
same entry for every layer of the group while standard-mode traces (one pool
per layer) never share entries across layers.

Per layer there is one compute channel and one load channel::

    input ready ──attn──▶ attn done ──(wait for loads)──▶ expert compute ──▶ next layer
         │                    │
         │ pregated+overlap   │ otherwise: gate known here
         ▼                    ▼
        load missing experts on the (single, FIFO) load channel

Experts touched by the group currently executing are pinned and only evicted
when nothing unpinned is left.  Shared experts are resident and not modeled.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

from .moe import ConfigError

MODES = ("standard", "shared", "pregated")


@dataclass
class DeviceSpec:
    cache_capacity_experts: int
    load_time_per_expert: float = 1.0
    attn_compute_time_per_layer: float = 1.0
    expert_compute_time_per_expert: float = 0.25
    overlap_enabled: bool = True

    def check(self, k: int = 1) -> None:
        for name in ("load_time_per_expert", "attn_compute_time_per_layer", "expert_compute_time_per_expert"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.cache_capacity_experts < k:
            raise ConfigError(
                f"cache_capacity_experts={self.cache_capacity_experts} cannot hold the {k} experts of one layer"
            )

    @classmethod
    def from_dict(cls, data: dict) -> "DeviceSpec":
        return cls(**data)


@dataclass
class TraceRecord:
    token: int
    layer: int
    group: int
    mode: str
    experts: tuple[int, ...]


@dataclass
class SelectionTrace:
    records: list[TraceRecord]
    n_experts: int

    def __post_init__(self):
        for r in self.records:
            if r.mode not in MODES:
                raise ConfigError(f"unknown routing mode {r.mode!r}")
            if len(set(r.experts)) != len(r.experts):
                raise ConfigError(f"duplicate expert in layer {r.layer} selection {r.experts}")
            if any(not 0 <= e < self.n_experts for e in r.experts):
                raise ConfigError(f"expert id outside [0, {self.n_experts}) in layer {r.layer}")
        order = [(r.token, r.layer) for r in self.records]
        if order != sorted(order):
            raise ConfigError("trace records must be ordered by token, then layer")

    @property
    def max_k(self) -> int:
        return max((len(r.experts) for r in self.records), default=0)

    def with_mode(self, mode: str) -> "SelectionTrace":
        return SelectionTrace([TraceRecord(r.token, r.layer, r.group, mode, r.experts) for r in self.records],
                              self.n_experts)

    def group_unions(self) -> dict[tuple[int, int], set[int]]:
        """Experts needed by each (token, group) pass."""
        out: dict[tuple[int, int], set[int]] = {}
        for r in self.records:
            out.setdefault((r.token, r.group), set()).update(r.experts)
        return out

    # line-oriented JSON: one object per record, a header line first
    def dumps(self) -> str:
        lines = [json.dumps({"n_experts": self.n_experts})]
        for r in self.records:
            lines.append(json.dumps({"token": r.token, "layer": r.layer, "group": r.group,
                                     "mode": r.mode, "experts": list(r.experts)}))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "SelectionTrace":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not rows or "n_experts" not in rows[0]:
            raise ValueError("trace must start with a {\"n_experts\": M} header line")
        records = [TraceRecord(int(r.get("token", 0)), int(r["layer"]), int(r["group"]), r["mode"],
                               tuple(int(e) for e in r["experts"])) for r in rows[1:]]
        return cls(records, int(rows[0]["n_experts"]))


def trace_from_routing(routing, n_experts: int) -> SelectionTrace:
    """Turn ``model.forward`` routing records into a token-major decode trace."""
    if not routing:
        return SelectionTrace([], n_experts)
    tokens = routing[0].decision.indices.shape[0]
    records = []
    for t in range(tokens):
        for rec in routing:
            experts = tuple(int(e) for e in rec.decision.indices[t])
            records.append(TraceRecord(t, rec.layer, rec.group, rec.mode, experts))
    return SelectionTrace(records, n_experts)


# ---------------------------------------------------------------------------
# Replacement policies


class CachePolicy:
    """Picks an eviction victim.  ``keys`` is the access sequence of the whole run."""

    name = "base"

    def reset(self, accesses: list[list[tuple]]) -> None:
        pass

    def touch(self, key, step: int) -> None:
        pass

    def insert(self, key, step: int) -> None:
        self.touch(key, step)

    def forget(self, key) -> None:
        pass

    def victim(self, candidates: list, step: int):
        raise NotImplementedError


class LRUPolicy(CachePolicy):
    name = "lru"

    def reset(self, accesses):
        self._order: OrderedDict = OrderedDict()

    def touch(self, key, step):
        self._order[key] = step
        self._order.move_to_end(key)

    def forget(self, key):
        self._order.pop(key, None)

    def victim(self, candidates, step):
        allowed = set(candidates)
        for key in self._order:
            if key in allowed:
                return key
        return candidates[0]


class FIFOPolicy(CachePolicy):
    name = "fifo"

    def reset(self, accesses):
        self._order: OrderedDict = OrderedDict()

    def insert(self, key, step):
        self._order[key] = step

    def forget(self, key):
        self._order.pop(key, None)

    def victim(self, candidates, step):
        allowed = set(candidates)
        for key in self._order:
            if key in allowed:
                return key
        return candidates[0]


class BeladyPolicy(CachePolicy):
    """Evicts the candidate whose next use lies furthest in the future (offline bound)."""

    name = "belady"

    def reset(self, accesses):
        self._uses: dict = {}
        for step, keys in enumerate(accesses):
            for key in keys:
                self._uses.setdefault(key, []).append(step)

    def _next_use(self, key, step):
        for s in self._uses.get(key, ()):
            if s > step:
                return s
        return float("inf")

    def victim(self, candidates, step):
        # ties resolved by candidate order, which is insertion order
        return max(candidates, key=lambda key: self._next_use(key, step))


POLICIES = {"lru": LRUPolicy, "fifo": FIFOPolicy, "belady": BeladyPolicy}


def make_policy(name: str) -> CachePolicy:
    try:
        return POLICIES[name]()
    except KeyError:
        raise ConfigError(f"unknown cache policy {name!r}; known: {', '.join(POLICIES)}") from None


class ExpertCache:
    """Resident set with group pinning; the policy only ranks victims."""

    def __init__(self, capacity: int, policy: CachePolicy):
        self.capacity = capacity
        self.policy = policy
        self.resident: dict = {}  # key -> insertion sequence number
        self._seq = 0

    def admit(self, keys: list, step: int, pinned: set) -> tuple[list, list]:
        """Make ``keys`` resident; returns (hits, misses) in request order."""
        hits, misses = [], []
        for key in keys:
            if key in self.resident:
                hits.append(key)
                self.policy.touch(key, step)
        needed = set(keys)
        for key in keys:
            if key in self.resident:
                continue
            if len(self.resident) >= self.capacity:
                self._evict(step, pinned, needed)
            self.resident[key] = self._seq
            self._seq += 1
            self.policy.insert(key, step)
            misses.append(key)
        return hits, misses

    def _evict(self, step: int, pinned: set, needed: set) -> None:
        movable = [k for k in self.resident if k not in needed]
        unpinned = [k for k in movable if k not in pinned]
        victim = self.policy.victim(unpinned or movable, step)
        del self.resident[victim]
        self.policy.forget(victim)


# ---------------------------------------------------------------------------
# Simulation


@dataclass
class LayerTiming:
    token: int
    layer: int
    group: int
    mode: str
    hits: int
    loads: int
    reloads: int
    input_ready: float
    attn_end: float
    load_start: float
    load_end: float
    compute_start: float
    compute_end: float


@dataclass
class SimReport:
    total_latency: float
    loads: int
    cache_hits: int
    intra_group_reloads: int
    stall_time: float
    selections: int
    policy: str
    timeline: list[LayerTiming] = field(default_factory=list)

    @property
    def hit_rate(self) -> float:
        return self.cache_hits / self.selections if self.selections else 0.0

    def summary(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "timeline"}
        out["hit_rate"] = self.hit_rate
        return out

    def to_dict(self) -> dict:
        out = self.summary()
        out["timeline"] = [asdict(t) for t in self.timeline]
        return out

    def timeline_csv(self) -> str:
        buf = io.StringIO()
        names = list(LayerTiming.__dataclass_fields__)
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(names)
        for t in self.timeline:
            writer.writerow([getattr(t, n) for n in names])
        return buf.getvalue()


# event kinds, ordered so that simultaneous events resolve deterministically
_LOAD_DONE, _ATTN_DONE, _GATE, _LAYER_READY = range(4)


def simulate(trace: SelectionTrace, device: DeviceSpec, policy: CachePolicy | str = "lru") -> SimReport:
    if isinstance(policy, str):
        policy = make_policy(policy)
    device.check(trace.max_k)
    records = trace.records
    keyed = [[(r.group, e) for e in r.experts] for r in records]
    policy.reset(keyed)
    cache = ExpertCache(device.cache_capacity_experts, policy)

    timing: list[LayerTiming | None] = [None] * len(records)
    pass_seen: set = set()  # experts resident at some point during the current group pass
    pass_id = None
    pinned: set = set()
    load_free = 0.0
    loads = hits = reloads = 0
    stall = 0.0
    attn_done = [False] * len(records)
    loaded = [False] * len(records)

    events: list = []
    seq = 0

    def push(t, kind, idx):
        nonlocal seq
        heapq.heappush(events, (t, kind, seq, idx))
        seq += 1

    def early_gate(r: TraceRecord) -> bool:
        return r.mode == "pregated" and device.overlap_enabled

    def try_compute(idx, now):
        nonlocal stall
        if not (attn_done[idx] and loaded[idx]):
            return
        lt = timing[idx]
        lt.compute_start = now
        lt.compute_end = now + len(records[idx].experts) * device.expert_compute_time_per_expert
        stall += lt.compute_start - lt.attn_end
        if idx + 1 < len(records):
            push(lt.compute_end, _LAYER_READY, idx + 1)

    if records:
        push(0.0, _LAYER_READY, 0)
    while events:
        now, kind, _, idx = heapq.heappop(events)
        r = records[idx]
        if kind == _LAYER_READY:
            timing[idx] = LayerTiming(r.token, r.layer, r.group, r.mode, 0, 0, 0, now, now + device.attn_compute_time_per_layer,
                                      0.0, 0.0, 0.0, 0.0)
            push(timing[idx].attn_end, _ATTN_DONE, idx)
            if early_gate(r):
                push(now, _GATE, idx)
        elif kind == _ATTN_DONE:
            attn_done[idx] = True
            if not early_gate(r):
                push(now, _GATE, idx)
            try_compute(idx, now)
        elif kind == _GATE:
            if (r.token, r.group) != pass_id:
                pass_id = (r.token, r.group)
                pass_seen = set()
                pinned = set()
            keys = keyed[idx]
            layer_hits, misses = cache.admit(keys, idx, pinned)
            layer_reloads = sum(1 for key in misses if key in pass_seen)
            pass_seen.update(keys)
            pinned.update(keys)
            lt = timing[idx]
            lt.hits, lt.loads, lt.reloads = len(layer_hits), len(misses), layer_reloads
            hits += len(layer_hits)
            loads += len(misses)
            reloads += layer_reloads
            lt.load_start = max(now, load_free)
            lt.load_end = lt.load_start + len(misses) * device.load_time_per_expert
            load_free = lt.load_end
            push(lt.load_end, _LOAD_DONE, idx)
        else:  # _LOAD_DONE
            loaded[idx] = True
            try_compute(idx, now)

    total = timing[-1].compute_end if records else 0.0
    return SimReport(total, loads, hits, reloads, stall, sum(len(r.experts) for r in records),
                     policy.name, list(timing))


def compare_modes(model_cfg, device: DeviceSpec, token_ids, policy: str = "lru",
                  modes=MODES) -> dict[str, SimReport]:
    """Build one model per routing mode, trace a real forward, and simulate each trace.

    For the pregated trace an extra ``pregated/late-gate`` row replays the same
    selections with the gate known only after attention, which is what
    standard gating would give for identical selections.
    """
    from .model import build, forward

    out = {}
    for mode in modes:
        cfg = model_cfg.replace(routing_mode=mode)
        routing: list = []
        forward(build(cfg), token_ids, trace=routing)
        trace = trace_from_routing(routing, cfg.routed_experts_per_group)
        out[mode] = simulate(trace, device, policy)
        if mode == "pregated":
            out["pregated/late-gate"] = simulate(trace.with_mode("standard"), device, policy)
    return out
