"""Streaming-pipeline mapping and deterministic token-level simulation.

A model maps to one stage per node (fused activations disappear into their
layer; Flatten is a stream reinterpretation and maps to no stage). Stages
are joined by FIFO edges carrying tokens: one pixel vector per token for
image-shaped streams, the whole vector for flat streams. Each cycle a stage
fires when it is idle, every input FIFO holds a full consume quota, and
every output FIFO can absorb the produce quota; a firing holds the stage
for cycles_per_firing cycles (reuse_factor for linear stages) and its
tokens become visible the cycle after it completes.

FIFO sizing follows the two-phase scheme: simulate with depths that can
never block, record each FIFO's peak buffered demand, then set
depth = demand + 1 (next power of two with a floor of two in finn mode)
and re-simulate to confirm the cycle count is unchanged. The recorded
max_occupancy is the write-side peak: the largest stored-plus-incoming
level a producer ever asked the FIFO to absorb, minus the slot granted;
depth = max_occupancy + 1 therefore reproduces the unthrottled schedule
exactly, and one less provably perturbs it.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DeadlockedResult,
    PlanIncomplete,
    SizingUnstable,
    UnmappableOp,
)
from .ir import Model, infer_dtypes, infer_shapes


@dataclass
class Stage:
    """One pipeline actor: per-edge token rates plus timing."""

    name: str
    consume: dict = field(default_factory=dict)  # in-edge -> tokens per firing
    produce: dict = field(default_factory=dict)  # out-edge -> tokens per firing
    firings_per_inference: int = 1
    cycles_per_firing: int = 1
    pipeline_latency: int = 0  # extra cycles before outputs land
    emits: int = 0  # tokens leaving the pipeline per firing


@dataclass
class FifoEdge:
    name: str
    src: str
    dst: str
    tokens_per_inference: int
    token_elems: int
    token_bits: int


@dataclass
class Pipeline:
    name: str
    stages: list
    edges: dict  # name -> FifoEdge; insertion order is topological

    def stage(self, name):
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def check_conservation(self):
        """consume*firings of the consumer equals produce*firings of the
        producer on every edge; raises on violation."""
        by_name = {s.name: s for s in self.stages}
        for e in self.edges.values():
            src, dst = by_name[e.src], by_name[e.dst]
            made = src.produce[e.name] * src.firings_per_inference
            eaten = dst.consume[e.name] * dst.firings_per_inference
            if made != eaten or made != e.tokens_per_inference:
                raise ValueError(
                    f"edge {e.name}: produced {made}, consumed {eaten}, "
                    f"declared {e.tokens_per_inference}"
                )


@dataclass
class FifoPlan:
    depths: dict  # edge name -> depth in tokens
    mode: str = "hls4ml"

    def __post_init__(self):
        for name, d in self.depths.items():
            if d < 1:
                raise ValueError(f"edge {name}: depth {d} must be >= 1")
            if self.mode == "finn" and d & (d - 1):
                raise ValueError(f"edge {name}: finn depth {d} must be a power of two")


@dataclass
class SimResult:
    total_cycles: int
    n_inferences: int
    max_occupancy: dict
    stall_cycles: dict
    deadlock: bool
    blocked_stages: list
    throughput_tokens_per_cycle: float

    def to_dict(self):
        return {
            "total_cycles": self.total_cycles,
            "n_inferences": self.n_inferences,
            "max_occupancy": dict(sorted(self.max_occupancy.items())),
            "stall_cycles": dict(sorted(self.stall_cycles.items())),
            "deadlock": self.deadlock,
            "blocked_stages": list(self.blocked_stages),
            "throughput_tokens_per_cycle": self.throughput_tokens_per_cycle,
        }


@dataclass(frozen=True)
class ClockConfig:
    frequency_hz: float

    def __post_init__(self):
        if not self.frequency_hz > 0:
            raise ValueError("clock frequency must be positive")


# ---------------------------------------------------------------------
# model -> pipeline
# ---------------------------------------------------------------------


def _edge_tokens(shape) -> tuple:
    """(tokens per inference, elements per token) for a tensor shape."""
    if len(shape) == 3:
        return shape[1] * shape[2], shape[0]
    return 1, int(np.prod(shape, dtype=np.int64)) if shape else 1


def _dtype_bits(dt) -> int:
    if dt is None:
        return 32
    if dt.kind == "BIPOLAR":
        return 1
    if dt.kind == "FLOAT32":
        return 32
    return dt.bits


def map_to_pipeline(model: Model, mode: str = "hls4ml") -> Pipeline:
    """Build the streaming pipeline for an optimized model.

    Every non-fused node except Flatten becomes a stage; tensors with
    several consumers get an explicit Fork stage; Add nodes are joins.
    Softmax has no streaming form and must be removed first.
    """
    shapes, _ = infer_shapes(model)
    dtypes = infer_dtypes(model, shapes)
    for node in model.nodes:
        if node.op == "Softmax":
            raise UnmappableOp(f"{node.name}: Softmax has no streaming semantics; remove it first")

    # Flatten is a reinterpretation: alias its output back to its input.
    alias = {}
    for node in model.nodes:
        if node.op == "Flatten":
            src = node.inputs[0]
            alias[node.outputs[0]] = alias.get(src, src)

    def resolve(t):
        return alias.get(t, t)

    graph_inputs = set(model.input_names())
    mapped_nodes = [n for n in model.nodes if n.op != "Flatten"]

    # consumer count per resolved tensor decides fork insertion
    consumer_count = {}
    for n in mapped_nodes:
        for t in n.inputs:
            if t in model.initializers:
                continue
            rt = resolve(t)
            consumer_count[rt] = consumer_count.get(rt, 0) + 1

    stages = []
    edges = {}
    producer_stage = {}  # resolved tensor -> (stage name, edge base ready)

    def data_inputs(node):
        keep = {
            "Conv2D": 1,
            "Dense": 1,
            "BatchNorm": 1,
            "MultiThreshold": 1,
            "Add": 2,
        }.get(node.op, 1)
        return [resolve(t) for t in node.inputs[:keep]]

    def stage_rates(node, in_tokens, out_tokens):
        """(consume per in-edge, produce, firings) from the token counts."""
        if node.op in ("Conv2D", "MaxPool2D", "AvgPool2D"):
            f = math.gcd(in_tokens[0], out_tokens)
            return [in_tokens[0] // f], out_tokens // f, f
        if node.op in ("Dense", "ArgMax"):
            return [in_tokens[0]], out_tokens, 1
        if node.op == "Add":
            f = out_tokens
            return [t // f for t in in_tokens], 1, f
        # elementwise over the stream
        f = out_tokens
        return [t // f for t in in_tokens], 1, f

    fork_seq = 0
    for node in mapped_nodes:
        ins = data_inputs(node)
        out_t = node.outputs[0]
        out_shape = shapes[out_t]
        out_tokens, out_elems = _edge_tokens(out_shape)
        in_tokens = []
        for t in ins:
            tshape = shapes[t]
            in_tokens.append(_edge_tokens(tshape)[0])
        consume_q, produce_q, firings = stage_rates(node, in_tokens, out_tokens)

        st = Stage(
            name=node.name,
            firings_per_inference=firings,
            cycles_per_firing=(node.attr("reuse_factor") or 1)
            if node.op in ("Conv2D", "Dense")
            else 1,
        )
        for t, c in zip(ins, consume_q):
            if t in graph_inputs:
                continue  # fed from outside the pipeline
            src_name = producer_stage[t]
            edge_name = t
            src_stage = next(s for s in stages if s.name == src_name)
            # insert a fork when this tensor has several consumers
            if consumer_count.get(t, 0) > 1 and not src_name.startswith("fork:"):
                fork_seq += 1
                fname = f"fork:{t}"
                tokens, elems = _edge_tokens(shapes[t])
                bits = _dtype_bits(dtypes.get(t))
                fork = Stage(name=fname, firings_per_inference=tokens)
                fork.consume[t] = 1
                edges[t] = FifoEdge(t, src_name, fname, tokens, elems, bits)
                src_stage.produce[t] = tokens // src_stage.firings_per_inference
                stages.append(fork)
                producer_stage[t] = fname
                src_name = fname
            if src_name.startswith("fork:"):
                fork = next(s for s in stages if s.name == src_name)
                edge_name = f"{t}->{node.name}"
                tokens, elems = _edge_tokens(shapes[t])
                bits = _dtype_bits(dtypes.get(t))
                edges[edge_name] = FifoEdge(edge_name, src_name, node.name, tokens, elems, bits)
                fork.produce[edge_name] = 1
            else:
                tokens, elems = _edge_tokens(shapes[t])
                bits = _dtype_bits(dtypes.get(t))
                edges[edge_name] = FifoEdge(edge_name, src_name, node.name, tokens, elems, bits)
                src_stage.produce[edge_name] = tokens // src_stage.firings_per_inference
            st.consume[edge_name] = c
        stages.append(st)
        producer_stage[resolve(out_t)] = node.name

    # terminal emissions: tokens that leave through declared model outputs
    for out in model.outputs:
        rt = resolve(out)
        if rt in producer_stage:
            st = next(s for s in stages if s.name == producer_stage[rt])
            tokens, _ = _edge_tokens(shapes[rt])
            st.emits += tokens // st.firings_per_inference

    p = Pipeline(model.name, stages, edges)
    p.check_conservation()
    return p


def sequential_reuse(model: Model) -> Model:
    """Set each linear node's reuse_factor for a fully sequential kernel:
    one multiplier, iterating the input positions and performing every MAC
    of the kernel at each one. A conv layer then costs roughly
    H_in*W_in * m*n*k^2 cycles, spread over its firings."""
    from .ir import Node  # local to avoid cycles in module docs

    shapes, _ = infer_shapes(model)
    nodes = []
    for n in model.nodes:
        if n.op in ("Conv2D", "Dense"):
            w = model.initializers[n.inputs[1]].shape
            macs = int(np.prod(w, dtype=np.int64))
            if n.op == "Conv2D":
                out = shapes[n.outputs[0]]
                in_shape = shapes[n.inputs[0]]
                in_tokens = in_shape[1] * in_shape[2]
                out_tokens = out[1] * out[2]
                f = math.gcd(in_tokens, out_tokens)
                macs = macs * (in_tokens // f)
            attrs = dict(n.attrs)
            attrs["reuse_factor"] = macs
            nodes.append(Node(n.op, n.name, list(n.inputs), list(n.outputs), attrs))
        else:
            nodes.append(n)
    from .passes import _clone

    return _clone(model, nodes=nodes)


# ---------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------


def default_watchdog(pipeline: Pipeline, n_inferences: int) -> int:
    total = sum(
        s.firings_per_inference * (s.cycles_per_firing + s.pipeline_latency)
        for s in pipeline.stages
    )
    return 2 * max(total, 1) * n_inferences + 64


def simulate(
    pipeline: Pipeline,
    plan: FifoPlan,
    n_inferences: int = 1,
    watchdog: int | None = None,
) -> SimResult:
    """Deterministic cycle loop; see the module docstring for the firing rule.

    Deadlock is declared when no stage can make progress with work remaining
    (equivalently, a full watchdog window passes without progress); the cycle
    count is then capped at the point of detection.
    """
    if n_inferences < 1:
        raise ValueError("n_inferences must be >= 1")
    for e in pipeline.edges:
        if e not in plan.depths:
            raise PlanIncomplete(f"no depth for edge {e!r}")
    if watchdog is None:
        watchdog = default_watchdog(pipeline, n_inferences)

    order = list(pipeline.stages)
    rev = list(reversed(order))
    stored = {e: 0 for e in pipeline.edges}
    inflight = {e: 0 for e in pipeline.edges}  # fired but not yet landed
    gate_peak = {e: 0 for e in pipeline.edges}
    remaining = {s.name: s.firings_per_inference * n_inferences for s in order}
    busy_until = {s.name: 0 for s in order}
    stalls = {s.name: 0 for s in order}
    landings = []  # (cycle, stage, {edge: tokens}, emits)
    sink_tokens = 0
    total_cycles = 0
    cycle = 0
    last_progress = 0

    while True:
        if all(v == 0 for v in remaining.values()) and not landings:
            break
        cycle += 1
        progress = False

        # landings scheduled for this cycle become visible
        new_landings = []
        for (land, sname, outs, emits) in landings:
            if land == cycle:
                for e, k in outs.items():
                    stored[e] += k
                    inflight[e] -= k
                sink_tokens += emits
                progress = True
            else:
                new_landings.append((land, sname, outs, emits))
        landings = new_landings

        # start attempts, downstream first so same-cycle drains free space
        started_any = False
        stalled_now = []
        for st in rev:
            nm = st.name
            if remaining[nm] == 0:
                continue
            if busy_until[nm] >= cycle:
                progress = True  # mid-firing counts as progress
                continue
            can = all(stored[e] >= c for e, c in st.consume.items())
            if can:
                for e, p in st.produce.items():
                    need = stored[e] + inflight[e] + p
                    if need > plan.depths[e]:
                        can = False
                        break
            if not can:
                stalls[nm] += 1
                stalled_now.append(nm)
                continue
            for e, c in st.consume.items():
                stored[e] -= c
            outs = {}
            for e, p in st.produce.items():
                gate_peak[e] = max(gate_peak[e], stored[e] + inflight[e] + p)
                inflight[e] += p
                outs[e] = p
            land = cycle + st.cycles_per_firing + st.pipeline_latency
            landings.append((land, nm, outs, st.emits))
            busy_until[nm] = cycle + st.cycles_per_firing - 1
            total_cycles = max(total_cycles, land - 1)
            remaining[nm] -= 1
            progress = True
            started_any = True

        # tokens still in flight mean the clock will deliver progress
        progress = progress or bool(landings)
        if not progress or cycle - last_progress > watchdog or cycle > watchdog:
            blocked = sorted(n for n, r in remaining.items() if r > 0)
            return SimResult(
                total_cycles=min(cycle, watchdog),
                n_inferences=n_inferences,
                max_occupancy={e: max(0, g - 1) for e, g in gate_peak.items()},
                stall_cycles=stalls,
                deadlock=True,
                blocked_stages=blocked,
                throughput_tokens_per_cycle=sink_tokens / max(cycle, 1),
            )
        if progress:
            last_progress = cycle

        # nothing can start before the next landing or stage release: jump
        if not started_any:
            horizon = min(
                [land for land, *_ in landings]
                + [busy_until[nm] + 1 for nm in busy_until if busy_until[nm] >= cycle],
                default=cycle + 1,
            )
            skip = horizon - 1 - cycle
            if skip > 0:
                for nm in stalled_now:
                    stalls[nm] += skip
                cycle += skip
                last_progress = max(last_progress, cycle)

    return SimResult(
        total_cycles=total_cycles,
        n_inferences=n_inferences,
        max_occupancy={e: max(0, g - 1) for e, g in gate_peak.items()},
        stall_cycles=stalls,
        deadlock=False,
        blocked_stages=[],
        throughput_tokens_per_cycle=sink_tokens / max(total_cycles, 1),
    )


# ---------------------------------------------------------------------
# sizing, latency, accounting
# ---------------------------------------------------------------------


def _next_pow2(v: int) -> int:
    return 1 << max(0, (v - 1).bit_length())


def unbounded_plan(pipeline: Pipeline, n_inferences: int) -> FifoPlan:
    """Depths that provably never block: every token of the whole run fits."""
    return FifoPlan(
        {e.name: e.tokens_per_inference * n_inferences + 1 for e in pipeline.edges.values()},
        mode="hls4ml",
    )


def size_fifos(pipeline: Pipeline, n_inferences: int = 2, mode: str = "hls4ml"):
    """Occupancy-driven FIFO sizing.

    Phase 1 simulates with unbounded depths and records the write-side peak
    demand of every FIFO. Phase 2 sets depth = demand + 1 and then trims:
    a greedy producer can buffer ahead of the critical path, so each depth
    is binary-searched down to the smallest value that keeps the phase-1
    cycle count, repeating until no FIFO can shrink. At that fixed point
    each depth equals the occupancy measured under the final plan plus one,
    and shrinking any single FIFO by one slot provably perturbs the
    schedule. finn mode then rounds depths up to powers of two (floor 2).
    Phase 3 re-simulates and insists the cycle count is unchanged.
    Returns (plan, phase1_result, phase3_result).
    """
    base = simulate(pipeline, unbounded_plan(pipeline, n_inferences), n_inferences)
    if base.deadlock:
        raise SizingUnstable(
            f"pipeline deadlocks even with unbounded FIFOs; blocked: {base.blocked_stages}"
        )
    target = base.total_cycles
    depths = {e: base.max_occupancy[e] + 1 for e in pipeline.edges}

    def cycles_ok(trial_depths):
        r = simulate(pipeline, FifoPlan(trial_depths), n_inferences)
        return not r.deadlock and r.total_cycles == target

    changed = True
    while changed:
        changed = False
        for e in pipeline.edges:
            d = depths[e]
            if d == 1 or not cycles_ok({**depths, e: d - 1}):
                continue  # already the smallest schedule-preserving depth
            lo, hi = 1, d - 1
            while lo < hi:
                mid = (lo + hi) // 2
                if cycles_ok({**depths, e: mid}):
                    hi = mid
                else:
                    lo = mid + 1
            depths[e] = hi
            changed = True

    if mode == "finn":
        depths = {e: max(2, _next_pow2(d)) for e, d in depths.items()}
    plan = FifoPlan(depths, mode=mode)
    check = simulate(pipeline, plan, n_inferences)
    if check.deadlock or check.total_cycles != target:
        raise SizingUnstable(
            f"sized plan changed cycles {target} -> {check.total_cycles}"
            f" (deadlock={check.deadlock})"
        )
    return plan, base, check


def latency(result: SimResult, clk: ClockConfig):
    """(seconds per inference, steady-state initiation interval in cycles)."""
    if result.deadlock:
        raise DeadlockedResult(f"deadlocked; blocked stages: {result.blocked_stages}")
    ii = result.total_cycles / result.n_inferences
    return ii / clk.frequency_hz, ii


def bench_median(
    pipeline: Pipeline,
    plan: FifoPlan,
    clk: ClockConfig,
    samples: int = 5,
    min_window_cycles: int = 10_000,
) -> float:
    """Median per-inference latency over repeated samples, each running
    enough back-to-back inferences to fill the measurement window."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    values = []
    for _ in range(samples):
        n = 1
        while True:
            res = simulate(pipeline, plan, n)
            if res.deadlock:
                raise DeadlockedResult(f"deadlocked; blocked: {res.blocked_stages}")
            if res.total_cycles >= min_window_cycles or n >= 1 << 20:
                break
            n *= 2
        values.append(latency(res, clk)[0])
    return statistics.median(values)


def fifo_memory_bits(plan: FifoPlan, pipeline: Pipeline) -> int:
    """Total buffered bits: depth x token width, summed over edges."""
    total = 0
    for name, e in pipeline.edges.items():
        if name not in plan.depths:
            raise PlanIncomplete(f"no depth for edge {name!r}")
        total += plan.depths[name] * e.token_elems * e.token_bits
    return total
