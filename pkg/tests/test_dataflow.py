from fractions import Fraction

import numpy as np
import pytest

from helpers import dense_model, fork_join_fixture, random_pipeline
from qstream import dataflow, passes, zoo
from qstream.dataflow import (
    ClockConfig,
    FifoEdge,
    FifoPlan,
    Pipeline,
    Stage,
    bench_median,
    fifo_memory_bits,
    latency,
    map_to_pipeline,
    simulate,
    size_fifos,
    unbounded_plan,
)
from qstream.errors import DeadlockedResult, PlanIncomplete, UnmappableOp
from qstream.ir import Node, Tensor
from qstream.datatypes import INT


def chain(counts, cycles=None, tokens=8):
    """Linear pipeline of unit-rate stages."""
    cycles = cycles or [1] * counts
    stages, edges = [], {}
    for i in range(counts):
        st = Stage(f"s{i}", firings_per_inference=tokens, cycles_per_firing=cycles[i])
        if i > 0:
            e = f"f{i}"
            edges[e] = FifoEdge(e, f"s{i-1}", f"s{i}", tokens, 1, 8)
            stages[-1].produce[e] = 1
            st.consume[e] = 1
        stages.append(st)
    stages[-1].emits = 1
    return Pipeline("chain", stages, edges)


def test_two_stage_eight_tokens_hand_trace():
    # stage2 lags one cycle behind stage1: 8 tokens + 1 fill = 9 cycles
    p = chain(2, tokens=8)
    r = simulate(p, FifoPlan({"f1": 1}), 1)
    assert r.total_cycles == 9
    assert not r.deadlock
    assert r.throughput_tokens_per_cycle == pytest.approx(8 / 9)


def test_unbounded_never_deadlocks():
    p = chain(4, cycles=[1, 3, 2, 1])
    r = simulate(p, unbounded_plan(p, 3), 3)
    assert not r.deadlock


def test_balanced_chain_depths():
    p = chain(3)
    plan, base, check = size_fifos(p, n_inferences=2, mode="hls4ml")
    assert all(d == 1 for d in plan.depths.values())
    assert check.total_cycles == base.total_cycles
    plan_f, _, _ = size_fifos(p, n_inferences=2, mode="finn")
    assert all(d == 2 for d in plan_f.depths.values())


def test_fork_join_deadlock_boundary():
    # long branch buffers 10 tokens before producing; the short branch FIFO
    # must absorb the same 10 tokens of skew
    for d in range(1, 10):
        p, depths = fork_join_fixture(d)
        r = simulate(p, FifoPlan(depths), 1)
        assert r.deadlock, d
        assert "b" in r.blocked_stages
    for d in (10, 11, 16):
        p, depths = fork_join_fixture(d)
        r = simulate(p, FifoPlan(depths), 1)
        assert not r.deadlock, d


def test_deadlock_detected_within_watchdog():
    p, depths = fork_join_fixture(1)
    r = simulate(p, FifoPlan(depths), 1, watchdog=500)
    assert r.deadlock and r.total_cycles <= 500


def test_plan_incomplete():
    p = chain(2)
    with pytest.raises(PlanIncomplete):
        simulate(p, FifoPlan({}), 1)
    with pytest.raises(PlanIncomplete):
        fifo_memory_bits(FifoPlan({}), p)


def test_depth_monotonicity():
    rng = np.random.default_rng(1)
    for _ in range(30):
        p = random_pipeline(rng)
        plan, base, _ = size_fifos(p, 2)
        for e in list(plan.depths)[:3]:
            bigger = dict(plan.depths)
            bigger[e] += int(rng.integers(1, 4))
            r = simulate(p, FifoPlan(bigger), 2)
            assert r.total_cycles <= base.total_cycles + 0


def test_sink_token_conservation():
    p = chain(3, tokens=8)
    r = simulate(p, unbounded_plan(p, 2), 2)
    sink_tokens = round(r.throughput_tokens_per_cycle * r.total_cycles)
    assert sink_tokens == 2 * 8


def test_simulate_deterministic():
    p = chain(4, cycles=[2, 1, 3, 1])
    plan, _, _ = size_fifos(p, 2)
    a = simulate(p, plan, 2).to_dict()
    b = simulate(p, plan, 2).to_dict()
    assert a == b


def test_pipeline_latency_delays_landing():
    p = chain(2, tokens=4)
    base = simulate(p, FifoPlan({"f1": 4}), 1).total_cycles
    p.stages[0].pipeline_latency = 3
    delayed = simulate(p, FifoPlan({"f1": 4}), 1).total_cycles
    assert delayed == base + 3


def test_latency_arithmetic():
    r = simulate(chain(1, tokens=1), FifoPlan({}), 1)
    r.total_cycles = 10_000  # synthetic: 10k cycles, one inference
    sec, ii = latency(r, ClockConfig(100e6))
    assert sec == pytest.approx(100e-6)
    sec2, _ = latency(r, ClockConfig(200e6))
    assert sec2 == pytest.approx(sec / 2)


def test_latency_rejects_deadlock():
    p, depths = fork_join_fixture(1)
    r = simulate(p, FifoPlan(depths), 1)
    with pytest.raises(DeadlockedResult):
        latency(r, ClockConfig(100e6))


def test_bench_median_deterministic():
    p = chain(3, tokens=8)
    plan, _, _ = size_fifos(p, 2)
    clk = ClockConfig(100e6)
    a = bench_median(p, plan, clk, samples=5, min_window_cycles=200)
    b = bench_median(p, plan, clk, samples=5, min_window_cycles=200)
    assert a == b
    one = bench_median(p, plan, clk, samples=1, min_window_cycles=200)
    assert one == a  # deterministic pipeline: all samples identical


def test_fifo_memory_bits_cases():
    st_a = Stage("a", produce={"e": 1}, firings_per_inference=4)
    st_b = Stage("b", consume={"e": 1}, firings_per_inference=4, emits=1)
    p = Pipeline("one", [st_a, st_b], {"e": FifoEdge("e", "a", "b", 4, 3, 8)})
    assert fifo_memory_bits(FifoPlan({"e": 4}), p) == 96  # 4 deep x 3 elems x 8 bits
    empty = Pipeline("none", [Stage("only", firings_per_inference=1, emits=1)], {})
    assert fifo_memory_bits(FifoPlan({}), empty) == 0


# ---------------------------------------------------------------------
# model mapping
# ---------------------------------------------------------------------


def test_map_fused_relu_two_stages_one_fifo():
    w = np.eye(2, dtype=np.int64)
    m = dense_model(w, extra_nodes=[Node("Dense", "fc2", ["acc", "w2"], ["y"])])
    m.initializers["w2"] = Tensor("w2", (2, 2), INT(8), w.reshape(-1))
    m.nodes[0].attrs["fused_relu"] = True
    p = map_to_pipeline(m)
    assert len(p.stages) == 2
    assert len(p.edges) == 1


def test_map_rejects_softmax():
    m = zoo.build(zoo.ZooSpec(zoo.IC_CNN))
    with pytest.raises(UnmappableOp):
        map_to_pipeline(m)


def test_map_cnv_stage_count_formula():
    m = zoo.build(zoo.ZooSpec(zoo.CNV_W1A1, Fraction(1, 8)))
    opt, _ = passes.run_pipeline(m, passes.DEFAULT_PIPELINE)
    p = map_to_pipeline(opt)
    linear = sum(1 for n in opt.nodes if n.op in ("Conv2D", "Dense"))
    mt = sum(1 for n in opt.nodes if n.op == "MultiThreshold")
    pool = sum(1 for n in opt.nodes if n.op in ("MaxPool2D", "AvgPool2D"))
    assert len(p.stages) == linear + mt + pool + 1  # +1 for ArgMax


def test_map_fork_join_token_conservation():
    # skip connection: relu output feeds both the dense and the join
    w = np.eye(2, dtype=np.int64)
    m = dense_model(w, extra_nodes=[])
    m.nodes[:] = [
        Node("ReLU", "pre", ["x"], ["t"]),
        Node("Dense", "fc", ["t", "w"], ["acc"]),
        Node("Add", "add", ["acc", "t"], ["y"]),
    ]
    m.outputs[:] = ["y"]
    p = map_to_pipeline(m)
    names = [s.name for s in p.stages]
    assert any(n.startswith("fork:") for n in names)
    p.check_conservation()
    plan, base, _ = size_fifos(p, 2)
    assert not base.deadlock


def test_sequential_reuse_penultimate_conv_dominates():
    m = zoo.build(zoo.ZooSpec(zoo.IC_CNN))
    m2, _ = passes.remove_softmax(m)
    opt, _ = passes.run_pipeline(m2, passes.DEFAULT_PIPELINE)
    seq = dataflow.sequential_reuse(opt)
    p = map_to_pipeline(seq)
    per_stage = {
        s.name: s.firings_per_inference * s.cycles_per_firing
        for s in p.stages
        if s.name.startswith("conv") or s.name == "fc"
    }
    penultimate = per_stage.pop("conv3")
    assert all(penultimate > v for v in per_stage.values())


def test_kws_finn_depths_power_of_two():
    m = zoo.build(zoo.ZooSpec(zoo.KWS_MLP))
    opt, _ = passes.run_pipeline(m, passes.DEFAULT_PIPELINE)
    p = map_to_pipeline(opt, mode="finn")
    plan, base, check = size_fifos(p, 2, mode="finn")
    assert all(d >= 1 and (d & (d - 1)) == 0 for d in plan.depths.values())
    assert check.total_cycles == base.total_cycles
    # one argmax token leaves the pipeline per inference
    sink_tokens = round(check.throughput_tokens_per_cycle * check.total_cycles)
    assert sink_tokens == check.n_inferences


def test_sizing_occupancy_identity_small_corpus():
    rng = np.random.default_rng(42)
    for _ in range(25):
        p = random_pipeline(rng)
        plan, base, check = size_fifos(p, 2, mode="hls4ml")
        assert check.total_cycles == base.total_cycles
        for e, d in plan.depths.items():
            assert d == check.max_occupancy[e] + 1
