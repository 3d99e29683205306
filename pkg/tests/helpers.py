"""Shared fixture builders for the test suite."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from qstream.datatypes import FLOAT32, INT, UINT
from qstream.dataflow import FifoEdge, Pipeline, Stage
from qstream.ir import Model, Node, Tensor


def dense_model(weights, bias=None, wdtype=None, in_dtype=None, extra_nodes=(), name="toy"):
    """Single-Dense model; extra_nodes chain off the accumulator tensor."""
    w = np.asarray(weights)
    out_ch, in_ch = w.shape
    wdtype = wdtype or INT(8)
    in_dtype = in_dtype or INT(8)
    inits = {"w": Tensor("w", (out_ch, in_ch), wdtype, w.reshape(-1))}
    node_inputs = ["x", "w"]
    if bias is not None:
        inits["b"] = Tensor("b", (out_ch,), wdtype, np.asarray(bias))
        node_inputs.append("b")
    nodes = [Node("Dense", "fc", node_inputs, ["acc"])]
    out = "acc"
    for n in extra_nodes:
        nodes.append(n)
        out = n.outputs[0]
    return Model(
        name=name,
        flow="finn",
        inputs=[Tensor("x", (in_ch,), in_dtype)],
        outputs=[out],
        initializers=inits,
        nodes=nodes,
    )


def quantized_toy_layer(
    rng,
    out_ch=4,
    with_bn=True,
    with_relu=True,
    qdtype=None,
    rounding="ROUND_HALF_UP",
    in_bits=8,
    in_ch=1,
):
    """Dense + [BN] + [ReLU] + Quant with float64-exact parameters.

    BN draws satisfy sqrt(var + eps) = 2**j exactly and every coefficient is
    a dyadic rational, so the float64 reference path commits no rounding
    error and bit-exact comparison against the integer path is meaningful.
    """
    w = rng.integers(-(2 ** (in_bits - 1)), 2 ** (in_bits - 1), (out_ch, in_ch))
    inits = {"w": Tensor("w", (out_ch, in_ch), INT(in_bits), w.reshape(-1))}
    nodes = [Node("Dense", "fc", ["x", "w"], ["acc"])]
    cur = "acc"
    if with_bn:
        j = rng.integers(-2, 4, out_ch)
        eps = 2.0**-20
        var = (4.0**j) - eps
        gamma = rng.integers(-128, 129, out_ch) / 64.0
        gamma[gamma == 0] = 1.0
        beta = rng.integers(-256, 257, out_ch) / 64.0
        mean = rng.integers(-256, 257, out_ch) / 64.0
        inits.update(
            {
                "g": Tensor("g", (out_ch,), FLOAT32, gamma),
                "bt": Tensor("bt", (out_ch,), FLOAT32, beta),
                "mu": Tensor("mu", (out_ch,), FLOAT32, mean),
                "v": Tensor("v", (out_ch,), FLOAT32, var),
            }
        )
        nodes.append(
            Node("BatchNorm", "bn", [cur, "g", "bt", "mu", "v"], ["bn_out"], {"epsilon": eps})
        )
        cur = "bn_out"
    if with_relu:
        nodes.append(Node("ReLU", "relu", [cur], ["relu_out"]))
        cur = "relu_out"
    qdtype = qdtype or UINT(3)
    scale = Fraction(2) ** int(rng.integers(-3, 4))
    zp = int(rng.integers(-2, 3))
    nodes.append(
        Node(
            "Quant",
            "q",
            [cur],
            ["y"],
            {"scale": scale, "zero_point": zp, "dtype": qdtype, "rounding": rounding},
        )
    )
    return Model(
        "toy",
        "finn",
        [Tensor("x", (in_ch,), INT(in_bits))],
        ["y"],
        inits,
        nodes,
    )


def random_pipeline(rng, max_stages=12):
    """Random chains with fork-join diamonds; token conservation by
    construction, rates 1..4, firing costs 1..4 cycles."""
    stages, edges = [], {}
    n_tokens = int(rng.choice([12, 24, 36, 48]))
    seq = 0

    def new_stage(**kw):
        nonlocal seq
        seq += 1
        return Stage(f"s{seq}", **kw)

    src = new_stage(firings_per_inference=n_tokens, cycles_per_firing=int(rng.integers(1, 4)))
    stages.append(src)
    frontier = [(src, n_tokens)]
    budget = int(rng.integers(3, max_stages))
    while len(stages) < budget and frontier:
        prev, tokens = frontier.pop(0)
        if rng.random() < 0.25 and len(stages) + 4 <= max_stages and tokens >= 4:
            fork = new_stage(firings_per_inference=tokens)
            e_in = f"e{seq}"
            edges[e_in] = FifoEdge(e_in, prev.name, fork.name, tokens, 1, 8)
            prev.produce[e_in] = tokens // prev.firings_per_inference
            fork.consume[e_in] = 1
            stages.append(fork)
            branches = []
            for _ in range(2):
                div = int(rng.choice([d for d in (1, 2, 3, 4) if tokens % d == 0]))
                st = new_stage(
                    firings_per_inference=tokens // div,
                    cycles_per_firing=int(rng.integers(1, 5)),
                )
                e = f"e{seq}"
                edges[e] = FifoEdge(e, fork.name, st.name, tokens, 1, 8)
                fork.produce[e] = 1
                st.consume[e] = div
                stages.append(st)
                branches.append((st, tokens // div))
            g = int(np.gcd(branches[0][1], branches[1][1]))
            join = new_stage(firings_per_inference=g, cycles_per_firing=int(rng.integers(1, 3)))
            for st, t in branches:
                e = f"e{seq}-{st.name}"
                edges[e] = FifoEdge(e, st.name, join.name, t, 1, 8)
                st.produce[e] = 1
                join.consume[e] = t // g
            stages.append(join)
            frontier.append((join, g))
        else:
            div = int(rng.choice([d for d in (1, 2, 3, 4) if tokens % d == 0]))
            mult = int(rng.integers(1, 4))
            st = new_stage(
                firings_per_inference=tokens // div,
                cycles_per_firing=int(rng.integers(1, 5)),
            )
            e = f"e{seq}"
            edges[e] = FifoEdge(e, prev.name, st.name, tokens, 1, 8)
            prev.produce[e] = tokens // prev.firings_per_inference
            st.consume[e] = div
            stages.append(st)
            frontier.append((st, (tokens // div) * mult))
    for st, tokens in frontier:
        if st.firings_per_inference:
            st.emits = tokens // st.firings_per_inference
    p = Pipeline("rand", stages, edges)
    p.check_conservation()
    return p


def fork_join_fixture(short_depth, long_need=10):
    """Reconvergent fixture: fork feeds the join directly on the short branch
    and through a 10-token accumulator on the long one. The fork can buffer
    exactly short_depth tokens ahead, so the accumulator starves (deadlock)
    unless short_depth >= long_need."""
    fork = Stage("fork", produce={"aj": 1, "fb": 1}, firings_per_inference=long_need)
    b = Stage("b", consume={"fb": long_need}, produce={"bj": long_need}, firings_per_inference=1)
    j = Stage("join", consume={"aj": 1, "bj": 1}, firings_per_inference=long_need, emits=1)
    p = Pipeline(
        "forkjoin",
        [fork, b, j],
        {
            "aj": FifoEdge("aj", "fork", "join", long_need, 1, 8),
            "fb": FifoEdge("fb", "fork", "b", long_need, 1, 8),
            "bj": FifoEdge("bj", "b", "join", long_need, 1, 8),
        },
    )
    p.check_conservation()
    plan = {"aj": short_depth, "fb": long_need, "bj": long_need}
    return p, plan
