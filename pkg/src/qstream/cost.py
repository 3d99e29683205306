"""Inference-cost metrics: bit operations, weight memory, FLOPs.

The bit-operation count for one linear layer with m output channels, n input
channels, k*k kernel, b_a-bit activations and b_w-bit weights is

    m * n * k^2 * (b_a*b_w + b_a + b_w + log2(n*k^2))

per output position (dense layers use k = 1 and one position). Convolutions
multiply by the number of output positions so the metric tracks the work
actually performed. The normalized cost of a model against a baseline is
the mean of its BOPs and weight-memory ratios.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, MissingAnnotation
from .ir import Model, infer_dtypes, infer_shapes


@dataclass
class CostReport:
    bops: float
    wm_bits: int
    flops: int
    params: int
    cost_c: float | None = None

    def to_dict(self):
        out = {
            "bops": self.bops,
            "wm_bits": self.wm_bits,
            "flops": self.flops,
            "params": self.params,
        }
        if self.cost_c is not None:
            out["cost_c"] = self.cost_c
        return out


def bops_layer(m: int, n: int, k: int, b_a: int, b_w: int, out_positions: int = 1) -> float:
    """Bit operations of one linear layer; exact real log2, no ceiling."""
    for name, v in (("m", m), ("n", n), ("k", k), ("b_a", b_a), ("b_w", b_w),
                    ("out_positions", out_positions)):
        if v < 1:
            raise DomainError(f"{name} = {v} must be >= 1")
    return m * n * k * k * (b_a * b_w + b_a + b_w + math.log2(n * k * k)) * out_positions


def _layer_geometry(model, node, shapes):
    w = model.initializers.get(node.inputs[1])
    if w is None:
        raise MissingAnnotation(f"{node.name}: weight tensor is not constant")
    if node.op == "Conv2D":
        m_ch, n_ch, k = w.shape[0], w.shape[1], w.shape[2]
        out_shape = shapes.get(node.outputs[0])
        positions = int(out_shape[1] * out_shape[2]) if out_shape else 1
    else:
        m_ch, n_ch, k = w.shape[0], w.shape[1], 1
        positions = 1
    return w, m_ch, n_ch, k, positions


def _macs(model, shapes):
    total = 0
    for node in model.nodes:
        if node.op in ("Conv2D", "Dense"):
            _, m_ch, n_ch, k, positions = _layer_geometry(model, node, shapes)
            total += m_ch * n_ch * k * k * positions
    return total


def flops(model: Model) -> int:
    """Floating-point-op estimate: 1 MAC = 2 FLOPs, bias and elementwise
    ops (pool, BN, ReLU, thresholding, softmax, add) 1 op per output element."""
    shapes, _ = infer_shapes(model)
    total = 2 * _macs(model, shapes)
    for node in model.nodes:
        out = shapes.get(node.outputs[0])
        if out is None:
            continue
        elems = int(np.prod(out, dtype=np.int64))
        if node.op in ("Conv2D", "Dense"):
            if len(node.inputs) == 3:
                total += elems  # bias adds
            if node.attr("fused_relu"):
                total += elems
        elif node.op in ("BatchNorm", "ReLU", "MaxPool2D", "AvgPool2D", "Add",
                         "Quant", "MultiThreshold", "Softmax"):
            total += elems
    return total


def model_cost(model: Model, baseline: Model | None = None) -> CostReport:
    """Aggregate BOPs, weight-memory bits, FLOPs, and params for a model.

    Every Conv2D/Dense needs an integer/fixed dtype on its weights and on its
    input edge; a FLOAT32 annotation has no bit width and raises
    MissingAnnotation.
    """
    shapes, _ = infer_shapes(model)
    dtypes = infer_dtypes(model, shapes)
    total_bops = 0.0
    wm_bits = 0
    for node in model.nodes:
        if node.op not in ("Conv2D", "Dense"):
            continue
        w, m_ch, n_ch, k, positions = _layer_geometry(model, node, shapes)
        if w.dtype.is_float:
            raise MissingAnnotation(f"{node.name}: weight dtype {w.dtype} has no bit width")
        in_dt = dtypes.get(node.inputs[0])
        if in_dt is None or in_dt.is_float:
            raise MissingAnnotation(
                f"{node.name}: input edge {node.inputs[0]!r} lacks a quantized dtype"
            )
        b_w = w.dtype.bits if w.dtype.kind != "BIPOLAR" else 1
        b_a = in_dt.bits if in_dt.kind != "BIPOLAR" else 1
        total_bops += bops_layer(m_ch, n_ch, k, b_a, b_w, positions)
        for t in node.inputs[1:]:
            init = model.initializers.get(t)
            if init is not None:
                bits = init.dtype.bits if init.dtype.kind != "BIPOLAR" else 1
                wm_bits += init.size * bits
    report = CostReport(
        bops=total_bops,
        wm_bits=wm_bits,
        flops=flops(model),
        params=model.count_params(),
    )
    if baseline is not None:
        ref = model_cost(baseline)
        report.cost_c = 0.5 * (total_bops / ref.bops + wm_bits / ref.wm_bits)
    return report
