"""Model-to-model optimization passes.

Every pass is a pure function Model -> (Model, PassReport) with an
equivalence contract checked by the test suite:

  constant_fold          exact (per-dtype) equality
  fold_bn                float outputs within 1e-6 relative
  streamline             bit-exact integer outputs vs quantized float path
  merge_relu             exact equality
  remove_softmax         argmax equality (softmax is monotone)
  minimize_accumulators  no observable change; assigned widths minimal

Streamlining lowers Linear -> [BatchNorm] -> [ReLU] -> Quant chains into an
integer linear node followed by a MultiThreshold whose cut points are the
exact rational preimages of the quantizer level boundaries, converted to the
integer accumulator domain by ceiling (for integers, x >= t iff x >= ceil(t)).
Channels whose composed scale is negative get their weight rows negated so
the threshold comparison keeps a single direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .datatypes import (
    DECLARED_MAX_BITS,
    BIPOLAR,
    DataType,
    rational_sqrt,
    signed_bits_for_range,
)
from .errors import (
    NotStreamlinable,
    PassPipelineError,
    PatternNotFound,
    ValidationError,
)
from . import interp
from .ir import Model, Node, Tensor, infer_dtypes, infer_shapes, validate


@dataclass
class PassReport:
    pass_name: str
    removed: int = 0
    added: int = 0
    rewritten: int = 0
    status: str = "ok"
    notes: list = field(default_factory=list)

    def to_dict(self):
        return {
            "pass": self.pass_name,
            "removed": self.removed,
            "added": self.added,
            "rewritten": self.rewritten,
            "status": self.status,
            "notes": list(self.notes),
        }


def _clone(model: Model, **overrides) -> Model:
    fields = {
        "name": model.name,
        "flow": model.flow,
        "inputs": list(model.inputs),
        "outputs": list(model.outputs),
        "initializers": dict(model.initializers),
        "nodes": list(model.nodes),
        "notes": model.notes,
    }
    fields.update(overrides)
    return Model(**fields)


def _sole_consumer(model: Model, tensor: str, consumers=None):
    cons = (consumers or model.consumer_map()).get(tensor, [])
    if len(cons) == 1 and tensor not in model.outputs:
        return cons[0]
    return None


# ---------------------------------------------------------------------
# constant folding
# ---------------------------------------------------------------------


def constant_fold(model: Model):
    """Evaluate nodes whose inputs are all constant; results become
    initializers. Non-foldable graphs pass through unchanged."""
    report = PassReport("constant-fold")
    shapes, _ = infer_shapes(model)
    dtypes = infer_dtypes(model, shapes)
    initializers = dict(model.initializers)
    const = set(initializers)
    kept_nodes = []
    for node in model.topological_nodes():
        if all(i in const for i in node.inputs):
            ins = [interp.val_from_tensor(initializers[i], _fold_mode(initializers[i])) for i in node.inputs]
            mode = "float" if any(v.kind == "float" for v in ins) else "exact_int"
            out_val = interp.eval_node(node, ins, mode, check=False)
            out_name = node.outputs[0]
            out_dtype = dtypes.get(out_name)
            if out_dtype is None or (out_val.kind == "float" and not out_dtype.is_float):
                out_dtype = DataType("FLOAT32") if out_val.kind == "float" else out_dtype
            initializers[out_name] = interp.tensor_from_val(out_name, out_val, out_dtype)
            const.add(out_name)
            report.removed += 1
            report.added += 1
        else:
            kept_nodes.append(node)
    if report.removed == 0:
        return model, report
    # drop initializers nothing references anymore
    used = set(model.outputs)
    for n in kept_nodes:
        used.update(n.inputs)
    initializers = {k: v for k, v in initializers.items() if k in used}
    out = _clone(model, nodes=kept_nodes, initializers=initializers)
    return out, report


def _fold_mode(tensor: Tensor) -> str:
    return "float" if tensor.dtype.is_float else "exact_int"


# ---------------------------------------------------------------------
# batch-norm folding
# ---------------------------------------------------------------------


def fold_bn(model: Model, dequantize: bool = False):
    """Fold Linear -> BatchNorm pairs into the linear layer.

    With per-channel scale v = gamma / sqrt(var + eps) the folded kernel is
    v * k and the folded bias v * (b - mean) + beta. Folding only touches
    float-weight layers unless dequantize=True, which first widens quantized
    weights to their real float values. No matching pair is a no-op.
    """
    report = PassReport("fold-bn")
    consumers = model.consumer_map()
    nodes = list(model.nodes)
    initializers = dict(model.initializers)
    drop_nodes = set()
    for idx, node in enumerate(nodes):
        if node.op not in ("Conv2D", "Dense") or node.name in drop_nodes:
            continue
        bn = _sole_consumer(model, node.outputs[0], consumers)
        if bn is None or bn.op != "BatchNorm":
            continue
        w = initializers.get(node.inputs[1])
        if w is None:
            continue
        if not w.dtype.is_float and not dequantize:
            continue
        gamma, beta, mean, var = (initializers[t].values().astype(np.float64) for t in bn.inputs[1:])
        if any(initializers[t].dtype.kind == "FIXED" for t in bn.inputs[1:]):
            gamma, beta, mean, var = (
                initializers[t].values().astype(np.float64)
                * 2.0 ** initializers[t].dtype.scale_exponent
                for t in bn.inputs[1:]
            )
        v = gamma / np.sqrt(var + bn.attr("epsilon"))
        wvals = w.values().astype(np.float64) * 2.0**w.dtype.scale_exponent
        folded_w = v.reshape((-1,) + (1,) * (wvals.ndim - 1)) * wvals
        if len(node.inputs) == 3:
            bt = initializers[node.inputs[2]]
            bvals = bt.values().astype(np.float64) * 2.0**bt.dtype.scale_exponent
        else:
            bvals = np.zeros(wvals.shape[0])
        folded_b = v * (bvals - mean) + beta

        w_name, b_name = f"{node.name}_folded_w", f"{node.name}_folded_b"
        initializers[w_name] = Tensor(w_name, w.shape, DataType("FLOAT32"), folded_w.reshape(-1))
        initializers[b_name] = Tensor(b_name, (wvals.shape[0],), DataType("FLOAT32"), folded_b)
        nodes[idx] = Node(
            node.op,
            node.name,
            [node.inputs[0], w_name, b_name],
            list(bn.outputs),
            dict(node.attrs),
        )
        drop_nodes.add(bn.name)
        report.rewritten += 1
        report.removed += 1
    if report.rewritten == 0:
        return model, PassReport("fold-bn", status="no-op")
    nodes = [n for n in nodes if n.name not in drop_nodes]
    used = set()
    for n in nodes:
        used.update(n.inputs)
    used.update(model.outputs)
    initializers = {k: t for k, t in initializers.items() if k in used}
    return _clone(model, nodes=nodes, initializers=initializers), report


# ---------------------------------------------------------------------
# streamlining
# ---------------------------------------------------------------------


def _quant_boundaries(scale: Fraction, zp: int, dtype: DataType, rounding: str):
    """Pre-quantizer cut points u_l plus the count-to-level affine map.

    Level l (l > min) is reached exactly when the quantizer input x satisfies
    x >= u_l; with round-half-up, u_l = scale * (l - zp - 1/2), with floor,
    u_l = scale * (l - zp). BIPOLAR is the sign step at -zp * scale with
    outputs {-1, +1}.
    """
    if dtype.kind == "BIPOLAR":
        return [-Fraction(zp) * scale], Fraction(2), Fraction(-1)
    qmin, qmax = dtype.mantissa_min(), dtype.mantissa_max()
    half = Fraction(1, 2) if rounding == "ROUND_HALF_UP" else Fraction(0)
    cuts = [scale * (Fraction(level - zp) - half) for level in range(qmin + 1, qmax + 1)]
    return cuts, Fraction(1), Fraction(qmin)


def _channel_acc_range(w: np.ndarray, x_lo: int, x_hi: int, bias=None, include_zero=False):
    """Exact per-channel worst-case dot-product mantissa range."""
    if include_zero:
        x_lo, x_hi = min(x_lo, 0), max(x_hi, 0)
    flat = w.reshape(w.shape[0], -1).astype(object)
    a, b = flat * x_lo, flat * x_hi
    lo = np.minimum(a, b).sum(axis=1)
    hi = np.maximum(a, b).sum(axis=1)
    if bias is not None:
        lo = lo + bias.astype(object)
        hi = hi + bias.astype(object)
    return lo, hi


def _ceil_frac(x: Fraction) -> int:
    return -((-x.numerator) // x.denominator)


@dataclass
class _Chain:
    linear: Node
    bn: Node | None
    relu: Node | None
    quant: Node


def _find_chains(model: Model, dtypes):
    consumers = model.consumer_map()
    chains = []
    for node in model.topological_nodes():
        if node.op not in ("Conv2D", "Dense"):
            continue
        bn = relu = quant = None
        cur = node
        nxt = _sole_consumer(model, cur.outputs[0], consumers)
        if nxt is not None and nxt.op == "BatchNorm":
            bn, cur = nxt, nxt
            nxt = _sole_consumer(model, cur.outputs[0], consumers)
        if nxt is not None and nxt.op == "ReLU":
            relu, cur = nxt, nxt
            nxt = _sole_consumer(model, cur.outputs[0], consumers)
        if nxt is not None and nxt.op == "Quant":
            quant = nxt
        if quant is not None:
            chains.append(_Chain(node, bn, relu, quant))
    return chains


def _bn_affine(model, bn: Node, channels: int):
    """Exact per-channel (a, d) with BN(x) = a*x + d; sqrt is exact for
    perfect squares and 128-bit-precise otherwise."""
    if bn is None:
        one, zero = Fraction(1), Fraction(0)
        return [one] * channels, [zero] * channels
    gamma, beta, mean, var = (model.initializers[t].values() for t in bn.inputs[1:])
    eps = Fraction(bn.attr("epsilon"))
    a, d = [], []
    for c in range(channels):
        g = Fraction(float(gamma[c]))
        root = rational_sqrt(Fraction(float(var[c])) + eps)
        ac = g / root
        a.append(ac)
        d.append(Fraction(float(beta[c])) - ac * Fraction(float(mean[c])))
    return a, d


def streamline(model: Model):
    """Lower float scale/shift/activation chains to integer thresholding.

    Fails with NotStreamlinable if any FLOAT32 edge survives the rewrite.
    """
    report = PassReport("streamline")
    shapes, _ = infer_shapes(model)
    dtypes = infer_dtypes(model, shapes)
    chains = _find_chains(model, dtypes)

    nodes = list(model.nodes)
    initializers = dict(model.initializers)
    drop = set()
    for chain in chains:
        lin = chain.linear
        w = initializers.get(lin.inputs[1])
        if w is None:
            raise NotStreamlinable(f"{lin.name}: weights are not constant")
        if w.dtype.is_float:
            raise NotStreamlinable(f"{lin.name}: FLOAT32 weights cannot be integerized")
        in_dt = dtypes.get(lin.inputs[0])
        if in_dt is None or not in_dt.is_integer:
            raise NotStreamlinable(
                f"{lin.name}: input edge {lin.inputs[0]!r} is not an integer stream"
            )
        w_mant = w.values()
        channels = w_mant.shape[0]
        sigma = Fraction(2) ** w.dtype.scale_exponent

        bias_real = [Fraction(0)] * channels
        if len(lin.inputs) == 3:
            bt = initializers[lin.inputs[2]]
            bexp = Fraction(2) ** bt.dtype.scale_exponent
            bias_real = [Fraction(int(v)) * bexp for v in bt.values()]

        a_vec, d_vec = _bn_affine(model, chain.bn, channels)
        phi = [a_vec[c] * sigma for c in range(channels)]
        psi = [a_vec[c] * bias_real[c] + d_vec[c] for c in range(channels)]

        flip = [p < 0 for p in phi]
        new_w = w_mant.astype(np.int64).copy()
        if any(flip):
            mask = np.asarray(flip)
            new_w[mask] = -new_w[mask]
            phi = [-p if f else p for p, f in zip(phi, flip)]
        # weight dtype after mantissa-integerization (and possible negation)
        w_lo, w_hi = int(new_w.min()), int(new_w.max())
        if w.dtype.kind == "BIPOLAR" and not any(flip):
            new_wdt = BIPOLAR
        elif w.dtype.kind == "BIPOLAR":
            new_wdt = BIPOLAR  # negated bipolar rows are still {-1, +1}
        else:
            new_wdt = DataType("INT", bits=signed_bits_for_range(w_lo, w_hi), signed=True)

        x_lo, x_hi = in_dt.mantissa_min(), in_dt.mantissa_max()
        pad = lin.attr("pad") or 0
        acc_lo, acc_hi = _channel_acc_range(new_w, x_lo, x_hi, include_zero=pad > 0)

        q = chain.quant
        cuts, out_scale, out_bias = _quant_boundaries(
            q.attr("scale"), q.attr("zero_point"), q.attr("dtype"), q.attr("rounding")
        )
        has_relu = chain.relu is not None

        rows = np.empty((channels, len(cuts)), dtype=np.int64)
        for c in range(channels):
            lo_c, hi_c = int(acc_lo[c]), int(acc_hi[c])
            for j, u in enumerate(cuts):
                if has_relu and u <= 0:
                    t = lo_c  # ReLU floor already clears this boundary
                elif phi[c] == 0:
                    level_in = max(psi[c], Fraction(0)) if has_relu else psi[c]
                    t = lo_c if level_in >= u else hi_c + 1
                else:
                    t = _ceil_frac((u - psi[c]) / phi[c])
                    t = min(max(t, lo_c), hi_c + 1)
                rows[c, j] = t

        t_name = f"{lin.name}_thresholds"
        t_bits = signed_bits_for_range(int(rows.min()), int(rows.max())) if rows.size else 1
        initializers[t_name] = Tensor(
            t_name, rows.shape, DataType("INT", bits=min(max(t_bits, 1), DECLARED_MAX_BITS)), rows.reshape(-1)
        )
        w_name = f"{lin.inputs[1]}_int"
        initializers[w_name] = Tensor(w_name, w.shape, new_wdt, new_w.reshape(-1))

        attrs = dict(lin.attrs)
        attrs.pop("accum_dtype", None)  # bias fold changes the range
        idx = next(i for i, n in enumerate(nodes) if n.name == lin.name)
        nodes[idx] = Node(lin.op, lin.name, [lin.inputs[0], w_name], list(lin.outputs), attrs)
        mt = Node(
            "MultiThreshold",
            q.name,
            [lin.outputs[0], t_name],
            list(q.outputs),
            {"out_scale": out_scale, "out_bias": out_bias, "out_dtype": q.attr("dtype")},
        )
        last_removed = {n.name for n in (chain.bn, chain.relu) if n is not None}
        drop.update(last_removed)
        qidx = next(i for i, n in enumerate(nodes) if n.name == q.name)
        nodes[qidx] = mt
        report.rewritten += 1
        report.removed += len(last_removed)
        report.added += 1

    nodes = [n for n in nodes if n.name not in drop]
    used = set(model.outputs)
    for n in nodes:
        used.update(n.inputs)
    initializers = {k: t for k, t in initializers.items() if k in used}
    out = _clone(model, nodes=nodes, initializers=initializers)

    leftover = infer_dtypes(out)
    for name, dt in leftover.items():
        if dt.is_float and name not in out.initializers:
            producer = out.producer_map().get(name)
            where = producer.name if producer is not None else name
            raise NotStreamlinable(f"FLOAT32 edge {name!r} survives streamlining at {where!r}")
    return out, report


# ---------------------------------------------------------------------
# ReLU merging
# ---------------------------------------------------------------------


def merge_relu(model: Model):
    """Fuse standalone ReLU nodes into the preceding Conv2D/Dense stage."""
    report = PassReport("merge-relu")
    consumers = model.consumer_map()
    nodes = list(model.nodes)
    drop = set()
    for idx, node in enumerate(nodes):
        if node.op not in ("Conv2D", "Dense") or node.attr("fused_relu"):
            continue
        relu = _sole_consumer(model, node.outputs[0], consumers)
        if relu is None or relu.op != "ReLU":
            continue
        attrs = dict(node.attrs)
        attrs["fused_relu"] = True
        nodes[idx] = Node(node.op, node.name, list(node.inputs), list(relu.outputs), attrs)
        drop.add(relu.name)
        report.rewritten += 1
        report.removed += 1
    if not drop:
        return model, PassReport("merge-relu", status="no-op")
    nodes = [n for n in nodes if n.name not in drop]
    return _clone(model, nodes=nodes), report


# ---------------------------------------------------------------------
# softmax removal
# ---------------------------------------------------------------------


def remove_softmax(model: Model):
    """Replace a terminal Softmax with ArgMax; softmax is monotone, so the
    predicted class is unchanged."""
    consumers = model.consumer_map()
    candidates = [n for n in model.nodes if n.op == "Softmax"]
    if not candidates:
        raise PatternNotFound("no Softmax node in the graph")
    target = None
    for n in candidates:
        out = n.outputs[0]
        if out in model.outputs and not consumers.get(out):
            target = n
            break
    if target is None:
        feeds = [c.name for n in candidates for c in consumers.get(n.outputs[0], [])]
        raise PatternNotFound(
            f"Softmax feeds non-output consumer(s) {feeds}; only terminal softmax is removable"
        )
    report = PassReport("remove-softmax", removed=1, added=1, rewritten=1)
    nodes = [
        Node("ArgMax", n.name, list(n.inputs), list(n.outputs)) if n.name == target.name else n
        for n in model.nodes
    ]
    return _clone(model, nodes=nodes), report


# ---------------------------------------------------------------------
# accumulator minimization
# ---------------------------------------------------------------------


def minimize_accumulators(model: Model):
    """Assign each linear node the narrowest signed accumulator covering its
    exact worst-case range, derived from the weight values and input dtype
    bounds. Fixed-point layers are sized in the mantissa domain."""
    report = PassReport("min-accum")
    shapes, _ = infer_shapes(model)
    dtypes = infer_dtypes(model, shapes)
    nodes = list(model.nodes)
    for idx, node in enumerate(nodes):
        if node.op not in ("Conv2D", "Dense"):
            continue
        w = model.initializers.get(node.inputs[1])
        in_dt = dtypes.get(node.inputs[0])
        if w is None or w.dtype.is_float or in_dt is None or in_dt.is_float:
            report.notes.append(f"{node.name}: skipped (no integer annotation)")
            continue
        acc_exp = w.dtype.scale_exponent + in_dt.scale_exponent
        bias = None
        if len(node.inputs) == 3:
            bt = model.initializers[node.inputs[2]]
            shift = bt.dtype.scale_exponent - acc_exp
            if shift < 0:
                report.notes.append(f"{node.name}: skipped (bias below accumulator lattice)")
                continue
            bias = bt.values().astype(object) * (1 << shift)
        pad = (node.attr("pad") or 0) if node.op == "Conv2D" else 0
        lo_c, hi_c = _channel_acc_range(
            w.values(),
            in_dt.mantissa_min(),
            in_dt.mantissa_max(),
            bias=bias,
            include_zero=pad > 0,
        )
        lo, hi = int(min(lo_c)), int(max(hi_c))
        bits = signed_bits_for_range(lo, hi)
        frac = -acc_exp
        if frac > 0:
            bits = max(bits, frac)
            dt = DataType("FIXED", bits=bits, int_bits=bits - frac)
        else:
            dt = DataType("INT", bits=bits, signed=True)
        if dt.bits > DECLARED_MAX_BITS:
            report.notes.append(f"{node.name}: needs {dt.bits} bits, beyond declarable width")
            continue
        if node.attr("accum_dtype") == dt:
            continue
        attrs = dict(node.attrs)
        attrs["accum_dtype"] = dt
        nodes[idx] = Node(node.op, node.name, list(node.inputs), list(node.outputs), attrs)
        report.rewritten += 1
    if report.rewritten == 0:
        return model, report
    return _clone(model, nodes=nodes), report


# ---------------------------------------------------------------------
# sequencing
# ---------------------------------------------------------------------

PASSES = {
    "constant-fold": constant_fold,
    "fold-bn": fold_bn,
    "streamline": streamline,
    "merge-relu": merge_relu,
    "remove-softmax": remove_softmax,
    "min-accum": minimize_accumulators,
}

DEFAULT_PIPELINE = ("constant-fold", "fold-bn", "streamline", "merge-relu", "min-accum")


def run_pipeline(model: Model, passes) -> tuple:
    """Apply passes in order; pass errors carry the failing index."""
    reports = []
    current = model
    for i, p in enumerate(passes):
        fn = PASSES.get(p) if isinstance(p, str) else p
        if fn is None:
            raise KeyError(f"unknown pass {p!r}; known: {', '.join(PASSES)}")
        name = p if isinstance(p, str) else getattr(p, "__name__", str(p))
        try:
            current, rep = fn(current)
        except Exception as e:
            raise PassPipelineError(i, name, e) from e
        reports.append(rep)
    diags = validate(current)
    if diags:
        raise ValidationError(diags)
    return current, reports
