"""Quantized-graph intermediate representation.

A Model is a DAG of typed operator nodes plus constant initializers, with a
closed op set sized for small quantized CNN/MLP inference graphs. Models are
treated as immutable after construction: every transform builds a new Model.

The serialized form is a UTF-8 JSON document with top-level keys
``name``, ``flow``, ``inputs``, ``outputs``, ``initializers``, ``nodes``.
Integer-typed payloads must be literal JSON integers; rationals are written
as ``"p/q"`` strings so they round-trip exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .datatypes import (
    DECLARED_MAX_BITS,
    DataType,
    format_rational,
    parse_dtype,
    parse_rational,
    signed_bits_for_range,
)
from .errors import SchemaError, ValidationError

OPS = (
    "Conv2D",
    "Dense",
    "BatchNorm",
    "ReLU",
    "MaxPool2D",
    "AvgPool2D",
    "Add",
    "Quant",
    "MultiThreshold",
    "Softmax",
    "ArgMax",
    "Flatten",
)

# attribute schema per op: name -> (type, required, default)
# types: int, bool, float, rational, dtype, enum:<choices...>
_ATTR_SCHEMAS = {
    "Conv2D": {
        "kernel": ("int", True, None),
        "stride": ("int", True, None),
        "pad": ("int", False, 0),
        "accum_dtype": ("dtype", False, None),
        "fused_relu": ("bool", False, False),
        "reuse_factor": ("int", False, 1),
    },
    "Dense": {
        "accum_dtype": ("dtype", False, None),
        "fused_relu": ("bool", False, False),
        "reuse_factor": ("int", False, 1),
    },
    "BatchNorm": {"epsilon": ("float", True, None)},
    "ReLU": {},
    "MaxPool2D": {"kernel": ("int", True, None), "stride": ("int", False, None)},
    "AvgPool2D": {"kernel": ("int", True, None), "stride": ("int", False, None)},
    "Add": {},
    "Quant": {
        "scale": ("rational", True, None),
        "zero_point": ("int", True, None),
        "dtype": ("dtype", True, None),
        "rounding": ("enum:ROUND_HALF_UP,FLOOR", True, None),
    },
    "MultiThreshold": {
        "out_scale": ("rational", True, None),
        "out_bias": ("rational", True, None),
        "out_dtype": ("dtype", True, None),
    },
    "Softmax": {},
    "ArgMax": {},
    "Flatten": {},
}

# (min_inputs, max_inputs) per op; all ops have exactly one output
_ARITY = {
    "Conv2D": (2, 3),
    "Dense": (2, 3),
    "BatchNorm": (5, 5),
    "ReLU": (1, 1),
    "MaxPool2D": (1, 1),
    "AvgPool2D": (1, 1),
    "Add": (2, 2),
    "Quant": (1, 1),
    "MultiThreshold": (2, 2),
    "Softmax": (1, 1),
    "ArgMax": (1, 1),
    "Flatten": (1, 1),
}


@dataclass
class Tensor:
    """Named value: shape, dtype, and an optional constant payload.

    Integer-domain payloads (INT, BIPOLAR, FIXED mantissas) are stored as
    int64 arrays; FLOAT32 payloads as float64 arrays.
    """

    name: str
    shape: tuple
    dtype: DataType
    data: np.ndarray | None = None

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if self.data is not None:
            want = np.float64 if self.dtype.is_float else np.int64
            self.data = np.asarray(self.data, dtype=want).reshape(-1)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1

    def values(self) -> np.ndarray:
        """Payload reshaped to the declared shape."""
        return self.data.reshape(self.shape)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        if (self.name, self.shape, self.dtype) != (other.name, other.shape, other.dtype):
            return False
        if (self.data is None) != (other.data is None):
            return False
        return self.data is None or np.array_equal(self.data, other.data)


@dataclass
class Node:
    op: str
    name: str
    inputs: list
    outputs: list
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = list(self.inputs)
        self.outputs = list(self.outputs)

    def attr(self, name):
        """Attribute value with the schema default applied."""
        if name in self.attrs:
            return self.attrs[name]
        schema = _ATTR_SCHEMAS.get(self.op, {})
        if name in schema:
            default = schema[name][2]
            if self.op in ("MaxPool2D", "AvgPool2D") and name == "stride":
                return self.attrs.get("kernel")
            return default
        return None

    def __eq__(self, other):
        if not isinstance(other, Node):
            return NotImplemented
        return (
            self.op == other.op
            and self.name == other.name
            and self.inputs == other.inputs
            and self.outputs == other.outputs
            and self.attrs == other.attrs
        )


@dataclass
class Model:
    name: str
    flow: str  # "hls4ml" | "finn"
    inputs: list  # Tensor declarations (data=None)
    outputs: list  # tensor names
    initializers: dict  # name -> Tensor
    nodes: list
    notes: str = ""

    # ---- lookups -----------------------------------------------------

    def input_names(self):
        return [t.name for t in self.inputs]

    def tensor_decl(self, name) -> Tensor | None:
        for t in self.inputs:
            if t.name == name:
                return t
        return self.initializers.get(name)

    def producer_map(self) -> dict:
        out = {}
        for n in self.nodes:
            for t in n.outputs:
                out[t] = n
        return out

    def consumer_map(self) -> dict:
        out = {}
        for n in self.nodes:
            for t in n.inputs:
                out.setdefault(t, []).append(n)
        return out

    def topological_nodes(self) -> list:
        """Kahn topological order, stable by declaration order.

        Raises ValidationError when the graph has a cycle.
        """
        order = self._topological_nodes_or_none()
        if order is None:
            raise ValidationError([Diagnostic("dag", self.name, "graph is not a DAG")])
        return order

    def _topological_nodes_or_none(self):
        known = set(self.input_names()) | set(self.initializers)
        pending = list(self.nodes)
        order = []
        while pending:
            ready = [n for n in pending if all(i in known for i in n.inputs)]
            if not ready:
                return None
            nxt = ready[0]
            order.append(nxt)
            pending.remove(nxt)
            known.update(nxt.outputs)
        return order

    def count_params(self) -> int:
        """Element count of Conv2D/Dense weight and bias initializers."""
        total = 0
        for n in self.nodes:
            if n.op in ("Conv2D", "Dense"):
                for t in n.inputs[1:]:
                    init = self.initializers.get(t)
                    if init is not None:
                        total += init.size
        return total

    def count_bn_params(self) -> int:
        """Element count of BatchNorm parameter initializers (4 per channel)."""
        total = 0
        for n in self.nodes:
            if n.op == "BatchNorm":
                for t in n.inputs[1:]:
                    init = self.initializers.get(t)
                    if init is not None:
                        total += init.size
        return total

    def __eq__(self, other):
        if not isinstance(other, Model):
            return NotImplemented
        return (
            self.name == other.name
            and self.flow == other.flow
            and self.inputs == other.inputs
            and self.outputs == other.outputs
            and self.initializers == other.initializers
            and self.nodes == other.nodes
        )


@dataclass(frozen=True)
class Diagnostic:
    """Validation finding: rule id, offending node/tensor, message."""

    rule: str
    where: str
    message: str

    def __str__(self):
        return f"[{self.rule}] {self.where}: {self.message}"


# ---------------------------------------------------------------------
# shape and dtype inference
# ---------------------------------------------------------------------


def _conv_out(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def infer_shapes(model: Model):
    """Per-tensor shapes via a forward walk; returns (shapes, diagnostics)."""
    shapes = {}
    diags = []
    for t in model.inputs:
        shapes[t.name] = t.shape
    for name, t in model.initializers.items():
        shapes[name] = t.shape

    order = model._topological_nodes_or_none()
    if order is None:
        return shapes, [Diagnostic("dag", model.name, "graph is not a DAG")]

    def bad(node, msg, rule="shape-mismatch"):
        diags.append(Diagnostic(rule, node.name, msg))

    for n in order:
        ins = [shapes.get(i) for i in n.inputs]
        if any(s is None for s in ins):
            continue  # reported elsewhere as dangling
        out = None
        if n.op == "Conv2D":
            x, w = ins[0], ins[1]
            k, s, p = n.attr("kernel"), n.attr("stride"), n.attr("pad")
            if len(x) != 3:
                bad(n, f"Conv2D input must be [C,H,W], got {list(x)}")
            elif len(w) != 4 or w[1] != x[0] or w[2] != k or w[3] != k:
                bad(n, f"Conv2D weight {list(w)} incompatible with input {list(x)} kernel {k}")
            elif isinstance(s, int) and s >= 1 and isinstance(k, int) and k >= 1:
                h, wd = _conv_out(x[1], k, s, p), _conv_out(x[2], k, s, p)
                if h < 1 or wd < 1:
                    bad(n, f"Conv2D output {h}x{wd} collapses to nothing")
                else:
                    out = (w[0], h, wd)
                if len(ins) == 3 and ins[2] != (w[0],):
                    bad(n, f"bias shape {list(ins[2])} != [{w[0]}]")
        elif n.op == "Dense":
            x, w = ins[0], ins[1]
            if len(x) != 1:
                bad(n, f"Dense input must be flat, got {list(x)}")
            elif len(w) != 2 or w[1] != x[0]:
                bad(n, f"Dense weight {list(w)} incompatible with input {list(x)}")
            else:
                out = (w[0],)
                if len(ins) == 3 and ins[2] != (w[0],):
                    bad(n, f"bias shape {list(ins[2])} != [{w[0]}]")
        elif n.op == "BatchNorm":
            x = ins[0]
            c = x[0]
            for nm, s in zip(n.inputs[1:], ins[1:]):
                if s != (c,):
                    bad(n, f"BatchNorm param {nm} shape {list(s)} != [{c}]")
            out = x
        elif n.op in ("MaxPool2D", "AvgPool2D"):
            x = ins[0]
            k = n.attr("kernel")
            s = n.attr("stride")
            if len(x) != 3:
                bad(n, f"pool input must be [C,H,W], got {list(x)}")
            elif isinstance(k, int) and k >= 1 and isinstance(s, int) and s >= 1:
                h, wd = (x[1] - k) // s + 1, (x[2] - k) // s + 1
                if h < 1 or wd < 1:
                    bad(n, f"pool output {h}x{wd} collapses to nothing")
                else:
                    out = (x[0], h, wd)
        elif n.op == "Add":
            if ins[0] != ins[1]:
                bad(n, f"Add operands {list(ins[0])} vs {list(ins[1])}")
            else:
                out = ins[0]
        elif n.op in ("ReLU", "Quant"):
            out = ins[0]
        elif n.op == "MultiThreshold":
            x, t = ins[0], ins[1]
            if len(t) != 2 or t[0] != x[0]:
                bad(n, f"threshold shape {list(t)} must be [{x[0]}, n]")
            else:
                out = x
        elif n.op == "Softmax":
            if len(ins[0]) != 1:
                bad(n, f"Softmax input must be flat, got {list(ins[0])}")
            out = ins[0]
        elif n.op == "ArgMax":
            if len(ins[0]) != 1:
                bad(n, f"ArgMax input must be flat, got {list(ins[0])}")
            out = (1,)
        elif n.op == "Flatten":
            out = (int(np.prod(ins[0], dtype=np.int64)),)
        if out is not None:
            shapes[n.outputs[0]] = tuple(int(v) for v in out)
    return shapes, diags


def _linear_accum_dtype(w_dtype: DataType, x_dtype: DataType, terms: int) -> DataType:
    """Bound-based accumulator type for a linear layer (dtype bounds only)."""
    wl, wh = w_dtype.mantissa_min(), w_dtype.mantissa_max()
    xl, xh = x_dtype.mantissa_min(), x_dtype.mantissa_max()
    prods = (wl * xl, wl * xh, wh * xl, wh * xh)
    lo, hi = terms * min(prods), terms * max(prods)
    bits = signed_bits_for_range(lo, hi)
    frac = -(w_dtype.scale_exponent + x_dtype.scale_exponent)
    if frac <= 0:
        return DataType("INT", bits=bits, signed=True)
    bits = max(bits, frac)
    return DataType("FIXED", bits=bits, int_bits=bits - frac)


def infer_dtypes(model: Model, shapes=None):
    """Per-tensor datatypes; accumulator edges get bound-derived widths."""
    if shapes is None:
        shapes, _ = infer_shapes(model)
    dtypes = {}
    for t in model.inputs:
        dtypes[t.name] = t.dtype
    for name, t in model.initializers.items():
        dtypes[name] = t.dtype
    order = model._topological_nodes_or_none() or []
    for n in order:
        ins = [dtypes.get(i) for i in n.inputs]
        if any(d is None for d in ins):
            continue
        out = None
        if n.op in ("Conv2D", "Dense"):
            if n.attr("accum_dtype") is not None:
                out = n.attr("accum_dtype")
            elif ins[0].is_float or ins[1].is_float:
                out = DataType("FLOAT32")
            else:
                xshape = shapes.get(n.inputs[0])
                wshape = shapes.get(n.inputs[1])
                if wshape is None:
                    continue
                terms = int(np.prod(wshape[1:], dtype=np.int64))
                out = _linear_accum_dtype(ins[1], ins[0], max(terms, 1))
        elif n.op in ("BatchNorm", "Softmax", "AvgPool2D"):
            out = DataType("FLOAT32")
        elif n.op in ("ReLU", "MaxPool2D", "Flatten"):
            out = ins[0]
        elif n.op == "Add":
            if ins[0].is_float or ins[1].is_float:
                out = DataType("FLOAT32")
            elif ins[0].kind == "FIXED" or ins[1].kind == "FIXED":
                frac = max(-ins[0].scale_exponent, -ins[1].scale_exponent, 0)
                lo = ins[0].min() + ins[1].min()
                hi = ins[0].max() + ins[1].max()
                mbits = signed_bits_for_range(
                    math.floor(lo * 2**frac), math.ceil(hi * 2**frac)
                )
                mbits = max(mbits, frac)
                out = DataType("FIXED", bits=mbits, int_bits=mbits - frac)
            else:
                lo = int(ins[0].min() + ins[1].min())
                hi = int(ins[0].max() + ins[1].max())
                out = DataType("INT", bits=signed_bits_for_range(lo, hi), signed=True)
        elif n.op == "Quant":
            out = n.attr("dtype")
        elif n.op == "MultiThreshold":
            out = n.attr("out_dtype")
        elif n.op == "ArgMax":
            out = DataType("INT", bits=32, signed=True)
        if out is not None:
            dtypes[n.outputs[0]] = out
    return dtypes


# ---------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------


def _check_attrs(node: Node, diags):
    schema = _ATTR_SCHEMAS[node.op]
    for key in node.attrs:
        if key not in schema:
            diags.append(
                Diagnostic("attrs-unknown", node.name, f"unknown attribute {key!r} for {node.op}")
            )
    for key, (kind, required, _default) in schema.items():
        if key not in node.attrs:
            if required:
                diags.append(
                    Diagnostic("attrs-missing", node.name, f"{node.op} requires attribute {key!r}")
                )
            continue
        val = node.attrs[key]
        if kind == "int" and not (isinstance(val, int) and not isinstance(val, bool)):
            diags.append(Diagnostic("attrs-invalid", node.name, f"{key} must be an integer"))
        elif kind == "bool" and not isinstance(val, bool):
            diags.append(Diagnostic("attrs-invalid", node.name, f"{key} must be a boolean"))
        elif kind == "float" and not isinstance(val, (int, float)):
            diags.append(Diagnostic("attrs-invalid", node.name, f"{key} must be numeric"))
        elif kind == "rational" and not isinstance(val, Fraction):
            diags.append(Diagnostic("attrs-invalid", node.name, f"{key} must be rational"))
        elif kind == "dtype" and not isinstance(val, DataType):
            diags.append(Diagnostic("attrs-invalid", node.name, f"{key} must be a datatype"))
        elif kind.startswith("enum:") and val not in kind[5:].split(","):
            diags.append(Diagnostic("attrs-invalid", node.name, f"{key} must be one of {kind[5:]}"))

    # op-specific numeric rules; rule ids name the constraint
    def ival(key):
        v = node.attrs.get(key)
        return v if isinstance(v, int) and not isinstance(v, bool) else None

    if node.op in ("Conv2D", "MaxPool2D", "AvgPool2D"):
        k = ival("kernel")
        if k is not None and k < 1:
            diags.append(Diagnostic("kernel≥1", node.name, f"kernel {k} must be ≥ 1"))
        s = ival("stride")
        if s is not None and s < 1:
            diags.append(Diagnostic("stride≥1", node.name, f"stride {s} must be ≥ 1"))
    if node.op == "Conv2D":
        p = ival("pad")
        if p is not None and p < 0:
            diags.append(Diagnostic("pad≥0", node.name, f"pad {p} must be ≥ 0"))
    if node.op in ("Conv2D", "Dense"):
        rf = ival("reuse_factor")
        if rf is not None and rf < 1:
            diags.append(Diagnostic("reuse-factor≥1", node.name, f"reuse_factor {rf} must be ≥ 1"))
        acc = node.attrs.get("accum_dtype")
        if isinstance(acc, DataType) and acc.kind not in ("INT", "FIXED"):
            diags.append(Diagnostic("attrs-invalid", node.name, "accum_dtype must be INT or FIXED"))
    if node.op == "BatchNorm":
        eps = node.attrs.get("epsilon")
        if isinstance(eps, (int, float)) and not eps > 0:
            diags.append(Diagnostic("bn-params", node.name, f"epsilon {eps} must be > 0"))
    if node.op == "Quant":
        sc = node.attrs.get("scale")
        if isinstance(sc, Fraction) and sc <= 0:
            diags.append(Diagnostic("quant-attrs", node.name, f"scale {sc} must be positive"))
        dt = node.attrs.get("dtype")
        if isinstance(dt, DataType) and dt.kind not in ("INT", "BIPOLAR"):
            diags.append(Diagnostic("quant-attrs", node.name, "Quant dtype must be INT or BIPOLAR"))
    if node.op == "MultiThreshold":
        dt = node.attrs.get("out_dtype")
        if isinstance(dt, DataType) and dt.kind not in ("INT", "BIPOLAR"):
            diags.append(
                Diagnostic("mt-domain", node.name, "out_dtype must be INT or BIPOLAR")
            )


def _check_payload(tensor: Tensor, diags):
    where = tensor.name
    if tensor.dtype.kind in ("INT", "FIXED") and not (
        1 <= tensor.dtype.bits <= DECLARED_MAX_BITS
    ):
        diags.append(
            Diagnostic("bits-range", where, f"declared width {tensor.dtype.bits} outside 1..32")
        )
    if tensor.data is None:
        return
    if tensor.data.size != tensor.size:
        diags.append(
            Diagnostic(
                "data-count", where, f"{tensor.data.size} values for shape {list(tensor.shape)}"
            )
        )
        return
    if tensor.dtype.is_float:
        if not np.all(np.isfinite(tensor.data)):
            diags.append(Diagnostic("data-domain", where, "non-finite float payload"))
        return
    lo, hi = tensor.dtype.mantissa_min(), tensor.dtype.mantissa_max()
    if tensor.data.size and not (
        int(tensor.data.min()) >= lo and int(tensor.data.max()) <= hi
    ):
        diags.append(
            Diagnostic("data-domain", where, f"payload outside {tensor.dtype} range [{lo},{hi}]")
        )
    if tensor.dtype.kind == "BIPOLAR" and tensor.data.size:
        if not np.all(np.abs(tensor.data) == 1):
            diags.append(Diagnostic("data-domain", where, "BIPOLAR payload must be ±1"))


def validate(model: Model) -> list:
    """All structural invariants; empty list means the model is well-formed."""
    diags = []
    seen = set()
    for t in model.inputs:
        if t.name in seen:
            diags.append(Diagnostic("duplicate-tensor", t.name, "duplicate tensor name"))
        seen.add(t.name)
    for name in model.initializers:
        if name in seen:
            diags.append(Diagnostic("duplicate-tensor", name, "duplicate tensor name"))
        seen.add(name)
    node_names = set()
    for n in model.nodes:
        if n.op not in OPS:
            diags.append(Diagnostic("unknown-op", n.name, f"unknown op {n.op!r}"))
            continue
        if n.name in node_names:
            diags.append(Diagnostic("duplicate-node", n.name, "duplicate node name"))
        node_names.add(n.name)
        lo, hi = _ARITY[n.op]
        if not lo <= len(n.inputs) <= hi:
            diags.append(
                Diagnostic("arity", n.name, f"{n.op} takes {lo}..{hi} inputs, got {len(n.inputs)}")
            )
        if len(n.outputs) != 1:
            diags.append(Diagnostic("arity", n.name, f"{n.op} emits 1 output, got {len(n.outputs)}"))
        for t in n.outputs:
            if t in seen:
                diags.append(Diagnostic("duplicate-tensor", t, "tensor defined twice"))
            seen.add(t)
        _check_attrs(n, diags)

    for n in model.nodes:
        for t in n.inputs:
            if t not in seen:
                diags.append(
                    Diagnostic("dangling-tensor", n.name, f"input references unknown tensor {t!r}")
                )
    for t in model.outputs:
        if t not in seen:
            diags.append(Diagnostic("graph-io", model.name, f"declared output {t!r} does not exist"))
    if model.flow not in ("hls4ml", "finn"):
        diags.append(Diagnostic("graph-io", model.name, f"unknown flow {model.flow!r}"))

    for t in model.inputs:
        _check_payload(t, diags)
    for t in model.initializers.values():
        _check_payload(t, diags)

    if model._topological_nodes_or_none() is None:
        diags.append(Diagnostic("dag", model.name, "graph is not a DAG"))
        return diags

    shapes, shape_diags = infer_shapes(model)
    diags.extend(shape_diags)

    # value-level rules that need shapes
    for n in model.nodes:
        if n.op == "BatchNorm":
            var = model.initializers.get(n.inputs[4])
            if var is not None and var.data is not None and var.data.size:
                if var.dtype.is_float and float(var.data.min()) < 0:
                    diags.append(Diagnostic("bn-params", n.name, "variance must be ≥ 0"))
        if n.op == "MultiThreshold":
            thr = model.initializers.get(n.inputs[1])
            if thr is not None and thr.data is not None and len(thr.shape) == 2:
                rows = thr.values()
                if rows.shape[1] > 1 and np.any(np.diff(rows, axis=1) < 0):
                    diags.append(
                        Diagnostic("mt-sorted", n.name, "threshold rows must be non-decreasing")
                    )
                out_dt = n.attrs.get("out_dtype")
                if isinstance(out_dt, DataType) and out_dt.kind == "INT":
                    levels = thr.shape[1] + 1
                    if levels > 2**out_dt.bits:
                        diags.append(
                            Diagnostic(
                                "mt-domain",
                                n.name,
                                f"{levels} output levels exceed {out_dt} domain",
                            )
                        )
    return diags


# ---------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------


def _attr_to_wire(op, key, val):
    if isinstance(val, Fraction):
        return format_rational(val)
    if isinstance(val, DataType):
        return val.encode()
    return val


def _attr_from_wire(op, key, val, where):
    schema = _ATTR_SCHEMAS.get(op, {})
    if key not in schema:
        return val  # kept so validation can flag it
    kind = schema[key][0]
    try:
        if kind == "int":
            if not (isinstance(val, int) and not isinstance(val, bool)):
                raise ValueError("must be an integer")
            return val
        if kind == "bool":
            if not isinstance(val, bool):
                raise ValueError("must be a boolean")
            return val
        if kind == "float":
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ValueError("must be numeric")
            return float(val)
        if kind == "rational":
            return parse_rational(val)
        if kind == "dtype":
            return parse_dtype(val)
        return val
    except ValueError as e:
        raise SchemaError(f"{where}: bad attribute {key!r}: {e}") from e


def _tensor_from_wire(name, obj, where, allow_data=True):
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: tensor entry must be an object")
    for key in ("shape", "dtype"):
        if key not in obj:
            raise SchemaError(f"{where}: tensor {name!r} missing {key!r}")
    shape = obj["shape"]
    if not isinstance(shape, list) or not all(
        isinstance(s, int) and not isinstance(s, bool) and s >= 1 for s in shape
    ):
        raise SchemaError(f"{where}: tensor {name!r} shape must be a list of positive integers")
    try:
        dtype = parse_dtype(obj["dtype"])
    except ValueError as e:
        raise SchemaError(f"{where}: tensor {name!r}: {e}") from e
    data = obj.get("data") if allow_data else None
    arr = None
    if data is not None:
        if not isinstance(data, list):
            raise SchemaError(f"{where}: tensor {name!r} data must be a list")
        if dtype.is_float:
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in data):
                raise SchemaError(f"{where}: tensor {name!r} has non-numeric float payload")
            arr = np.asarray([float(v) for v in data], dtype=np.float64)
        else:
            # integer dtypes demand literal integers in the document
            if not all(isinstance(v, int) and not isinstance(v, bool) for v in data):
                raise SchemaError(
                    f"{where}: tensor {name!r}: integer dtype {dtype} requires literal integers"
                )
            try:
                arr = np.asarray(data, dtype=np.int64)
            except OverflowError as e:
                raise SchemaError(f"{where}: tensor {name!r}: payload exceeds 64 bits") from e
    return Tensor(name=name, shape=tuple(shape), dtype=dtype, data=arr)


def tensor_to_wire(t: Tensor, with_data=True) -> dict:
    obj = {"shape": list(t.shape), "dtype": t.dtype.encode()}
    if with_data and t.data is not None:
        if t.dtype.is_float:
            obj["data"] = [float(v) for v in t.data]
        else:
            obj["data"] = [int(v) for v in t.data]
    return obj


def parse_model(text: str) -> Model:
    """Parse and fully validate a serialized model document.

    Raises SchemaError for malformed documents and ValidationError (with
    diagnostics naming the offender) for structural violations.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise SchemaError("top level must be an object")
    for key in ("name", "flow", "inputs", "outputs", "initializers", "nodes"):
        if key not in doc:
            raise SchemaError(f"missing top-level key {key!r}")
    if not isinstance(doc["inputs"], list):
        raise SchemaError("'inputs' must be a list")
    if not isinstance(doc["outputs"], list) or not all(
        isinstance(t, str) for t in doc["outputs"]
    ):
        raise SchemaError("'outputs' must be a list of tensor names")
    if not isinstance(doc["initializers"], dict):
        raise SchemaError("'initializers' must be an object")
    if not isinstance(doc["nodes"], list):
        raise SchemaError("'nodes' must be a list")

    inputs = []
    for i, obj in enumerate(doc["inputs"]):
        if not isinstance(obj, dict) or "name" not in obj:
            raise SchemaError(f"inputs[{i}]: missing name")
        inputs.append(_tensor_from_wire(obj["name"], obj, f"inputs[{i}]", allow_data=False))

    initializers = {}
    for name, obj in doc["initializers"].items():
        t = _tensor_from_wire(name, obj, "initializers")
        if t.data is None:
            raise SchemaError(f"initializers: tensor {name!r} has no data")
        initializers[name] = t

    nodes = []
    for i, obj in enumerate(doc["nodes"]):
        where = f"nodes[{i}]"
        if not isinstance(obj, dict):
            raise SchemaError(f"{where}: node must be an object")
        for key in ("op", "name", "inputs", "outputs"):
            if key not in obj:
                raise SchemaError(f"{where}: missing {key!r}")
        op, name = obj["op"], obj["name"]
        if not isinstance(op, str) or not isinstance(name, str):
            raise SchemaError(f"{where}: op and name must be strings")
        if not isinstance(obj["inputs"], list) or not isinstance(obj["outputs"], list):
            raise SchemaError(f"{where}: inputs/outputs must be lists")
        raw_attrs = obj.get("attrs", {})
        if not isinstance(raw_attrs, dict):
            raise SchemaError(f"{where}: attrs must be an object")
        attrs = {k: _attr_from_wire(op, k, v, where) for k, v in raw_attrs.items()}
        nodes.append(Node(op=op, name=name, inputs=obj["inputs"], outputs=obj["outputs"], attrs=attrs))

    model = Model(
        name=str(doc["name"]),
        flow=str(doc["flow"]),
        inputs=inputs,
        outputs=list(doc["outputs"]),
        initializers=initializers,
        nodes=nodes,
        notes=str(doc.get("notes", "")),
    )
    diags = validate(model)
    if diags:
        raise ValidationError(diags)
    return model


def serialize_model(model: Model) -> str:
    """Canonical JSON text; parse(serialize(m)) structurally equals m."""
    doc = {
        "name": model.name,
        "flow": model.flow,
        "inputs": [
            {"name": t.name, "shape": list(t.shape), "dtype": t.dtype.encode()}
            for t in model.inputs
        ],
        "outputs": list(model.outputs),
        "initializers": {
            name: tensor_to_wire(t) for name, t in model.initializers.items()
        },
        "nodes": [
            {
                "op": n.op,
                "name": n.name,
                "inputs": list(n.inputs),
                "outputs": list(n.outputs),
                "attrs": {k: _attr_to_wire(n.op, k, v) for k, v in n.attrs.items()},
            }
            for n in model.nodes
        ],
    }
    if model.notes:
        doc["notes"] = model.notes
    return json.dumps(doc, indent=1, allow_nan=False) + "\n"
