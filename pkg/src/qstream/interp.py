"""Reference interpreter with float and exact integer/fixed-point backends.

The float backend computes everything in IEEE float64. The exact backend
keeps integer edges as arbitrary-precision integers (int64 fast path with a
verified headroom check, Python-int fallback) and fixed-point edges as
integer mantissas with a shared power-of-two exponent, so integer and
fixed-point graphs evaluate without rounding error. FLOAT32 edges are only
legal in exact mode when feeding a Quant node, which rounds them back into
an integer domain; those bridge segments use float64 deterministically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .datatypes import DataType
from .errors import DtypeError, EmptyInput, ExecOverflowError
from .ir import Model, Node, Tensor, infer_dtypes, infer_shapes

_INT64_SAFE = float(2**60)


@dataclass
class Val:
    """Runtime tensor value: integer, fixed-point mantissa, or float.

    kind "int":    arr holds integers, exp == 0
    kind "dyadic": value is arr * 2**exp
    kind "float":  arr is float64
    """

    kind: str
    arr: np.ndarray
    exp: int = 0

    @property
    def shape(self):
        return self.arr.shape

    def to_float(self) -> np.ndarray:
        if self.kind == "float":
            return self.arr
        return self.arr.astype(np.float64) * (2.0**self.exp)

    def max_abs(self) -> float:
        if self.arr.size == 0:
            return 0.0
        return float(np.max(np.abs(self.arr.astype(np.float64))))


def _as_object(arr):
    if arr.dtype == object:
        return arr
    return np.array([int(v) for v in arr.reshape(-1)], dtype=object).reshape(arr.shape)


def _shift_mant(arr, k):
    """Multiply integer array by 2**k (k >= 0), widening if needed."""
    if k == 0:
        return arr
    if arr.dtype != object and float(np.max(np.abs(arr), initial=0)) * (2.0**k) < _INT64_SAFE:
        return arr * (1 << k)
    return _as_object(arr) * (1 << k)


def _align(a: Val, b: Val):
    """Bring two int/dyadic values to a common exponent."""
    exp = min(a.exp, b.exp)
    return _shift_mant(a.arr, a.exp - exp), _shift_mant(b.arr, b.exp - exp), exp


def val_from_tensor(t: Tensor, mode: str) -> Val:
    data = t.values()
    if mode == "float" or t.dtype.is_float:
        if t.dtype.is_float:
            return Val("float", data.astype(np.float64))
        return Val("float", data.astype(np.float64) * (2.0**t.dtype.scale_exponent))
    if t.dtype.kind == "FIXED":
        return Val("dyadic", data.copy(), t.dtype.scale_exponent)
    return Val("int", data.copy())


def tensor_from_val(name: str, v: Val, dtype: DataType) -> Tensor:
    if v.kind == "float":
        return Tensor(name, v.shape, dtype, v.arr.reshape(-1))
    if dtype.kind == "FIXED":
        mant = _shift_mant(v.arr, v.exp - dtype.scale_exponent)
        return Tensor(name, v.shape, dtype, mant.reshape(-1))
    return Tensor(name, v.shape, dtype, v.arr.reshape(-1))


# ---------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------


def _int_matmul(w: np.ndarray, x: np.ndarray, bound: float):
    """Exact integer product; falls back to Python ints past the safe bound."""
    if bound < _INT64_SAFE and w.dtype != object and x.dtype != object:
        return w.astype(np.int64) @ x.astype(np.int64)
    return np.dot(_as_object(w), _as_object(x))


def _im2col(x: np.ndarray, kernel: int, stride: int, pad: int):
    c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
        h, w = h + 2 * pad, w + 2 * pad
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    cols = np.empty((c, kernel, kernel, oh, ow), dtype=x.dtype)
    for ki in range(kernel):
        for kj in range(kernel):
            cols[:, ki, kj] = x[:, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
    return cols.reshape(c * kernel * kernel, oh * ow), oh, ow


def _linear_bound(w_abs_rowsum_max: float, x_max_abs: float, bias_max: float) -> float:
    return w_abs_rowsum_max * max(x_max_abs, 1.0) + bias_max


def _eval_linear(node: Node, x: Val, w: Val, bias: Val | None, mode: str, check: bool):
    if mode == "float" or x.kind == "float" or w.kind == "float":
        xf, wf = x.to_float(), w.to_float()
        if node.op == "Conv2D":
            cols, oh, ow = _im2col(xf, node.attr("kernel"), node.attr("stride"), node.attr("pad"))
            wmat = wf.reshape(wf.shape[0], -1)
            acc = (wmat @ cols).reshape(wf.shape[0], oh, ow)
        else:
            acc = wf @ xf
        if bias is not None:
            bf = bias.to_float()
            acc = acc + (bf[:, None, None] if acc.ndim == 3 else bf)
        out = Val("float", acc)
    else:
        exp = x.exp + w.exp
        wsum = float(np.max(np.sum(np.abs(w.arr.astype(np.float64)), axis=tuple(range(1, w.arr.ndim))), initial=0.0))
        bias_max = 0.0
        if bias is not None:
            bias_max = bias.max_abs() * (2.0 ** (bias.exp - exp))
        bound = _linear_bound(wsum, x.max_abs(), bias_max) * 2
        if node.op == "Conv2D":
            xa = x.arr if bound < _INT64_SAFE and x.arr.dtype != object else _as_object(x.arr)
            cols, oh, ow = _im2col(xa, node.attr("kernel"), node.attr("stride"), node.attr("pad"))
            wmat = w.arr.reshape(w.arr.shape[0], -1)
            acc = _int_matmul(wmat, cols, bound).reshape(w.arr.shape[0], oh, ow)
        else:
            acc = _int_matmul(w.arr, x.arr, bound)
        if bias is not None:
            shift = bias.exp - exp
            if shift < 0:
                raise DtypeError(f"{node.name}: bias finer than accumulator lattice")
            badd = _shift_mant(bias.arr, shift)
            acc = acc + (badd[:, None, None] if acc.ndim == 3 else badd)
        out = Val("int" if exp == 0 else "dyadic", acc, exp)
        if check:
            _check_accum(node, out)
    if node.attr("fused_relu"):
        out = _relu(out)
    return out


def _check_accum(node: Node, acc: Val):
    dt = node.attr("accum_dtype")
    if dt is None or acc.arr.size == 0:
        return
    lo = Fraction(int(acc.arr.min())) * Fraction(2) ** acc.exp
    hi = Fraction(int(acc.arr.max())) * Fraction(2) ** acc.exp
    if lo < dt.min() or hi > dt.max():
        raise ExecOverflowError(
            f"{node.name}: accumulator range [{float(lo)}, {float(hi)}] exceeds {dt}"
        )


def _relu(v: Val) -> Val:
    if v.kind == "float":
        return Val("float", np.maximum(v.arr, 0.0))
    zero = 0 if v.arr.dtype == object else np.int64(0)
    return Val(v.kind, np.maximum(v.arr, zero), v.exp)


def _pool(node: Node, x: Val, average: bool) -> Val:
    k = node.attr("kernel")
    s = node.attr("stride")
    arr = x.arr
    c, h, w = arr.shape
    oh, ow = (h - k) // s + 1, (w - k) // s + 1
    if average:
        xf = x.to_float()
        out = np.zeros((c, oh, ow))
        for ki in range(k):
            for kj in range(k):
                out += xf[:, ki : ki + s * oh : s, kj : kj + s * ow : s]
        return Val("float", out / (k * k))
    out = None
    for ki in range(k):
        for kj in range(k):
            win = arr[:, ki : ki + s * oh : s, kj : kj + s * ow : s]
            out = win if out is None else np.maximum(out, win)
    return Val(x.kind, out, x.exp)


def _round_div(num, den, rounding):
    """Elementwise floor(num/den) or round-half-up(num/den) with den > 0."""
    if rounding == "ROUND_HALF_UP":
        return np.floor_divide(2 * num + den, 2 * den)
    return np.floor_divide(num, den)


def _eval_quant(node: Node, x: Val) -> Val:
    scale: Fraction = node.attr("scale")
    zp: int = node.attr("zero_point")
    dtype: DataType = node.attr("dtype")
    rounding = node.attr("rounding")
    if x.kind == "float":
        t = x.arr / float(scale) + zp
        if dtype.kind == "BIPOLAR":
            q = np.where(t >= 0.0, 1, -1).astype(np.int64)
            return Val("int", q)
        r = np.floor(t + 0.5) if rounding == "ROUND_HALF_UP" else np.floor(t)
        q = np.clip(r, float(dtype.mantissa_min()), float(dtype.mantissa_max()))
        return Val("int", q.astype(np.int64))
    # exact path: t = (mant * 2**exp) / scale + zp as one integer fraction
    sn, sd = scale.numerator, scale.denominator
    f = max(0, -x.exp)
    up = max(0, x.exp)
    num_bound = x.max_abs() * sd * (2.0**up) + abs(zp) * sn * (2.0**f)
    arr = x.arr
    if num_bound * 4 >= _INT64_SAFE or arr.dtype == object:
        arr = _as_object(arr)
        num = arr * (sd << up) + zp * (sn << f)
        den = sn << f
    else:
        num = arr.astype(np.int64) * (sd << up) + np.int64(zp * (sn << f))
        den = np.int64(sn << f)
    if dtype.kind == "BIPOLAR":
        q = np.where(num >= 0, 1, -1)
        return Val("int", q.astype(np.int64) if q.dtype != object else q)
    q = _round_div(num, den, rounding)
    lo, hi = dtype.mantissa_min(), dtype.mantissa_max()
    q = np.minimum(np.maximum(q, lo), hi)
    if q.dtype != object:
        q = q.astype(np.int64)
    return Val("int", q)


def _eval_multithreshold(node: Node, x: Val, thr: Val, check: bool) -> Val:
    out_scale: Fraction = node.attr("out_scale")
    out_bias: Fraction = node.attr("out_bias")
    out_dtype: DataType = node.attr("out_dtype")
    c = x.arr.shape[0]
    flat = x.arr.reshape(c, -1)
    if x.kind == "float" or thr.kind == "float":
        xf = flat.astype(np.float64) * (2.0**x.exp) if x.kind != "float" else flat
        tf = thr.to_float()
        counts = (xf[:, None, :] >= tf[:, :, None]).sum(axis=1)
        out = float(out_scale) * counts + float(out_bias)
        if out_dtype.is_integer:
            out = np.rint(out)
        return Val("float", out.reshape(x.arr.shape))
    xm, tm, _ = _align(x, thr)
    xm = xm.reshape(c, -1)
    counts = (xm[:, None, :] >= tm[:, :, None]).sum(axis=1)
    n_thr = tm.shape[1]
    lut_vals = [out_scale * k + out_bias for k in range(n_thr + 1)]
    if all(v.denominator == 1 for v in lut_vals):
        lut = np.array([int(v) for v in lut_vals], dtype=np.int64)
        out = lut[counts].reshape(x.arr.shape)
        res = Val("int", out)
    else:
        exps = {v.denominator for v in lut_vals}
        lcm = 1
        for e in exps:
            lcm = lcm * e // math.gcd(lcm, e)
        if lcm & (lcm - 1):
            raise DtypeError(f"{node.name}: non-dyadic multi-threshold output scale")
        shift = lcm.bit_length() - 1
        lut = np.array([int(v * lcm) for v in lut_vals], dtype=np.int64)
        res = Val("dyadic", lut[counts].reshape(x.arr.shape), -shift)
    if check and res.arr.size:
        lo = Fraction(int(res.arr.min())) * Fraction(2) ** res.exp
        hi = Fraction(int(res.arr.max())) * Fraction(2) ** res.exp
        if lo < out_dtype.min() or hi > out_dtype.max():
            raise ExecOverflowError(f"{node.name}: output leaves {out_dtype} domain")
    return res


def _eval_batchnorm(node: Node, x: Val, gamma, beta, mean, var) -> Val:
    eps = node.attr("epsilon")
    g, b, mu, v = (p.to_float() for p in (gamma, beta, mean, var))
    scale = g / np.sqrt(v + eps)
    xf = x.to_float()
    reshape = (-1,) + (1,) * (xf.ndim - 1)
    return Val("float", (xf - mu.reshape(reshape)) * scale.reshape(reshape) + b.reshape(reshape))


def argmax(vec) -> int:
    """Index of the maximum; ties break toward the lowest index."""
    arr = np.asarray(vec)
    if arr.size == 0:
        raise EmptyInput("argmax of empty vector")
    return int(np.argmax(arr))


def softmax(vec: np.ndarray) -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float64)
    e = np.exp(arr - arr.max())
    return e / e.sum()


@dataclass
class MultiThresholdParams:
    """Sorted per-channel cut points plus the output affine map.

    Encodes any uniform quantized activation: output is
    out_scale * (number of thresholds <= input) + out_bias.
    """

    thresholds: np.ndarray  # [channels, n_thresholds], non-decreasing rows
    out_scale: Fraction
    out_bias: Fraction
    out_dtype: DataType

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds)
        if self.thresholds.ndim != 2:
            raise ValueError("thresholds must be [channels, n]")
        if self.thresholds.shape[1] > 1 and np.any(np.diff(self.thresholds, axis=1) < 0):
            raise ValueError("threshold rows must be non-decreasing")
        levels = self.thresholds.shape[1] + 1
        if self.out_dtype.kind == "INT" and levels > 2**self.out_dtype.bits:
            raise ValueError(f"{levels} levels exceed {self.out_dtype}")


def eval_node(node: Node, ins: list, mode: str, check: bool = True) -> Val:
    """Evaluate one node on already-materialized input values."""
    op = node.op
    if op in ("Conv2D", "Dense"):
        bias = ins[2] if len(ins) == 3 else None
        return _eval_linear(node, ins[0], ins[1], bias, mode, check)
    if op == "BatchNorm":
        return _eval_batchnorm(node, *ins)
    if op == "ReLU":
        return _relu(ins[0])
    if op == "MaxPool2D":
        return _pool(node, ins[0], average=False)
    if op == "AvgPool2D":
        return _pool(node, ins[0], average=True)
    if op == "Add":
        a, b = ins
        if a.kind == "float" or b.kind == "float":
            return Val("float", a.to_float() + b.to_float())
        am, bm, exp = _align(a, b)
        s = am + bm
        return Val("int" if exp == 0 else "dyadic", s, exp)
    if op == "Quant":
        return _eval_quant(node, ins[0])
    if op == "MultiThreshold":
        return _eval_multithreshold(node, ins[0], ins[1], check)
    if op == "Softmax":
        return Val("float", softmax(ins[0].to_float()))
    if op == "ArgMax":
        return Val("int", np.array([argmax(ins[0].to_float() if ins[0].kind == "float" else ins[0].arr)], dtype=np.int64))
    if op == "Flatten":
        return Val(ins[0].kind, ins[0].arr.reshape(-1), ins[0].exp)
    raise DtypeError(f"no interpreter for op {op}")


# ---------------------------------------------------------------------
# whole-model execution
# ---------------------------------------------------------------------


def _check_exact_preconditions(model: Model, dtypes):
    # the float-edge rule covers computed tensors and model inputs; constant
    # initializers (BN parameters) are node parameters, not streamed edges
    consumers = model.consumer_map()
    float_edges = [
        name
        for name, dt in dtypes.items()
        if dt.is_float and name not in model.initializers
    ]
    out_set = set(model.outputs)
    for name in float_edges:
        for consumer in consumers.get(name, []):
            if consumer.op != "Quant":
                raise DtypeError(
                    f"exact_int: FLOAT32 edge {name!r} feeds {consumer.op} node "
                    f"{consumer.name!r}; only Quant may consume float edges"
                )
        if name in out_set:
            raise DtypeError(f"exact_int: model output {name!r} is FLOAT32")


def _input_val(t: Tensor, arr, mode: str) -> Val:
    data = np.asarray(arr)
    if tuple(data.shape) != t.shape:
        raise DtypeError(f"input {t.name!r}: shape {data.shape} != declared {t.shape}")
    if mode == "float":
        return Val("float", data.astype(np.float64))
    if t.dtype.is_float:
        return Val("float", data.astype(np.float64))
    exp = t.dtype.scale_exponent
    mant = data.astype(np.float64) * (2.0**-exp)
    rounded = np.rint(mant)
    if not np.all(mant == rounded):
        raise DtypeError(f"input {t.name!r}: values off the {t.dtype} lattice")
    mant = rounded.astype(np.int64)
    if mant.size and not (
        mant.min() >= t.dtype.mantissa_min() and mant.max() <= t.dtype.mantissa_max()
    ):
        raise DtypeError(f"input {t.name!r}: values outside {t.dtype} domain")
    if t.dtype.kind == "BIPOLAR" and mant.size and not np.all(np.abs(mant) == 1):
        raise DtypeError(f"input {t.name!r}: bipolar values must be ±1")
    if t.dtype.kind == "FIXED":
        return Val("dyadic", mant, exp)
    return Val("int", mant)


def run(model: Model, inputs: dict, mode: str = "float", check: bool = True) -> dict:
    """Execute the model; returns declared outputs keyed by tensor name.

    mode "float": float64 throughout. mode "exact_int": exact arithmetic on
    integer/fixed edges; requires every FLOAT32 edge to feed a Quant node.
    Integer outputs come back as int64 arrays, everything else as float64.
    """
    if mode not in ("float", "exact_int"):
        raise ValueError(f"unknown mode {mode!r}")
    declared = {t.name for t in model.inputs}
    given = set(inputs)
    if declared != given:
        raise DtypeError(f"inputs {sorted(given)} do not match declared {sorted(declared)}")
    shapes, _ = infer_shapes(model)
    dtypes = infer_dtypes(model, shapes)
    if mode == "exact_int":
        _check_exact_preconditions(model, dtypes)

    vals = {}
    for t in model.inputs:
        vals[t.name] = _input_val(t, inputs[t.name], mode)
    for name, t in model.initializers.items():
        vals[name] = val_from_tensor(t, mode)

    for node in model.topological_nodes():
        ins = [vals[i] for i in node.inputs]
        vals[node.outputs[0]] = eval_node(node, ins, mode, check)

    out = {}
    for name in model.outputs:
        v = vals[name]
        if v.kind == "int":
            out[name] = v.arr if v.arr.dtype == object else v.arr.astype(np.int64)
        else:
            out[name] = v.to_float()
    return out
