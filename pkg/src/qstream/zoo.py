"""Builders for the four benchmark model topologies used as test fixtures.

Weights are deterministic pseudo-random draws from each layer's datatype
domain (trained weights are not part of this artifact; every test is
structural or equivalence-based). Golden facts pinned by the builders:

  cnv-w1a1  binary VGG-style CNN, 1,542,848 parameters
  kws-mlp   3-bit MLP 490-256-256-256-12, 259,584 parameters
  ad-ae     fixed-point autoencoder, 72-unit hidden layers (count unpinned)
  ic-cnn    fixed-point 5-conv CNN + dense head (count unpinned)

The kws-mlp hidden width is reconstructed: with three hidden layers, no
biases, and a 12-class head, 490*h + 2*h*h + 12*h = 259,584 has the unique
positive integer solution h = 256. The published description of the
autoencoder does not pin a parameter count reproducibly, so ad-ae exposes
depth/width knobs instead of asserting one.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .datatypes import BIPOLAR, FIXED, FLOAT32, INT, UINT, DataType, signed_bits_for_range
from .errors import UnsupportedScale
from .ir import Model, Node, Tensor

CNV_W1A1 = "cnv-w1a1"
KWS_MLP = "kws-mlp"
AD_AE = "ad-ae"
IC_CNN = "ic-cnn"

ZOO_IDS = (CNV_W1A1, KWS_MLP, AD_AE, IC_CNN)

_SEEDS = {CNV_W1A1: 20101, KWS_MLP: 20102, AD_AE: 20103, IC_CNN: 20104}


@dataclass(frozen=True)
class ZooSpec:
    id: str
    width_scale: Fraction = Fraction(1)

    def __post_init__(self):
        if self.id not in ZOO_IDS:
            raise KeyError(f"unknown zoo id {self.id!r}; known: {', '.join(ZOO_IDS)}")
        if Fraction(self.width_scale) <= 0:
            raise UnsupportedScale(f"width_scale {self.width_scale} must be positive")


def _scaled(width: int, scale: Fraction) -> int:
    w = int(Fraction(width) * Fraction(scale))
    if w < 1:
        raise UnsupportedScale(f"width {width} * scale {scale} collapses to zero")
    return w


class _GraphBuilder:
    """Accumulates tensors/nodes with unique names."""

    def __init__(self, name, flow, rng):
        self.name = name
        self.flow = flow
        self.rng = rng
        self.inputs = []
        self.outputs = []
        self.initializers = {}
        self.nodes = []

    def add_input(self, name, shape, dtype):
        self.inputs.append(Tensor(name, shape, dtype))
        return name

    def add_init(self, name, shape, dtype, data):
        self.initializers[name] = Tensor(name, shape, dtype, np.asarray(data).reshape(-1))
        return name

    def add_node(self, op, name, inputs, attrs=None):
        out = f"{name}_out"
        self.nodes.append(Node(op, name, list(inputs), [out], attrs or {}))
        return out

    def random_int_weights(self, name, shape, dtype: DataType):
        lo, hi = dtype.mantissa_min(), dtype.mantissa_max()
        data = self.rng.integers(lo, hi + 1, size=int(np.prod(shape)), dtype=np.int64)
        if dtype.kind == "BIPOLAR":
            data = np.where(data >= 1, 1, -1)
        return self.add_init(name, shape, dtype, data)

    def batchnorm(self, name, x, channels):
        """BN with float parameters; a few channels get a negative scale."""
        g = self.rng.uniform(0.5, 2.0, channels)
        neg = self.rng.random(channels) < 0.125
        g = np.where(neg, -g, g)
        beta = self.rng.uniform(-1.0, 1.0, channels)
        mu = self.rng.uniform(-2.0, 2.0, channels)
        var = self.rng.uniform(0.25, 4.0, channels)
        gn = self.add_init(f"{name}_gamma", (channels,), FLOAT32, g)
        bn = self.add_init(f"{name}_beta", (channels,), FLOAT32, beta)
        mn = self.add_init(f"{name}_mean", (channels,), FLOAT32, mu)
        vn = self.add_init(f"{name}_var", (channels,), FLOAT32, var)
        return self.add_node("BatchNorm", name, [x, gn, bn, mn, vn], {"epsilon": 1e-5})

    def finish(self, output) -> Model:
        self.outputs = [output]
        return Model(
            name=self.name,
            flow=self.flow,
            inputs=self.inputs,
            outputs=self.outputs,
            initializers=self.initializers,
            nodes=self.nodes,
        )


def _sign_quant():
    return {
        "scale": Fraction(1),
        "zero_point": 0,
        "dtype": BIPOLAR,
        "rounding": "ROUND_HALF_UP",
    }


def _build_cnv(scale: Fraction) -> Model:
    g = _GraphBuilder("cnv-w1a1", "finn", np.random.default_rng(_SEEDS[CNV_W1A1]))
    x = g.add_input("x", (3, 32, 32), UINT(8))
    chans = [_scaled(c, scale) for c in (64, 64, 128, 128, 256, 256)]
    pool_after = {1, 3}  # blocks end after the 2nd and 4th conv
    prev_c = 3
    for i, c in enumerate(chans):
        w = g.random_int_weights(f"conv{i}_w", (c, prev_c, 3, 3), BIPOLAR)
        x = g.add_node("Conv2D", f"conv{i}", [x, w], {"kernel": 3, "stride": 1})
        x = g.batchnorm(f"bn{i}", x, c)
        x = g.add_node("Quant", f"sign{i}", [x], _sign_quant())
        if i in pool_after:
            x = g.add_node("MaxPool2D", f"pool{i}", [x], {"kernel": 2, "stride": 2})
        prev_c = c
    x = g.add_node("Flatten", "flatten", [x])
    widths = [prev_c, _scaled(512, scale), _scaled(512, scale), 10]
    for i in range(3):
        w = g.random_int_weights(f"fc{i}_w", (widths[i + 1], widths[i]), BIPOLAR)
        x = g.add_node("Dense", f"fc{i}", [x, w])
        if i < 2:
            x = g.batchnorm(f"fc_bn{i}", x, widths[i + 1])
            x = g.add_node("Quant", f"fc_sign{i}", [x], _sign_quant())
    x = g.add_node("ArgMax", "top1", [x])
    return g.finish(x)


def _build_kws(scale: Fraction) -> Model:
    g = _GraphBuilder("kws-mlp", "finn", np.random.default_rng(_SEEDS[KWS_MLP]))
    x = g.add_input("x", (490,), INT(8))
    hidden = _scaled(256, scale)
    widths = [490, hidden, hidden, hidden, 12]
    act_scales = (4, 8, 16)
    for i in range(4):
        w = g.random_int_weights(f"fc{i}_w", (widths[i + 1], widths[i]), INT(3))
        x = g.add_node("Dense", f"fc{i}", [x, w])
        if i < 3:
            x = g.batchnorm(f"bn{i}", x, widths[i + 1])
            x = g.add_node("ReLU", f"relu{i}", [x])
            x = g.add_node(
                "Quant",
                f"quant{i}",
                [x],
                {
                    "scale": Fraction(act_scales[i]),
                    "zero_point": 0,
                    "dtype": UINT(3),
                    "rounding": "ROUND_HALF_UP",
                },
            )
    x = g.add_node("ArgMax", "top1", [x])
    return g.finish(x)


def ad_autoencoder(hidden_layers: int = 4, width: int = 72, input_size: int = 128) -> Model:
    """Fixed-point dense autoencoder; structure is the contract, not a count."""
    if hidden_layers < 1 or width < 1:
        raise UnsupportedScale("autoencoder needs at least one nonempty hidden layer")
    g = _GraphBuilder("ad-ae", "hls4ml", np.random.default_rng(_SEEDS[AD_AE]))
    wdt = FIXED(8, 2)
    x = g.add_input("x", (input_size,), wdt)
    x = g.add_node(
        "Quant",
        "in_quant",
        [x],
        {
            "scale": Fraction(1, 64),
            "zero_point": 0,
            "dtype": INT(8),
            "rounding": "ROUND_HALF_UP",
        },
    )
    widths = [input_size] + [width] * hidden_layers + [input_size]
    for i in range(len(widths) - 1):
        w = g.random_int_weights(f"fc{i}_w", (widths[i + 1], widths[i]), wdt)
        b = g.random_int_weights(f"fc{i}_b", (widths[i + 1],), wdt)
        x = g.add_node("Dense", f"fc{i}", [x, w, b])
        if i < len(widths) - 2:
            x = g.batchnorm(f"bn{i}", x, widths[i + 1])
            x = g.add_node("ReLU", f"relu{i}", [x])
            x = g.add_node(
                "Quant",
                f"quant{i}",
                [x],
                {
                    "scale": Fraction(1, 4),
                    "zero_point": 0,
                    "dtype": INT(8),
                    "rounding": "ROUND_HALF_UP",
                },
            )
    return g.finish(x)


def _requant_thresholds(channels: int, frac_exp: int):
    """Cut points of a round-half-up UINT8 requantizer with scale 2**frac_exp.

    Threshold q sits at (q - 1/2) * 2**frac_exp; stored as FIXED mantissas on
    the 2**(frac_exp-1) lattice, identical across channels.
    """
    mants = 2 * np.arange(1, 256, dtype=np.int64) - 1  # (2q-1)
    exp = frac_exp - 1
    bits = max(signed_bits_for_range(0, int(mants[-1])), -exp)
    dtype = FIXED(bits, bits + exp)
    data = np.tile(mants, channels)
    return (channels, 255), dtype, data


def _build_ic(scale: Fraction) -> Model:
    g = _GraphBuilder("ic-cnn", "hls4ml", np.random.default_rng(_SEEDS[IC_CNN]))
    x = g.add_input("x", (3, 32, 32), UINT(8))
    wdt = FIXED(8, 2)
    filters = [_scaled(f, scale) for f in (32, 4, 32, 32, 4)]
    kernels = (1, 4, 4, 4, 4)
    strides = (1, 1, 1, 4, 1)
    prev_c, size = 3, 32
    for i, (c, k, s) in enumerate(zip(filters, kernels, strides)):
        w = g.random_int_weights(f"conv{i}_w", (c, prev_c, k, k), wdt)
        b = g.random_int_weights(f"conv{i}_b", (c,), wdt)
        x = g.add_node("Conv2D", f"conv{i}", [x, w, b], {"kernel": k, "stride": s})
        x = g.add_node("ReLU", f"relu{i}", [x])
        shape, tdt, data = _requant_thresholds(c, -4)
        t = g.add_init(f"requant{i}_t", shape, tdt, data)
        x = g.add_node(
            "MultiThreshold",
            f"requant{i}",
            [x, t],
            {"out_scale": Fraction(1), "out_bias": Fraction(0), "out_dtype": UINT(8)},
        )
        prev_c, size = c, (size - k) // s + 1
    x = g.add_node("Flatten", "flatten", [x])
    flat = prev_c * size * size
    w = g.random_int_weights("fc_w", (10, flat), wdt)
    b = g.random_int_weights("fc_b", (10,), wdt)
    x = g.add_node("Dense", "fc", [x, w, b])
    x = g.add_node("Softmax", "softmax", [x])
    return g.finish(x)


def build(spec: ZooSpec) -> Model:
    """Construct the requested zoo model."""
    scale = Fraction(spec.width_scale)
    if spec.id == CNV_W1A1:
        return _build_cnv(scale)
    if spec.id == KWS_MLP:
        return _build_kws(scale)
    if spec.id == AD_AE:
        width = _scaled(72, scale)
        return ad_autoencoder(hidden_layers=4, width=width)
    return _build_ic(scale)
