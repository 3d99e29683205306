"""qstream: quantized-graph optimizer and streaming-dataflow simulator."""

from .datatypes import BIPOLAR, FIXED, FLOAT32, INT, UINT, DataType, parse_dtype
from .ir import Model, Node, Tensor, parse_model, serialize_model, validate

__version__ = "0.1.0"

__all__ = [
    "BIPOLAR",
    "FIXED",
    "FLOAT32",
    "INT",
    "UINT",
    "DataType",
    "Model",
    "Node",
    "Tensor",
    "parse_dtype",
    "parse_model",
    "serialize_model",
    "validate",
    "__version__",
]
