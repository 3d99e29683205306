"""Tensor value domains: float, arbitrary-width integers, bipolar, fixed-point.

All bounds are exact rationals so that range analysis and threshold math can
be done without floating-point error. FIXED payloads are stored as integer
mantissas; the represented value is ``mantissa * 2**(int_bits - bits)``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction

from .errors import DomainError

# Largest finite float32 is (2 - 2**-23) * 2**127, exact as an integer.
_FLOAT32_MAX = Fraction(2**128 - 2**104)

# Widths above this are never declarable in a model document, but inferred
# accumulator types may use them internally (see ir.validate).
DECLARED_MAX_BITS = 32
INTERNAL_MAX_BITS = 512


@dataclass(frozen=True)
class DataType:
    """Value domain of a tensor edge or constant.

    kind      one of "FLOAT32", "INT", "BIPOLAR", "FIXED"
    bits      total bit width (INT and FIXED)
    int_bits  integer-part bits (FIXED only)
    signed    sign flag (INT only; FIXED is always signed)
    """

    kind: str
    bits: int = 0
    int_bits: int = 0
    signed: bool = True

    def __post_init__(self):
        if self.kind not in ("FLOAT32", "INT", "BIPOLAR", "FIXED"):
            raise ValueError(f"unknown datatype kind {self.kind!r}")
        if self.kind in ("INT", "FIXED"):
            if not 1 <= self.bits <= INTERNAL_MAX_BITS:
                raise ValueError(f"bit width {self.bits} out of range")
        if self.kind == "FIXED":
            if not 0 <= self.int_bits <= self.bits:
                raise ValueError(
                    f"FIXED int_bits {self.int_bits} outside 0..{self.bits}"
                )
            if not self.signed:
                raise ValueError("FIXED is always signed")

    # ---- domain ------------------------------------------------------

    @property
    def is_integer(self) -> bool:
        """True when every representable value is an integer."""
        return self.kind in ("INT", "BIPOLAR")

    @property
    def is_float(self) -> bool:
        return self.kind == "FLOAT32"

    @property
    def scale_exponent(self) -> int:
        """Power-of-two exponent mapping mantissas to values (FIXED only)."""
        if self.kind != "FIXED":
            return 0
        return self.int_bits - self.bits

    def min(self) -> Fraction:
        """Smallest representable value, exact."""
        if self.kind == "FLOAT32":
            return -_FLOAT32_MAX
        if self.kind == "BIPOLAR":
            return Fraction(-1)
        if self.kind == "INT":
            return Fraction(-(2 ** (self.bits - 1))) if self.signed else Fraction(0)
        return Fraction(-(2 ** (self.bits - 1))) * Fraction(2) ** self.scale_exponent

    def max(self) -> Fraction:
        """Largest representable value, exact."""
        if self.kind == "FLOAT32":
            return _FLOAT32_MAX
        if self.kind == "BIPOLAR":
            return Fraction(1)
        if self.kind == "INT":
            hi = 2 ** (self.bits - 1) - 1 if self.signed else 2**self.bits - 1
            return Fraction(hi)
        hi = 2 ** (self.bits - 1) - 1
        return Fraction(hi) * Fraction(2) ** self.scale_exponent

    def mantissa_min(self) -> int:
        """Lower bound of the stored integer payload."""
        if self.kind == "BIPOLAR":
            return -1
        if self.kind == "INT":
            return -(2 ** (self.bits - 1)) if self.signed else 0
        if self.kind == "FIXED":
            return -(2 ** (self.bits - 1))
        raise DomainError(f"{self.kind} has no integer payload")

    def mantissa_max(self) -> int:
        if self.kind == "BIPOLAR":
            return 1
        if self.kind == "INT":
            return 2 ** (self.bits - 1) - 1 if self.signed else 2**self.bits - 1
        if self.kind == "FIXED":
            return 2 ** (self.bits - 1) - 1
        raise DomainError(f"{self.kind} has no integer payload")

    def allows(self, value) -> bool:
        """Membership test for a single value (int, float, or Fraction)."""
        if self.kind == "FLOAT32":
            return math.isfinite(float(value))
        if self.kind == "BIPOLAR":
            return value in (-1, 1)
        v = Fraction(value)
        if self.kind == "INT":
            return v.denominator == 1 and self.min() <= v <= self.max()
        # FIXED: value must sit on the mantissa lattice
        mant = v / (Fraction(2) ** self.scale_exponent)
        return mant.denominator == 1 and self.mantissa_min() <= mant <= self.mantissa_max()

    # ---- text encoding ----------------------------------------------

    def encode(self) -> str:
        if self.kind == "FLOAT32":
            return "FLOAT32"
        if self.kind == "BIPOLAR":
            return "BIPOLAR"
        if self.kind == "INT":
            return f"{'INT' if self.signed else 'UINT'}{self.bits}"
        return f"FIXED<{self.bits},{self.int_bits}>"

    def __str__(self):
        return self.encode()


FLOAT32 = DataType("FLOAT32")
BIPOLAR = DataType("BIPOLAR")


def INT(bits: int) -> DataType:
    return DataType("INT", bits=bits, signed=True)


def UINT(bits: int) -> DataType:
    return DataType("INT", bits=bits, signed=False)


def FIXED(bits: int, int_bits: int) -> DataType:
    return DataType("FIXED", bits=bits, int_bits=int_bits)


_DTYPE_RE = re.compile(r"^(INT|UINT)([0-9]+)$|^FIXED<([0-9]+),([0-9]+)>$")


def parse_dtype(text: str) -> DataType:
    """Parse the wire encoding: FLOAT32, INT<b>, UINT<b>, BIPOLAR, FIXED<t,i>."""
    if not isinstance(text, str):
        raise ValueError(f"dtype must be a string, got {type(text).__name__}")
    if text == "FLOAT32":
        return FLOAT32
    if text == "BIPOLAR":
        return BIPOLAR
    m = _DTYPE_RE.match(text)
    if m is None:
        raise ValueError(f"unparseable dtype {text!r}")
    if m.group(1) is not None:
        return DataType("INT", bits=int(m.group(2)), signed=m.group(1) == "INT")
    return DataType("FIXED", bits=int(m.group(3)), int_bits=int(m.group(4)))


def signed_bits_for_range(lo: int, hi: int) -> int:
    """Narrowest signed two's-complement width covering [lo, hi]."""
    bits = 1
    while not (-(2 ** (bits - 1)) <= lo and hi <= 2 ** (bits - 1) - 1):
        bits += 1
    return bits


# ---- exact rational helpers -----------------------------------------


def parse_rational(value) -> Fraction:
    """Accept ints, floats, and 'p/q' or decimal strings; always exact.

    Floats are converted via their exact binary value, so a JSON number
    round-trips without drift.
    """
    if isinstance(value, bool):
        raise ValueError("booleans are not rationals")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"non-finite rational {value!r}")
        return Fraction(value)
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        return Fraction(value)
    raise ValueError(f"unparseable rational {value!r}")


def format_rational(value: Fraction) -> str:
    """Canonical wire form: 'n' for integers, 'p/q' otherwise."""
    f = Fraction(value)
    return str(f.numerator) if f.denominator == 1 else f"{f.numerator}/{f.denominator}"


def rational_sqrt(x: Fraction, precision_bits: int = 128) -> Fraction:
    """Deterministic rational square root.

    Exact when x is a perfect square of a rational; otherwise a lower bound
    within 2**-precision_bits relative error. Integer-only arithmetic, so the
    result is identical on every platform.
    """
    if x < 0:
        raise DomainError("sqrt of negative value")
    if x == 0:
        return Fraction(0)
    num, den = x.numerator, x.denominator
    rn, rd = math.isqrt(num), math.isqrt(den)
    if rn * rn == num and rd * rd == den:
        return Fraction(rn, rd)
    shift = 1 << precision_bits
    return Fraction(math.isqrt(num * den * shift * shift), den * shift)
