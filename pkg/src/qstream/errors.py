"""Exception types shared across the toolkit."""


class QStreamError(Exception):
    """Base class for all toolkit errors."""


class SchemaError(QStreamError):
    """Model document is malformed (bad JSON, missing keys, wrong types)."""


class ValidationError(QStreamError):
    """Model violates a structural invariant; carries the diagnostics."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        lines = "; ".join(str(d) for d in self.diagnostics)
        super().__init__(f"model validation failed: {lines}")


class DtypeError(QStreamError):
    """Value fed to the interpreter does not match the declared datatype."""


class ExecOverflowError(QStreamError, OverflowError):
    """Accumulator value left the range of its declared datatype."""


class EmptyInput(QStreamError, ValueError):
    """Operation received an empty vector."""


class PatternNotFound(QStreamError):
    """Graph rewrite found no occurrence of its target pattern."""


class NotStreamlinable(QStreamError):
    """Graph cannot be lowered to integer-only form; names the blocker."""


class UnsupportedScale(QStreamError, ValueError):
    """Width scaling would produce a zero-width layer."""


class MissingAnnotation(QStreamError):
    """Cost metric requested on a layer without a quantization annotation."""


class DomainError(QStreamError, ValueError):
    """Numeric argument outside the documented domain."""


class UnmappableOp(QStreamError):
    """Node has no streaming-dataflow semantics."""


class PlanIncomplete(QStreamError):
    """FIFO plan is missing a depth for some pipeline edge."""


class SizingUnstable(QStreamError):
    """Re-simulation under the sized plan changed the cycle count."""


class DeadlockedResult(QStreamError):
    """Latency was requested for a simulation that deadlocked."""


class PassPipelineError(QStreamError):
    """A pass inside run_pipeline failed; records which one."""

    def __init__(self, index, pass_name, cause):
        self.index = index
        self.pass_name = pass_name
        self.cause = cause
        super().__init__(f"pass '{pass_name}' failed at index {index}: {cause}")
