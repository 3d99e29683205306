"""Command-line front end: inspect / optimize / cost / simulate / verify / zoo.

Exit codes: 0 success, 2 parse or validation failure, 3 transform or
annotation failure, 4 deadlock, 5 verification mismatch, 64 usage error.
Machine-readable output goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from fractions import Fraction

import numpy as np

from . import cost as cost_mod
from . import dataflow, interp, passes, zoo
from .errors import (
    DeadlockedResult,
    MissingAnnotation,
    PassPipelineError,
    QStreamError,
    SchemaError,
    SizingUnstable,
    UnmappableOp,
    ValidationError,
)
from .ir import (
    Model,
    infer_dtypes,
    infer_shapes,
    parse_model,
    serialize_model,
    tensor_to_wire,
)

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_TRANSFORM = 3
EXIT_DEADLOCK = 4
EXIT_MISMATCH = 5
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_model(path: str) -> Model:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_model(fh.read())
    except OSError as e:
        print(f"cannot read {path}: {e}", file=sys.stderr)
        raise SystemExit(EXIT_PARSE)
    except (SchemaError, ValidationError) as e:
        print(f"{path}: {e}", file=sys.stderr)
        raise SystemExit(EXIT_PARSE)


def _emit(obj, as_json: bool, human_lines):
    if as_json:
        print(json.dumps(obj, indent=1, sort_keys=True))
    else:
        for line in human_lines:
            print(line)


# ---------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------


def cmd_inspect(args) -> int:
    m = _load_model(args.model)
    shapes, _ = infer_shapes(m)
    dtypes = infer_dtypes(m, shapes)
    rows = []
    for n in m.nodes:
        out = n.outputs[0]
        rows.append(
            {
                "name": n.name,
                "op": n.op,
                "output_shape": list(shapes.get(out, ())),
                "output_dtype": str(dtypes.get(out, "?")),
            }
        )
    report = {
        "name": m.name,
        "flow": m.flow,
        "nodes": rows,
        "params": m.count_params(),
        "bn_params": m.count_bn_params(),
        "inputs": [
            {"name": t.name, "shape": list(t.shape), "dtype": str(t.dtype)} for t in m.inputs
        ],
        "outputs": list(m.outputs),
    }
    human = [f"model: {m.name} (flow: {m.flow})", f"{len(m.nodes)} nodes"]
    for r in rows:
        human.append(
            f"  {r['name']:<24} {r['op']:<15} -> {r['output_shape']} {r['output_dtype']}"
        )
    human.append(f"params: {report['params']}")
    human.append(f"bn_params: {report['bn_params']}")
    _emit(report, args.json, human)
    return EXIT_OK


def cmd_optimize(args) -> int:
    m = _load_model(args.model)
    names = [p for p in (args.passes or "").split(",") if p]
    for p in names:
        if p not in passes.PASSES:
            print(f"unknown pass {p!r}; known: {', '.join(passes.PASSES)}", file=sys.stderr)
            return EXIT_USAGE
    try:
        out, reports = passes.run_pipeline(m, names)
    except PassPipelineError as e:
        print(str(e), file=sys.stderr)
        return EXIT_TRANSFORM
    text = serialize_model(out)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    for r in reports:
        print(
            f"{r.pass_name}: rewritten={r.rewritten} removed={r.removed} added={r.added}",
            file=sys.stderr,
        )
    return EXIT_OK


def cmd_cost(args) -> int:
    m = _load_model(args.model)
    baseline = _load_model(args.baseline) if args.baseline else None
    try:
        report = cost_mod.model_cost(m, baseline)
    except MissingAnnotation as e:
        print(str(e), file=sys.stderr)
        return EXIT_TRANSFORM
    d = report.to_dict()
    human = [f"{k}: {v}" for k, v in d.items()]
    _emit(d, args.json, human)
    return EXIT_OK


def _fifo_report(pipeline, plan, result, clk, bench_s=None):
    per_fifo = []
    for name, e in pipeline.edges.items():
        per_fifo.append(
            {
                "edge": name,
                "max_occupancy": result.max_occupancy[name],
                "depth": plan.depths[name],
                "bits": plan.depths[name] * e.token_elems * e.token_bits,
            }
        )
    seconds, ii = dataflow.latency(result, clk)
    out = {
        "fifos": per_fifo,
        "fifo_memory_bits": dataflow.fifo_memory_bits(plan, pipeline),
        "total_cycles": result.total_cycles,
        "n_inferences": result.n_inferences,
        "cycles_per_inference": ii,
        "seconds_per_inference": seconds,
        "clock_mhz": clk.frequency_hz / 1e6,
        "mode": plan.mode,
    }
    if bench_s is not None:
        out["bench_median_seconds"] = bench_s
    return out


def cmd_simulate(args) -> int:
    m = _load_model(args.model)
    try:
        pipeline = dataflow.map_to_pipeline(m, args.mode)
    except UnmappableOp as e:
        print(str(e), file=sys.stderr)
        return EXIT_TRANSFORM
    clk = dataflow.ClockConfig(args.clock_mhz * 1e6)
    try:
        if args.fifo == "auto":
            plan, _, result = dataflow.size_fifos(pipeline, args.inferences, args.mode)
        else:
            with open(args.fifo, "r", encoding="utf-8") as fh:
                depths = {str(k): int(v) for k, v in json.load(fh).items()}
            plan = dataflow.FifoPlan(depths, mode=args.mode)
            result = dataflow.simulate(pipeline, plan, args.inferences)
    except SizingUnstable as e:
        print(str(e), file=sys.stderr)
        return EXIT_TRANSFORM
    if result.deadlock:
        print(f"deadlock; blocked stages: {', '.join(result.blocked_stages)}", file=sys.stderr)
        return EXIT_DEADLOCK
    bench_s = None
    if args.bench:
        bench_s = dataflow.bench_median(pipeline, plan, clk, samples=5)
    report = _fifo_report(pipeline, plan, result, clk, bench_s)
    human = [
        f"pipeline: {len(pipeline.stages)} stages, {len(pipeline.edges)} FIFOs ({plan.mode})",
    ]
    for f in report["fifos"]:
        human.append(
            f"  {f['edge']:<28} occ {f['max_occupancy']:>6}  depth {f['depth']:>6}  bits {f['bits']}"
        )
    human.append(f"fifo_memory_bits: {report['fifo_memory_bits']}")
    human.append(
        f"cycles: {report['total_cycles']} for {report['n_inferences']} inference(s)"
        f" ({report['cycles_per_inference']:.1f}/inference)"
    )
    human.append(f"latency: {report['seconds_per_inference']:.9f} s at {args.clock_mhz} MHz")
    if bench_s is not None:
        human.append(f"bench median: {bench_s:.9f} s")
    _emit(report, args.json, human)
    return EXIT_OK


def _random_inputs(model: Model, rng) -> dict:
    out = {}
    for t in model.inputs:
        if t.dtype.is_float:
            out[t.name] = rng.uniform(-1.0, 1.0, t.shape)
        elif t.dtype.kind == "BIPOLAR":
            out[t.name] = rng.integers(0, 2, t.shape) * 2.0 - 1.0
        else:
            lo, hi = t.dtype.mantissa_min(), t.dtype.mantissa_max()
            mants = rng.integers(lo, hi + 1, t.shape)
            out[t.name] = mants.astype(np.float64) * 2.0**t.dtype.scale_exponent
    return out


def cmd_verify(args) -> int:
    ma = _load_model(args.model_a)
    mb = _load_model(args.model_b)
    sig_a = [(t.shape, str(t.dtype)) for t in ma.inputs]
    sig_b = [(t.shape, str(t.dtype)) for t in mb.inputs]
    if sig_a != sig_b:
        print(f"input signatures differ: {sig_a} vs {sig_b}", file=sys.stderr)
        return EXIT_PARSE
    rng = np.random.default_rng(args.seed)
    max_dev = 0.0
    agree = 0
    counterexample = None
    for i in range(args.n):
        ins = _random_inputs(ma, rng)
        a = interp.run(ma, ins, mode=args.mode_a)
        b = interp.run(mb, {t.name: ins[s.name] for t, s in zip(mb.inputs, ma.inputs)}, mode=args.mode_b)
        va = np.concatenate([np.asarray(a[k], dtype=np.float64).ravel() for k in ma.outputs])
        vb = np.concatenate([np.asarray(b[k], dtype=np.float64).ravel() for k in mb.outputs])
        if va.shape != vb.shape:
            print(f"output shapes differ: {va.shape} vs {vb.shape}", file=sys.stderr)
            return EXIT_PARSE
        dev = float(np.max(np.abs(va - vb))) if va.size else 0.0
        rel = float(np.max(np.abs(va - vb) / np.maximum(np.maximum(np.abs(va), np.abs(vb)), 1e-30))) if va.size else 0.0
        same_argmax = interp.argmax(va) == interp.argmax(vb)
        agree += int(same_argmax)
        ok = {
            "exact": dev == 0.0,
            "relative": rel <= args.rtol,
            "argmax": same_argmax,
        }[args.tolerance]
        max_dev = max(max_dev, dev)
        if not ok and counterexample is None:
            counterexample = {
                "sample": i,
                "inputs": {
                    k: tensor_to_wire(
                        _as_input_tensor(ma, k, v), with_data=True
                    )
                    for k, v in ins.items()
                },
                "deviation": dev,
            }
    report = {
        "samples": args.n,
        "tolerance": args.tolerance,
        "max_deviation": max_dev,
        "argmax_agreement": agree,
        "verdict": "match" if counterexample is None else "mismatch",
    }
    if counterexample is not None:
        report["counterexample"] = counterexample
    human = [f"{k}: {v}" for k, v in report.items() if k != "counterexample"]
    if counterexample is not None:
        human.append(f"counterexample at sample {counterexample['sample']}")
        human.append(json.dumps(counterexample["inputs"], sort_keys=True))
    _emit(report, args.json, human)
    if counterexample is not None:
        print("verification mismatch", file=sys.stderr)
        return EXIT_MISMATCH
    return EXIT_OK


def _as_input_tensor(model, name, values):
    from .ir import Tensor

    decl = model.tensor_decl(name)
    arr = np.asarray(values)
    if decl.dtype.is_float:
        return Tensor(name, decl.shape, decl.dtype, arr.astype(np.float64).ravel())
    mants = np.rint(arr.astype(np.float64) * 2.0**-decl.dtype.scale_exponent)
    return Tensor(name, decl.shape, decl.dtype, mants.astype(np.int64).ravel())


def cmd_zoo(args) -> int:
    if args.id not in zoo.ZOO_IDS:
        print(f"unknown zoo id {args.id!r}; known: {', '.join(zoo.ZOO_IDS)}", file=sys.stderr)
        return EXIT_USAGE
    try:
        scale = Fraction(args.width_scale)
    except (ValueError, ZeroDivisionError):
        print(f"bad width scale {args.width_scale!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        m = zoo.build(zoo.ZooSpec(args.id, scale))
    except QStreamError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    text = serialize_model(m)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"params: {m.count_params()}")
    else:
        sys.stdout.write(text)
        print(f"params: {m.count_params()}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="qstream", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("inspect", help="summarize a model file")
    sp.add_argument("model")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(fn=cmd_inspect)

    sp = sub.add_parser("optimize", help="apply rewrite passes")
    sp.add_argument("model")
    sp.add_argument(
        "--passes",
        default=",".join(passes.DEFAULT_PIPELINE),
        help="comma-separated pass names (empty string re-serializes unchanged)",
    )
    sp.add_argument("-o", "--output")
    sp.set_defaults(fn=cmd_optimize)

    sp = sub.add_parser("cost", help="inference-cost metrics")
    sp.add_argument("model")
    sp.add_argument("--baseline")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(fn=cmd_cost)

    sp = sub.add_parser("simulate", help="map, size FIFOs, and simulate")
    sp.add_argument("model")
    sp.add_argument("--mode", choices=("hls4ml", "finn"), default="hls4ml")
    sp.add_argument("--clock-mhz", type=float, default=100.0)
    sp.add_argument("--fifo", default="auto", help="'auto' or a JSON depth-plan file")
    sp.add_argument("--inferences", type=int, default=2)
    sp.add_argument("--bench", action="store_true", help="5-sample median latency")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("verify", help="randomized equivalence check")
    sp.add_argument("model_a")
    sp.add_argument("model_b")
    sp.add_argument("-n", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--mode-a", choices=("float", "exact_int"), default="float")
    sp.add_argument("--mode-b", choices=("float", "exact_int"), default="float")
    sp.add_argument("--tolerance", choices=("exact", "relative", "argmax"), default="exact")
    sp.add_argument("--rtol", type=float, default=1e-6)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("zoo", help="emit a built-in benchmark model")
    sp.add_argument("id")
    sp.add_argument("-o", "--output")
    sp.add_argument("--width-scale", default="1")
    sp.set_defaults(fn=cmd_zoo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DeadlockedResult as e:
        print(str(e), file=sys.stderr)
        return EXIT_DEADLOCK
    except QStreamError as e:
        print(str(e), file=sys.stderr)
        return EXIT_TRANSFORM


if __name__ == "__main__":
    raise SystemExit(main())
