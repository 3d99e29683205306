import json
import subprocess
import sys

import numpy as np
import pytest

from helpers import dense_model
from qstream import cli, zoo
from qstream.datatypes import FLOAT32, INT, UINT
from qstream.ir import Model, Node, Tensor, serialize_model


def run_cli(*args):
    proc = subprocess.run(
        [sys.executable, "-m", "qstream.cli", *args],
        capture_output=True,
        text=True,
    )
    return proc.returncode, proc.stdout, proc.stderr


@pytest.fixture(scope="module")
def kws_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("models") / "kws.json"
    m = zoo.build(zoo.ZooSpec(zoo.KWS_MLP))
    path.write_text(serialize_model(m))
    return str(path)


@pytest.fixture(scope="module")
def kws_opt_file(tmp_path_factory, kws_file):
    path = tmp_path_factory.mktemp("models") / "kws_opt.json"
    rc, _, err = run_cli("optimize", kws_file, "-o", str(path))
    assert rc == 0, err
    return str(path)


def test_inspect_zoo_params(tmp_path):
    path = tmp_path / "cnv.json"
    rc, out, err = run_cli("zoo", "cnv-w1a1", "-o", str(path))
    assert rc == 0
    assert "params: 1542848" in out
    rc, out, _ = run_cli("inspect", str(path))
    assert rc == 0
    assert "params: 1542848" in out


def test_inspect_empty_graph(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text(serialize_model(Model("empty", "finn", [], [], {}, [])))
    rc, out, _ = run_cli("inspect", str(path))
    assert rc == 0
    assert "0 nodes" in out


def test_inspect_malformed_exit_2(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{this is not json")
    rc, _, err = run_cli("inspect", str(path))
    assert rc == 2
    assert err


def test_optimize_default_pipeline(kws_file, kws_opt_file):
    with open(kws_opt_file) as fh:
        doc = json.load(fh)
    dtypes = [t["dtype"] for t in doc["initializers"].values()]
    # streamlined model carries no float tensors at all
    assert "FLOAT32" not in dtypes
    assert any(n["op"] == "MultiThreshold" for n in doc["nodes"])


def test_optimize_empty_passes_byte_equivalent(kws_file, tmp_path):
    out_path = tmp_path / "same.json"
    rc, _, _ = run_cli("optimize", kws_file, "--passes", "", "-o", str(out_path))
    assert rc == 0
    assert out_path.read_text() == open(kws_file).read()


def test_optimize_unknown_pass_usage_error(kws_file):
    rc, _, err = run_cli("optimize", kws_file, "--passes", "explode")
    assert rc == 64
    assert "unknown pass" in err


def test_cost_self_baseline(kws_file):
    rc, out, _ = run_cli("cost", kws_file, "--baseline", kws_file, "--json")
    assert rc == 0
    doc = json.loads(out)
    assert doc["cost_c"] == 1.0
    assert doc["wm_bits"] == 778752


def test_cost_missing_annotation_exit_3(tmp_path):
    m = dense_model(np.zeros((2, 2)), wdtype=FLOAT32)
    m.initializers["w"] = Tensor("w", (2, 2), FLOAT32, np.zeros(4))
    path = tmp_path / "f.json"
    path.write_text(serialize_model(m))
    rc, _, err = run_cli("cost", str(path))
    assert rc == 3


def test_simulate_finn_depths_pow2(kws_opt_file):
    rc, out, _ = run_cli("simulate", kws_opt_file, "--mode", "finn", "--json")
    assert rc == 0
    doc = json.loads(out)
    for f in doc["fifos"]:
        assert f["depth"] >= 1 and (f["depth"] & (f["depth"] - 1)) == 0


def test_simulate_softmax_exit_3(tmp_path):
    path = tmp_path / "ic.json"
    run_cli("zoo", "ic-cnn", "-o", str(path))
    rc, _, err = run_cli("simulate", str(path))
    assert rc == 3
    assert "softmax" in err.lower()


def _skip_model():
    w = np.eye(16, dtype=np.int64)
    return Model(
        "skip",
        "hls4ml",
        [Tensor("x", (1, 4, 4), UINT(8))],
        ["y"],
        {"w": Tensor("w", (16, 16), INT(8), w.reshape(-1))},
        [
            Node("ReLU", "pre", ["x"], ["t"]),
            Node("Flatten", "f1", ["t"], ["tf"]),
            Node("Flatten", "f2", ["t"], ["tf2"]),
            Node("Dense", "fc", ["tf", "w"], ["acc"]),
            Node("Add", "add", ["acc", "tf2"], ["y"]),
        ],
    )


def test_simulate_undersized_join_exit_4(tmp_path):
    mpath = tmp_path / "skip.json"
    mpath.write_text(serialize_model(_skip_model()))
    plan = {"t": 16, "t->fc": 16, "t->add": 2, "acc": 1}
    ppath = tmp_path / "plan.json"
    ppath.write_text(json.dumps(plan))
    rc, _, err = run_cli("simulate", str(mpath), "--fifo", str(ppath))
    assert rc == 4
    assert "blocked" in err
    # generous short-branch depth flows
    plan["t->add"] = 16
    ppath.write_text(json.dumps(plan))
    rc, _, _ = run_cli("simulate", str(mpath), "--fifo", str(ppath))
    assert rc == 0


def test_verify_self_match(kws_file):
    rc, out, _ = run_cli("verify", kws_file, kws_file, "-n", "5", "--seed", "1", "--json")
    assert rc == 0
    doc = json.loads(out)
    assert doc["verdict"] == "match" and doc["max_deviation"] == 0.0


def test_verify_streamlined_argmax(kws_file, kws_opt_file):
    rc, out, _ = run_cli(
        "verify", kws_file, kws_opt_file, "-n", "20", "--seed", "7",
        "--mode-b", "exact_int", "--tolerance", "argmax", "--json",
    )
    assert rc == 0


def test_verify_perturbed_weight_exit_5(kws_file, tmp_path):
    with open(kws_file) as fh:
        doc = json.load(fh)
    # inject a fault: swap two output rows of the final layer
    data = doc["initializers"]["fc3_w"]["data"]
    data[0:256], data[256:512] = data[256:512], data[0:256]
    bad = tmp_path / "kws_bad.json"
    bad.write_text(json.dumps(doc))
    rc, out, err = run_cli(
        "verify", kws_file, str(bad), "-n", "50", "--seed", "3", "--json",
    )
    assert rc == 5
    report = json.loads(out)
    assert "counterexample" in report
    assert report["counterexample"]["inputs"]["x"]["data"]


def test_zoo_ids_and_usage():
    rc, out, err = run_cli("zoo", "kws-mlp")
    assert rc == 0 and "params: 259584" in err  # params note goes to stderr with stdout model
    rc, _, _ = run_cli("zoo", "bogus")
    assert rc == 64
    rc, _, _ = run_cli("nonsense")
    assert rc == 64


def test_simulate_bench_median(kws_opt_file):
    rc, out, _ = run_cli("simulate", kws_opt_file, "--bench", "--json")
    assert rc == 0
    doc = json.loads(out)
    assert doc["bench_median_seconds"] > 0


def test_reports_byte_identical(kws_file, kws_opt_file):
    a = run_cli("simulate", kws_opt_file, "--json", "--clock-mhz", "100")
    b = run_cli("simulate", kws_opt_file, "--json", "--clock-mhz", "100")
    assert a == b
    a = run_cli("verify", kws_file, kws_opt_file, "-n", "10", "--seed", "11",
                "--mode-b", "exact_int", "--tolerance", "argmax", "--json")
    b = run_cli("verify", kws_file, kws_opt_file, "-n", "10", "--seed", "11",
                "--mode-b", "exact_int", "--tolerance", "argmax", "--json")
    assert a == b


def test_main_callable_directly(capsys, kws_file):
    rc = cli.main(["cost", kws_file])
    assert rc == 0
    out = capsys.readouterr().out
    assert "wm_bits: 778752" in out
