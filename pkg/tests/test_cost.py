import numpy as np
import pytest

from helpers import dense_model
from qstream import cost, zoo
from qstream.datatypes import FLOAT32, INT
from qstream.errors import DomainError, MissingAnnotation
from qstream.ir import Tensor

# (m, n, k, b_a, b_w, out_positions, expected): expected values evaluated
# independently with m*n*k^2*(ba*bw + ba + bw + log2(n*k^2))*positions
BOPS_CASES = [
    (512, 256, 1, 1, 1, 1, 1441792.0),
    (1, 1, 1, 1, 1, 1, 3.0),
    (64, 3, 3, 8, 1, 900, 33833201.04336463),
    (64, 64, 3, 1, 1, 784, 351727578.3584848),
    (128, 64, 3, 1, 1, 144, 129206049.19291279),
    (10, 512, 1, 1, 1, 1, 61440.0),
    (256, 490, 1, 8, 3, 1, 5511411.863068483),
    (256, 256, 1, 3, 3, 1, 1507328.0),
    (12, 256, 1, 3, 3, 1, 70656.0),
    (72, 128, 1, 8, 8, 1, 801792.0),
    (128, 72, 1, 8, 8, 1, 794142.0288132923),
    (32, 3, 1, 8, 8, 1024, 8020128.153670893),
    (4, 32, 4, 8, 8, 841, 153290752.0),
    (32, 4, 4, 8, 8, 676, 119062528.0),
    (32, 32, 4, 8, 8, 36, 52494336.0),
    (4, 32, 4, 8, 8, 9, 1640448.0),
    (10, 36, 1, 8, 8, 1, 30661.17300051923),
    (16, 16, 2, 4, 4, 49, 1505280.0),
    (1, 1, 1, 32, 32, 1, 1088.0),
    (100, 100, 5, 2, 2, 10, 48219280.94887362),
]


@pytest.mark.parametrize("m,n,k,ba,bw,pos,expected", BOPS_CASES)
def test_bops_layer_cases(m, n, k, ba, bw, pos, expected):
    assert cost.bops_layer(m, n, k, ba, bw, pos) == pytest.approx(expected, rel=1e-15)


def test_bops_domain_errors():
    for bad in [(0, 1, 1, 1, 1, 1), (1, -1, 1, 1, 1, 1), (1, 1, 1, 0, 1, 1)]:
        with pytest.raises(DomainError):
            cost.bops_layer(*bad)


def test_bops_monotonicity():
    base = cost.bops_layer(8, 8, 3, 4, 4, 10)
    assert cost.bops_layer(9, 8, 3, 4, 4, 10) > base
    assert cost.bops_layer(8, 9, 3, 4, 4, 10) > base
    assert cost.bops_layer(8, 8, 4, 4, 4, 10) > base
    assert cost.bops_layer(8, 8, 3, 5, 4, 10) > base
    assert cost.bops_layer(8, 8, 3, 4, 5, 10) > base


def test_cost_c_self_is_one():
    for zid in (zoo.CNV_W1A1, zoo.KWS_MLP):
        m = zoo.build(zoo.ZooSpec(zid))
        assert cost.model_cost(m, baseline=m).cost_c == 1.0


def test_zoo_weight_memory():
    cnv = cost.model_cost(zoo.build(zoo.ZooSpec(zoo.CNV_W1A1)))
    assert cnv.wm_bits == 1_542_848  # 1-bit weights: bits == params
    kws = cost.model_cost(zoo.build(zoo.ZooSpec(zoo.KWS_MLP)))
    assert kws.wm_bits == 3 * 259_584


def test_wm_scale_equivariance():
    # doubling every weight width doubles wm_bits
    m4 = dense_model(np.zeros((6, 5), dtype=np.int64), wdtype=INT(4))
    m8 = dense_model(np.zeros((6, 5), dtype=np.int64), wdtype=INT(8))
    assert cost.model_cost(m8).wm_bits == 2 * cost.model_cost(m4).wm_bits


def test_flops_dense():
    m = dense_model(np.zeros((3, 4), dtype=np.int64))
    assert cost.flops(m) == 24  # 2 * 4 * 3, no bias


def test_flops_empty_graph():
    from qstream.ir import Model

    assert cost.flops(Model("e", "finn", [], [], {}, [])) == 0


def test_flops_ic_within_published_band():
    r = cost.model_cost(zoo.build(zoo.ZooSpec(zoo.IC_CNN)))
    assert 12.8e6 / 2 <= r.flops <= 12.8e6 * 2


def test_missing_annotation():
    m = dense_model(np.zeros((3, 4)), wdtype=FLOAT32)
    m.initializers["w"] = Tensor("w", (3, 4), FLOAT32, np.zeros(12))
    with pytest.raises(MissingAnnotation):
        cost.model_cost(m)


def test_report_fields_nonnegative():
    r = cost.model_cost(zoo.build(zoo.ZooSpec(zoo.AD_AE)))
    assert r.bops > 0 and r.wm_bits > 0 and r.flops > 0 and r.params > 0
    assert r.cost_c is None
