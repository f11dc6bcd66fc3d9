import pytest

from spgm.block import PoolingMethod
from spgm.profiler import (MAC_CONVENTION, chunk_geometry, count_macs, count_params,
                           spgm_block_macs, spgm_param_breakdown)
from spgm.separator import ModelConfig

FULL = ModelConfig()
SMALL = ModelConfig(num_blocks=2)


def test_spgm_modulation_weights_exact():
    assert count_params(FULL)["spgm_blocks"] == 4 * 2 * 256 * 256 == 524_288
    assert spgm_param_breakdown(FULL) == {"modulation": 524_288, "pooling": 0}


def test_attentive_adds_one_vector_per_block():
    ap = ModelConfig(pooling="ap")
    assert count_params(ap)["total"] - count_params(FULL)["total"] == 4 * 256
    assert spgm_param_breakdown(ap)["pooling"] == 4 * 256


@pytest.mark.parametrize("cfg, target", [
    (FULL, 26.2e6), (ModelConfig(pooling="none"), 25.7e6),
    (SMALL, 13.3e6), (ModelConfig(num_blocks=2, pooling="none"), 13.0e6),
])
def test_model_size_within_three_percent(cfg, target):
    assert abs(count_params(cfg)["total"] - target) <= 0.03 * target


def test_exact_totals():
    assert count_params(FULL)["total"] == 26_134_530
    assert count_params(ModelConfig(pooling="none"))["total"] == 25_610_242


def test_inter_block_cost_model():
    # two blocks of eight intra + eight inter layers cost the same as 32 intra layers
    dual = ModelConfig(num_blocks=2, pooling="none", inter_layers=8)
    assert count_params(dual)["total"] == count_params(ModelConfig(pooling="none"))["total"]


def test_full_config_macs_in_bracket():
    total = count_macs(FULL, 1.0)["total"]
    assert 55e9 <= total <= 95e9


def test_geometry():
    samples, frames, chunks = chunk_geometry(FULL, 1.0)
    assert (samples, frames) == (8000, 999)
    assert chunks == 9  # 999 + 250 padded frames, hop 125


def test_bottleneck_is_plain_linear_cost():
    _, frames, _ = chunk_geometry(FULL, 1.0)
    assert count_macs(FULL, 1.0)["bottleneck"] == frames * 256 * 256


@pytest.mark.parametrize("pooling, extra", [(PoolingMethod.LAST_ELEMENT, 0),
                                            (PoolingMethod.ATTENTIVE, 1)])
def test_spgm_block_macs(pooling, extra):
    n, k, s = 256, 250, 9
    assert spgm_block_macs(n, k, s, pooling) == 2 * n * n + 2 * k * s * n + extra * k * s * n


def test_macs_sum_and_scaling():
    macs = count_macs(FULL, 1.0)
    assert macs["total"] == sum(v for k, v in macs.items() if k != "total")
    assert count_macs(FULL, 2.0)["total"] > 1.8 * macs["total"]
    with pytest.raises(ValueError):
        count_macs(FULL, 0.0)


def test_convention_documented():
    assert "MAC" in MAC_CONVENTION and "SPGM" in MAC_CONVENTION
