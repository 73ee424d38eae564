import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_instance
from cais.aggregate import cais_upsample, full3d_upsample, upsample_baseline
from cais.flops import (FlopCounter, counting, flops_analytic, flops_runtime,
                        guidance_flops_analytic, runtime_report)
from cais.guidance import encoder_params, guidance_forward
from cais.validation import AggregationConfig, ConfigError

CFG = AggregationConfig()


def test_full3d_example_count():
    rep = flops_analytic((8, 8, 4), CFG, "full3d")
    assert rep.aggregation_flops == 2048 * (27 + 54) == 165888


def test_decomposed_example_count():
    rep = flops_analytic((8, 8, 4), CFG, "decomposed")
    assert rep.stage_flops("spatial") == 2048 * 18 == 36864
    assert rep.aggregation_flops == 51520 < 60000
    assert 165888 / rep.aggregation_flops > 2.5


def test_single_tap_windows():
    # one tap per window: full3d spends a product and a MAC per fine output,
    # the decomposed spatial stage a single MAC, plus coarse-level terms
    cfg = AggregationConfig(w_s=1, w_d=1)
    H, W, D, s = 4, 4, 2, 2
    n = H * W * D * s ** 3
    full = flops_analytic((H, W, D), cfg, "full3d")
    dec = flops_analytic((H, W, D), cfg, "decomposed")
    assert full.aggregation_flops == 3 * n
    assert dec.stage_flops("spatial") == 2 * n
    # block reduction, renormalization and the left-center factor are
    # coarse-level terms; at single-tap windows they outweigh the savings
    assert dec.aggregation_flops == 2 * n + 576 + 144


def test_totals_are_stage_sums():
    rep = flops_analytic((5, 6, 3), AggregationConfig(s=4), "decomposed")
    for kind in ("mul", "add", "div", "exp"):
        assert rep.totals[kind] == sum(c[kind] for c in rep.stages.values())


@pytest.mark.parametrize("s, bound", [(2, 2.5), (4, 3.5)])
def test_ratio_targets(s, bound):
    cfg = AggregationConfig(s=s)
    for dims in [(8, 8, 4), (17, 9, 5), (64, 128, 24)]:
        ratio = (flops_analytic(dims, cfg, "full3d").aggregation_flops
                 / flops_analytic(dims, cfg, "decomposed").aggregation_flops)
        assert ratio >= bound


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.integers(2, 40), st.integers(2, 20), st.sampled_from([2, 4, 8]),
       st.booleans(), st.booleans(), st.booleans(), st.sampled_from(["mean", "sum"]))
def test_decomposed_always_cheaper(H, W, D, s, renorm, left, border, reduce):
    cfg = AggregationConfig(s=s, stage1_renormalize=renorm, left_center_scale=left,
                            border_renormalize_spatial=border, block_reduce=reduce)
    assert (flops_analytic((H, W, D), cfg, "decomposed").aggregation_flops
            < flops_analytic((H, W, D), cfg, "full3d").aggregation_flops)


CONFIGS = [AggregationConfig(), AggregationConfig(s=4),
           AggregationConfig(s=8, w_d=5),
           AggregationConfig(block_reduce="sum", stage1_renormalize=False,
                             left_center_scale=False, border_renormalize_spatial=True),
           AggregationConfig(warp_alignment="pixel", w_s=5)]


@pytest.mark.parametrize("cfg", CONFIGS, ids=lambda c: repr(c)[19:70])
@pytest.mark.parametrize("mode", ["decomposed", "full3d"])
def test_runtime_equals_analytic(rng, cfg, mode):
    dims = (3, 4, 3)
    cv, gl, gr = random_instance(rng, *dims, cfg)
    fn = cais_upsample if mode == "decomposed" else full3d_upsample
    _, stages = flops_runtime(fn, cv, gl, gr, cfg)
    assert runtime_report(mode, dims, cfg, stages).stages == \
        flops_analytic(dims, cfg, mode).stages


@pytest.mark.parametrize("method", ["trilinear", "deconv_bilinear", "nearest"])
@pytest.mark.parametrize("s", [2, 4, 8])
def test_baseline_runtime_equals_analytic(rng, method, s):
    dims = (3, 2, 4)
    cv = rng.normal(size=dims).astype(np.float32)
    _, stages = flops_runtime(upsample_baseline, cv, s, method)
    analytic = flops_analytic(dims, AggregationConfig(s=s), method)
    assert runtime_report(method, dims, AggregationConfig(s=s), stages).aggregation_flops == \
        analytic.aggregation_flops
    if method == "nearest":
        assert analytic.aggregation_flops == 0


def test_guidance_runtime_equals_analytic(rng):
    f_f = rng.normal(size=(4, 6, 8)).astype(np.float32)
    f_c = rng.normal(size=(4, 3, 4)).astype(np.float32)
    _, stages = flops_runtime(guidance_forward, encoder_params(4), f_f, f_c, 2, 3)
    assert stages["guidance"] == guidance_flops_analytic((6, 8), 10, 16, 9)


def test_counting_does_not_change_outputs(rng):
    cv, gl, gr = random_instance(rng, 3, 3, 2)
    plain = cais_upsample(cv, gl, gr, CFG)
    counted, _ = flops_runtime(cais_upsample, cv, gl, gr, CFG)
    np.testing.assert_array_equal(plain, counted)
    plain = full3d_upsample(cv, gl, gr, CFG)
    with counting():
        counted = full3d_upsample(cv, gl, gr, CFG)
    np.testing.assert_array_equal(plain, counted)


def test_counter_overflow():
    c = FlopCounter()
    c.add("x", mul=2 ** 62)
    with pytest.raises(OverflowError):
        c.add("x", mul=2 ** 62)


def test_text_report_lines():
    text = flops_analytic((8, 8, 4), CFG, "full3d").to_text()
    assert "full3d.mul = 110592" in text.splitlines()
    assert "aggregation_flops = 165888" in text.splitlines()
    assert all(" = " in line for line in text.splitlines())


def test_bad_mode_and_dims():
    with pytest.raises(ConfigError):
        flops_analytic((8, 8, 4), CFG, "bicubic")
    with pytest.raises(ConfigError):
        flops_analytic((0, 8, 4), CFG, "full3d")
