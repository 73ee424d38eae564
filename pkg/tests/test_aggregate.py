import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from threadpoolctl import threadpool_limits

import oracles
from helpers import in_view_mask, nearest3d, one_hot_center, random_guidance, random_instance
from cais.aggregate import (bilinear_deconv_kernel, cais_backward, cais_upsample,
                            disparity_upsample, full3d_backward, full3d_upsample,
                            spatial_upsample, upsample_baseline)
from cais.validation import AggregationConfig, ConfigError, ShapeError

CFG = AggregationConfig()

VARIANTS = [
    AggregationConfig(),
    AggregationConfig(block_reduce="sum"),
    AggregationConfig(stage1_renormalize=False),
    AggregationConfig(left_center_scale=False, border_renormalize_spatial=True),
    AggregationConfig(warp_alignment="pixel"),
    AggregationConfig(w_d=5),
]


def _oracle_kwargs(cfg):
    return dict(block_reduce=cfg.block_reduce, renorm=cfg.stage1_renormalize,
                left_center=cfg.left_center_scale,
                border_renormalize_spatial=cfg.border_renormalize_spatial)


# --- disparity stage -------------------------------------------------------

def test_disparity_one_hot_is_repeat():
    cv = np.zeros((2, 3, 2), np.float32)
    cv[..., 0], cv[..., 1] = 3, 7
    g = one_hot_center(9, (4, 6))
    out = disparity_upsample(cv, g, g, CFG)
    assert out.shape == (2, 3, 4)
    np.testing.assert_array_equal(out[1, 2], [3, 3, 7, 7])


def test_disparity_uniform_guidance_averages_window():
    cv = np.zeros((3, 5, 2), np.float32)
    cv[..., 0], cv[..., 1] = 3, 7
    g = np.full((9, 6, 10), 1 / 9, np.float32)
    out = disparity_upsample(cv, g, g, AggregationConfig(left_center_scale=False))
    assert out[1, 2, 0] == pytest.approx(5.0, abs=1e-6)


def test_disparity_zero_weights_fall_back_to_uniform():
    cv = np.zeros((1, 2, 2), np.float32)
    cv[..., 0], cv[..., 1] = 3, 7
    g_right = np.zeros((9, 2, 4), np.float32)
    g_left = one_hot_center(9, (2, 4))
    out = disparity_upsample(cv, g_right, g_left, CFG)
    np.testing.assert_allclose(out[0, 1], 5.0)


@pytest.mark.parametrize("cfg", VARIANTS, ids=lambda c: repr(c)[19:80])
def test_disparity_matches_loop_oracle(rng, cfg):
    cv, gl, gr = random_instance(rng, 2, 2, 3, cfg)
    ours = disparity_upsample(cv, gr, gl, cfg)
    ref = oracles.disparity_stage(cv, gr, gl, cfg.s, cfg.w_s, cfg.w_d, cfg.block_reduce,
                                  cfg.stage1_renormalize, cfg.left_center_scale,
                                  cfg.warp_alignment)
    np.testing.assert_array_equal(ours, ref)


def test_disparity_window_larger_than_fine_depth():
    cv, gl, gr = random_instance(np.random.default_rng(0), 2, 2, 1, AggregationConfig(s=2))
    with pytest.raises(ShapeError):
        disparity_upsample(cv, gr, gl, AggregationConfig(s=2, w_d=5))


# --- spatial stage ---------------------------------------------------------

def test_spatial_one_hot_is_block_copy(rng):
    cv1 = rng.normal(size=(3, 2, 4)).astype(np.float32)
    out = spatial_upsample(cv1, one_hot_center(9, (6, 4)), CFG)
    np.testing.assert_array_equal(out, cv1.repeat(2, 0).repeat(2, 1))


def test_spatial_uniform_interior_and_corner():
    c = 2.5
    cv1 = np.full((3, 3, 2), c, np.float32)
    g = np.full((9, 6, 6), 1 / 9, np.float32)
    out = spatial_upsample(cv1, g, CFG)
    assert out[2, 2, 0] == pytest.approx(c, rel=1e-6)
    assert out[0, 0, 0] == pytest.approx(4 * c / 9, rel=1e-6)
    renorm = spatial_upsample(cv1, g, AggregationConfig(border_renormalize_spatial=True))
    np.testing.assert_allclose(renorm, c, rtol=1e-6)


@pytest.mark.parametrize("renorm", [False, True])
def test_spatial_matches_loop_oracle(rng, renorm):
    cv1 = rng.normal(size=(3, 3, 4)).astype(np.float32)
    g = random_guidance(rng, 9, (6, 6))
    cfg = AggregationConfig(border_renormalize_spatial=renorm)
    np.testing.assert_array_equal(spatial_upsample(cv1, g, cfg),
                                  oracles.spatial_stage(cv1, g, 2, 3, renorm))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_spatial_renormalized_output_is_convex(seed):
    rng = np.random.default_rng(seed)
    cv1 = rng.normal(size=(3, 4, 2)).astype(np.float64)
    g = random_guidance(rng, 9, (6, 8), np.float64)
    out = spatial_upsample(cv1, g, AggregationConfig(border_renormalize_spatial=True))
    for yf in range(6):
        for xf in range(8):
            y, x = yf // 2, xf // 2
            hood = cv1[max(y - 1, 0):y + 2, max(x - 1, 0):x + 2]
            assert np.all(out[yf, xf] >= hood.min(axis=(0, 1)) - 1e-12)
            assert np.all(out[yf, xf] <= hood.max(axis=(0, 1)) + 1e-12)


# --- decomposed and full 3D ------------------------------------------------

@pytest.mark.parametrize("s", [2, 4])
def test_one_hot_pipelines_equal_nearest_in_view(rng, s):
    cfg = AggregationConfig(s=s)
    cv = rng.uniform(0, 3, size=(3, 4, 3)).astype(np.float32)
    g = one_hot_center(9, (3 * s, 4 * s))
    ref = upsample_baseline(cv, s, "nearest")
    np.testing.assert_array_equal(ref, nearest3d(cv, s))
    view = in_view_mask(ref.shape)
    for out in (cais_upsample(cv, g, g, cfg), full3d_upsample(cv, g, g, cfg)):
        np.testing.assert_allclose(out[view], ref[view], atol=1e-6, rtol=0)


def test_one_hot_out_of_view_entries():
    # warped column left of the image: every right lookup weighs zero, so the
    # full 3D sum vanishes and stage 1 falls back to uniform candidate weights
    cv = np.zeros((1, 1, 2), np.float32)
    cv[..., 0], cv[..., 1] = 3, 7
    g = one_hot_center(9, (2, 2))
    full = full3d_upsample(cv, g, g, CFG)
    cais = cais_upsample(cv, g, g, CFG)
    assert full[0, 0, 1] == 0 and full[0, 1, 2] == 0
    assert cais[0, 0, 2] == pytest.approx(5.0)
    assert cais[0, 0, 1] == 3


def test_pixel_alignment_breaks_one_hot_identity(rng):
    # the literal per-pixel warp attribution moves weight to neighbouring candidates
    cfg = AggregationConfig(warp_alignment="pixel")
    cv = rng.uniform(0, 3, size=(2, 3, 3)).astype(np.float32)
    g = one_hot_center(9, (4, 6))
    assert np.abs(cais_upsample(cv, g, g, cfg) - nearest3d(cv, 2)).max() > 1e-3


@pytest.mark.parametrize("cfg", VARIANTS, ids=lambda c: repr(c)[19:80])
def test_cais_matches_loop_oracle(rng, cfg):
    cv, gl, gr = random_instance(rng, 3, 3, 2 if cfg.w_d == 3 else 3, cfg)
    ref = oracles.cais(cv, gl, gr, cfg.s, cfg.w_s, cfg.w_d, cfg.warp_alignment,
                       **_oracle_kwargs(cfg))
    np.testing.assert_array_equal(cais_upsample(cv, gl, gr, cfg), ref)


@pytest.mark.parametrize("alignment", ["block", "pixel"])
def test_full3d_matches_loop_oracle(rng, alignment):
    cfg = AggregationConfig(warp_alignment=alignment)
    cv, gl, gr = random_instance(rng, 3, 3, 2, cfg)
    np.testing.assert_array_equal(full3d_upsample(cv, gl, gr, cfg),
                                  oracles.full3d(cv, gl, gr, 2, alignment=alignment))


def test_full3d_uniform_interior_counts_valid_terms():
    # the warped right direction is (dir_x - t), so only 21 of the 27
    # (t, dir_y, dir_x) combinations stay inside the 3x3 window
    c = 3.0
    H, W, D, s = 5, 6, 4, 2
    cv = np.full((H, W, D), c, np.float64)
    g = np.full((9, H * s, W * s), 1 / 9, np.float64)
    out = full3d_upsample(cv, g, g, CFG)
    xf, yf, df = 6, 4, 3
    n = oracles.full3d_naive_count(H, W, D, s, 3, 3, xf, yf, df)
    assert n == 21
    assert out[yf, xf, df] == pytest.approx(n * c / 81, rel=1e-12)


@pytest.mark.parametrize("op", ["cais", "full3d", "nearest", "trilinear", "deconv_bilinear"])
def test_linear_in_cost_volume(rng, op):
    _, gl, gr = random_instance(rng, 3, 4, 3)
    a = rng.normal(size=(3, 4, 3)).astype(np.float32)
    b = rng.normal(size=(3, 4, 3)).astype(np.float32)
    alpha, beta = rng.normal(size=2).astype(np.float32)
    if op == "cais":
        f = lambda v: cais_upsample(v, gl, gr, CFG)
    elif op == "full3d":
        f = lambda v: full3d_upsample(v, gl, gr, CFG)
    else:
        f = lambda v: upsample_baseline(v, 2, op)
    lhs = f(alpha * a + beta * b)
    rhs = alpha * f(a) + beta * f(b)
    assert np.abs(lhs - rhs).max() <= 1e-5 * np.abs(rhs).max()


@pytest.mark.parametrize("cfg", VARIANTS, ids=lambda c: repr(c)[19:80])
def test_cais_adjoint_identity(rng, cfg):
    cv, gl, gr = random_instance(rng, 3, 4, 3, cfg, np.float64)
    y = rng.normal(size=(6, 8, 6))
    lhs = np.vdot(cais_upsample(cv, gl, gr, cfg), y)
    rhs = np.vdot(cv, cais_backward(cv, gl, gr, cfg, y)[0])
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def test_full3d_adjoint_identity(rng):
    cv, gl, gr = random_instance(rng, 3, 4, 3, CFG, np.float64)
    y = rng.normal(size=(6, 8, 6))
    lhs = np.vdot(full3d_upsample(cv, gl, gr, CFG), y)
    rhs = np.vdot(cv, full3d_backward(cv, gl, gr, CFG, y)[0])
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


@pytest.mark.parametrize("backward", [cais_backward, full3d_backward])
def test_zero_upstream_gives_zero_gradients(rng, backward):
    cv, gl, gr = random_instance(rng, 2, 3, 2)
    for grad in backward(cv, gl, gr, CFG, np.zeros((4, 6, 4), np.float32)):
        assert not grad.any()


@pytest.mark.parametrize("forward, backward", [(cais_upsample, cais_backward),
                                               (full3d_upsample, full3d_backward)])
@pytest.mark.parametrize("cfg", [CFG, AggregationConfig(border_renormalize_spatial=True,
                                                        warp_alignment="pixel")])
def test_gradients_match_finite_differences(rng, forward, backward, cfg):
    cv, gl, gr = random_instance(rng, 3, 3, 2, cfg, np.float64)
    y = rng.normal(size=(6, 6, 4))
    grads = backward(cv, gl, gr, cfg, y)
    inputs = [cv, gl, gr]
    for i, analytic in enumerate(grads):
        def f(v, i=i):
            args = list(inputs)
            args[i] = v
            return float(np.vdot(forward(*args, cfg), y))
        numeric = oracles.central_difference(f, inputs[i])
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)),
                           1e-3 * np.abs(numeric).max())
        assert (np.abs(analytic - numeric) / scale).max() < 1e-5


def test_guidance_shape_mismatch(rng):
    cv, gl, gr = random_instance(rng, 2, 2, 2)
    with pytest.raises(ShapeError):
        cais_upsample(cv, gl[:, :-1], gr, CFG)
    with pytest.raises(ShapeError):
        full3d_upsample(cv, gl, gr[:4], CFG)
    with pytest.raises(ShapeError):
        cais_backward(cv, gl, gr, CFG, np.zeros((4, 4, 3)))


def test_same_output_for_any_thread_count(rng):
    cv, gl, gr = random_instance(rng, 6, 7, 4)
    with threadpool_limits(1):
        one = cais_upsample(cv, gl, gr, CFG), full3d_upsample(cv, gl, gr, CFG)
    many = cais_upsample(cv, gl, gr, CFG), full3d_upsample(cv, gl, gr, CFG)
    for a, b in zip(one, many):
        np.testing.assert_array_equal(a, b)


def test_two_steps_of_two_match_scale_four_shape(rng):
    cv, gl, gr = random_instance(rng, 2, 3, 2)
    once = cais_upsample(cv, gl, gr, CFG)
    twice = cais_upsample(once, *random_instance(rng, 4, 6, 4)[1:], CFG)
    cfg4 = AggregationConfig(s=4)
    direct = cais_upsample(cv, *random_instance(rng, 2, 3, 2, cfg4)[1:], cfg4)
    assert twice.shape == direct.shape == (8, 12, 8)


# --- baselines -------------------------------------------------------------

def test_nearest_repeats_blocks():
    cv = np.array([3, 7], np.float32).reshape(1, 1, 2)
    out = upsample_baseline(cv, 2, "nearest")
    np.testing.assert_array_equal(out[1, 0], [3, 3, 7, 7])


@pytest.mark.parametrize("method", ["nearest", "trilinear"])
@pytest.mark.parametrize("s", [2, 4, 8])
def test_baseline_reproduces_constants(method, s):
    out = upsample_baseline(np.full((2, 3, 2), 1.25, np.float32), s, method)
    assert out.shape == (2 * s, 3 * s, 2 * s)
    np.testing.assert_allclose(out, 1.25, rtol=1e-6)


@pytest.mark.parametrize("s", [2, 4])
def test_trilinear_ramp_along_disparity(s):
    D = 5
    cv = np.broadcast_to(2.0 + 0.5 * np.arange(D), (2, 2, D)).astype(np.float64)
    out = upsample_baseline(cv, s, "trilinear")
    i = np.arange(D * s)
    src = (i + 0.5) / s - 0.5
    interior = (src >= 0) & (src <= D - 1)
    np.testing.assert_allclose(out[0, 0, interior], 2.0 + 0.5 * src[interior], rtol=1e-12)


@pytest.mark.parametrize("s, kernel", [(2, [0.25, 0.75, 0.75, 0.25]),
                                       (4, [0.125, 0.375, 0.625, 0.875,
                                            0.875, 0.625, 0.375, 0.125])])
def test_deconv_kernel(s, kernel):
    np.testing.assert_allclose(bilinear_deconv_kernel(s), kernel)


def test_deconv_interior_reproduces_constants():
    out = upsample_baseline(np.full((4, 4, 4), 2.0), 2, "deconv_bilinear")
    np.testing.assert_allclose(out[1:-1, 1:-1, 1:-1], 2.0)


def test_unknown_baseline_method():
    with pytest.raises(ConfigError):
        upsample_baseline(np.zeros((1, 1, 1), np.float32), 2, "bicubic")


def test_unsupported_scale():
    with pytest.raises(ConfigError):
        upsample_baseline(np.zeros((1, 1, 1), np.float32), 3, "nearest")
    with pytest.raises(ConfigError):
        AggregationConfig(s=3)
    with pytest.raises(ConfigError):
        AggregationConfig(w_s=4)
