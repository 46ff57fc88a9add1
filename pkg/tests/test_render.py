import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynvol.field import EncodingConfig, init_field, init_latents, latent_at_time
from dynvol.geometry import Ray, generate_ray
from dynvol.render import (
    RenderConfig,
    composite,
    composite_backward,
    composite_batch,
    pdf_resample,
    render_image,
    render_ray,
    stratified_samples,
    trace_rays,
)
from dynvol.scene import Emitter, SyntheticSceneSpec, oracle_field, ring_rig

from conftest import make_camera
from oracles import closed_form_color, loop_composite


def test_stratified_one_per_bin():
    d = stratified_samples(0.0, 1.0, 4, np.random.default_rng(3))
    assert np.all(np.floor(d * 4) == np.arange(4))


def test_stratified_midpoints():
    np.testing.assert_array_equal(stratified_samples(0.0, 1.0, 2, deterministic=True), [0.25, 0.75])


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 5), st.floats(0.01, 5), st.integers(1, 64))
def test_stratified_strictly_ascending(seed, near, span, n):
    d = stratified_samples(near, near + span, n, np.random.default_rng(seed))
    assert np.all(np.diff(d) > 0)
    assert d[0] >= near and d[-1] < near + span


def test_stratified_rejects_bad_bounds():
    with pytest.raises(ValueError):
        stratified_samples(1.0, 1.0, 4)


def test_composite_empty():
    c, w, op = composite(np.ones((5, 3)), np.zeros(5), np.linspace(0, 1, 5), 1.2)
    assert np.all(c == 0) and op == 0 and np.all(w == 0)


def test_composite_saturation():
    depths = np.array([0.0, 1.0, 2.0])
    colors = np.array([[0.3, 0.6, 0.9], [1, 0, 0], [0, 1, 0]])
    c, _, op = composite(colors, np.array([50.0, 1.0, 1.0]), depths, 3.0)
    np.testing.assert_allclose(c, colors[0], atol=1e-6)
    assert abs(op - 1) < 1e-6


def test_composite_constant_medium():
    d = stratified_samples(0.0, 1.0, 256, deterministic=True)
    c, _, _ = composite(np.tile([1.0, 0, 0], (256, 1)), np.ones(256), d, 1.0)
    np.testing.assert_allclose(c, [1 - np.exp(-1), 0, 0], atol=1e-3)


def test_composite_rejects_unsorted():
    with pytest.raises(ValueError):
        composite(np.zeros((3, 3)), np.zeros(3), [0.0, 0.5, 0.2], 1.0)


samples = st.integers(1, 24).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.floats(0, 30)),
    arrays(np.float64, (n, 3), elements=st.floats(0, 1)),
    arrays(np.float64, n, elements=st.floats(0.001, 1)),
))


@given(samples)
def test_weights_bounded_and_match_loop(data):
    sig, col, gaps = data
    depths = np.cumsum(gaps)
    far = depths[-1] + 0.3
    c, w, op = composite(col, sig, depths, far)
    assert np.all(w >= 0) and w.sum() <= 1 + 1e-12
    rc, rw = loop_composite(col, sig, depths, far)
    np.testing.assert_allclose(w, rw, atol=1e-12)
    np.testing.assert_allclose(c, rc, atol=1e-12)


@given(samples, st.floats(0, 1))
def test_zero_density_sample_is_invisible(data, frac):
    sig, col, gaps = data
    depths = np.cumsum(gaps)
    far = depths[-1] + 0.3
    c0, _, _ = composite(col, sig, depths, far)
    # splitting an interval with an extra sample of the same density leaves color unchanged only
    # for zero density; insert one inside an empty gap appended before the first sample
    d2 = np.concatenate([[depths[0] - 0.1 - frac], depths])
    c1, _, _ = composite(np.vstack([[0.5, 0.5, 0.5], col]), np.concatenate([[0.0], sig]), d2, far)
    np.testing.assert_allclose(c0, c1, atol=1e-12)


@given(samples)
def test_transmittance_telescopes(data):
    sig, col, gaps = data
    depths = np.cumsum(gaps)
    _, _, trans, delta = composite_batch(col[None], sig[None], depths[None], np.array([depths[-1] + 0.3]))
    np.testing.assert_allclose(trans[0, 1:], trans[0, :-1] * np.exp(-sig[:-1] * delta[0, :-1]), rtol=1e-12)


def test_composite_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    n = 6
    rgb = rng.random((1, n, 3))
    sig = rng.random((1, n)) * 3
    depths = np.sort(rng.random((1, n)), axis=1)
    far = np.array([1.2])
    g = rng.normal(size=(1, 3))
    _, w, tr, de = composite_batch(rgb, sig, depths, far)
    g_rgb, g_sig = composite_backward(g, rgb, sig, w, tr, de)

    def loss(r, s):
        return float(np.sum(composite_batch(r, s, depths, far)[0] * g))

    h = 1e-6
    for k in range(n):
        e = np.zeros_like(sig)
        e[0, k] = h
        fd = (loss(rgb, sig + e) - loss(rgb, sig - e)) / (2 * h)
        assert abs(fd - g_sig[0, k]) < 1e-7
        e = np.zeros_like(rgb)
        e[0, k, 1] = h
        fd = (loss(rgb + e, sig) - loss(rgb - e, sig)) / (2 * h)
        assert abs(fd - g_rgb[0, k, 1]) < 1e-7


def test_pdf_single_bin():
    w = np.zeros(8)
    w[3] = 1.0
    d = np.linspace(0, 0.875, 8)
    out = pdf_resample(w, d, 1.0, 50, np.random.default_rng(0))
    # epsilon mass elsewhere is 7e-5 per draw; 50 draws land in bin 3
    assert np.all((out >= d[3]) & (out < d[4]))
    assert np.all(np.diff(out) >= 0)


def test_pdf_uniform_frequencies():
    d = np.arange(10) / 10
    out = pdf_resample(np.ones(10), d, 1.0, 100_000, np.random.default_rng(1))
    freq = np.bincount(np.floor(out * 10).astype(int), minlength=10) / out.size
    assert np.abs(freq - 0.1).max() < 0.01


def test_pdf_zero_weights_uniform_and_empty():
    d = np.arange(4) / 4
    out = pdf_resample(np.zeros(4), d, 1.0, 4, deterministic=True)
    np.testing.assert_allclose(out, [0.125, 0.375, 0.625, 0.875])
    assert pdf_resample(np.ones(4), d, 1.0, 0).shape == (0,)


def test_pdf_batch_matches_rows():
    rng = np.random.default_rng(5)
    w = rng.random((3, 6))
    d = np.sort(rng.random((3, 6)), axis=1)
    far = np.array([1.5, 1.2, 1.1])
    batch = pdf_resample(w, d, far, 7, deterministic=True)
    for r in range(3):
        np.testing.assert_allclose(batch[r], pdf_resample(w[r], d[r], far[r], 7, deterministic=True))


def zero_field(pts, dirs, level):
    return np.full(pts.shape, 0.7), np.zeros(pts.shape[:-1])


def test_trace_zero_density_is_black():
    out = trace_rays(zero_field, np.zeros((2, 3)), np.array([[0, 0, 1.0], [0, 1.0, 0]]), 1.0, 3.0,
                     RenderConfig(8, 8), np.random.default_rng(0))
    assert np.all(out["color_coarse"] == 0) and np.all(out["color_fine"] == 0)


def test_fine_pass_uses_union_of_depths():
    out = trace_rays(zero_field, np.zeros((1, 3)), np.array([[0, 0, 1.0]]), 1.0, 3.0, RenderConfig(8, 5))
    assert out["depths_fine"].shape == (1, 13)
    assert set(out["depths_coarse"][0]) <= set(out["depths_fine"][0])


def oracle_errors(density):
    e = Emitter((0.0, 0.0, 0.0), 0.8, density, (0.9, 0.5, 0.2))
    spec = SyntheticSceneSpec(static=(e,))
    cam = ring_rig(1, 9, radius=4.0)[0]
    cfg = RenderConfig(64, 128, deterministic=True)
    errs = []
    for row in range(9):
        for col in range(9):
            ray = generate_ray(cam, row, col)
            out = trace_rays(oracle_field(spec, 0.0), ray.origin[None], ray.direction[None],
                             ray.near, ray.far, cfg)
            ref = closed_form_color([e], ray.origin, ray.direction, ray.near, ray.far)
            errs.append(np.abs(out["color_fine"][0] - ref).max())
    return np.array(errs)


def test_oracle_field_matches_closed_form_opaque():
    assert oracle_errors(20.0).max() < 2e-3


def test_oracle_field_semi_transparent_mean_error():
    # the exit boundary of a translucent sphere is only resolved at coarse spacing
    assert oracle_errors(1.0).mean() < 2e-3


@pytest.fixture(scope="module")
def small_model():
    enc = EncodingConfig(4, 2, 2)
    params = init_field(enc, 16, 4, "latent", 3, seed=2)
    return params, init_latents(3, 4, seed=3)


def test_render_ray_deterministic_and_valid(small_model):
    params, table = small_model
    ray = Ray(np.array([0, 0, -3.0]), np.array([0, 0, 1.0]), 1.0, 5.0)
    cfg = RenderConfig(8, 8, deterministic=True)
    a = render_ray(params, table.codes[1], ray, cfg)
    b = render_ray(params, table.codes[1], ray, cfg)
    assert np.array_equal(a.color_fine, b.color_fine) and np.array_equal(a.depths, b.depths)
    assert a.weights_coarse.sum() <= 1 + 1e-6 and 0 <= a.accumulated_opacity <= 1
    assert np.all(np.isfinite(a.color_coarse))


def test_render_image_integer_time_equals_row(small_model):
    params, table = small_model
    cam = make_camera(4, 4, 3.0, near=1.0, far=4.0)
    cfg = RenderConfig(8, 8, deterministic=True)
    img = render_image(params, table, 2.0, cam, cfg)
    assert img.shape == (4, 4, 3)
    ray = generate_ray(cam, 1, 2)
    out = render_ray(params, table.codes[2], ray, cfg)
    np.testing.assert_allclose(img[1, 2], out.color_fine, atol=1e-12)
    assert np.array_equal(latent_at_time(table, 2.0), table.codes[2])


def test_render_image_independent_of_chunks_and_threads(small_model):
    params, table = small_model
    cam = make_camera(5, 4, 3.0, near=1.0, far=4.0)
    cfg = RenderConfig(6, 6)
    a = render_image(params, table, 0.5, cam, cfg, seed=9, chunk_rows=1)
    b = render_image(params, table, 0.5, cam, cfg, seed=9, chunk_rows=3, threads=2)
    assert np.array_equal(a, b)
