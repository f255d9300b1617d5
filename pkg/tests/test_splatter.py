import numpy as np
import pytest
from conftest import square_camera
from gradutil import array_smooth_check
from hypothesis import given, settings
from hypothesis import strategies as st

import posegauss.tensorcore as tc
from posegauss.gaussmaps import GaussianCloud
from posegauss.splatter import (
    RasterSettings,
    bin_tiles,
    compute_cov3d,
    quat_to_rotmat,
    random_cloud,
    rasterize,
    rasterize_backward,
    rasterize_reference,
    render,
)

BG = (0.2, 0.3, 0.4)


def single(mean, scale=0.05, opacity=0.8, rgb=(1.0, 0.5, 0.25)):
    return GaussianCloud(np.array([mean], float), np.array([[1.0, 0, 0, 0]]), np.full((1, 3), scale),
                         np.array([opacity]), np.array([rgb]))


def test_rotmat_is_orthonormal_and_cov_is_rsr(rng):
    q = rng.normal(size=(5, 4))
    r = quat_to_rotmat(q).data
    np.testing.assert_allclose(r @ np.swapaxes(r, -1, -2), np.broadcast_to(np.eye(3), (5, 3, 3)), atol=1e-12)
    s = rng.uniform(0.01, 0.2, size=(5, 3))
    cov = compute_cov3d(q, s)
    cov = cov.data if hasattr(cov, "data") else cov
    ref = np.einsum("nij,nj,nkj->nik", r, s**2, r)
    np.testing.assert_allclose(cov, ref, atol=1e-14)


def test_empty_cloud_renders_background():
    cam = square_camera(16)
    out = rasterize(GaussianCloud.empty(), cam, BG)
    np.testing.assert_array_equal(out.image, np.broadcast_to(BG, (16, 16, 3)))
    assert not out.alpha.any()


def test_behind_camera_is_culled():
    cam = square_camera(16)
    out = rasterize(single([0, 0, -2.0]), cam, BG)
    np.testing.assert_array_equal(out.image, np.broadcast_to(BG, (16, 16, 3)))


def test_single_gaussian_peak_value():
    cam = square_camera(15, focal=20.0)
    out = rasterize(single([0, 0, 2.0], opacity=0.6), cam, (0.0, 0.0, 0.0))
    # the mean projects exactly onto pixel (7, 7), where alpha = opacity
    np.testing.assert_allclose(out.alpha[7, 7], 0.6, atol=1e-12)
    np.testing.assert_allclose(out.image[7, 7], 0.6 * np.array([1.0, 0.5, 0.25]), atol=1e-12)
    np.testing.assert_allclose(out.depth[7, 7], 0.6 * 2.0, atol=1e-12)


def test_front_gaussian_occludes_back():
    cam = square_camera(15, focal=20.0)
    front = single([0, 0, 2.0], opacity=0.99, rgb=(1, 0, 0))
    back = single([0, 0, 3.0], opacity=0.99, rgb=(0, 1, 0))
    both = GaussianCloud(*(np.concatenate([getattr(back, f), getattr(front, f)]) for f in
                           ("means", "quats", "scales", "opacity", "rgb")))
    px = rasterize(both, cam).image[7, 7]
    assert px[0] > 0.98 and px[1] < 0.01


@pytest.mark.parametrize("tile", [8, 16])
def test_tiled_matches_reference_small(tile):
    cam = square_camera(40)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        cloud = random_cloud(int(rng.integers(1, 120)), rng, scale=(0.01, 0.15))
        a = rasterize(cloud, cam, BG, tile=tile)
        b = rasterize_reference(cloud, cam, BG)
        assert np.abs(a.image - b.image).max() < 1e-10
        assert np.abs(a.depth - b.depth).max() < 1e-10
        np.testing.assert_allclose(a.alpha + a.transmittance, 1.0, atol=1e-12)


def test_bin_tiles_cover_every_overlap(rng):
    # a splat must be listed in every tile its bounding square touches
    mean2 = rng.uniform(0, 64, size=(30, 2))
    radius = rng.uniform(0.5, 12, size=30)
    depth = rng.uniform(1, 5, size=30)
    grid = bin_tiles(mean2, radius, depth, 64, 64, tile=16)
    for tx in range(4):
        for ty in range(4):
            listed = set(grid.tile_list(tx, ty).tolist())
            x0, y0 = tx * 16, ty * 16
            expect = {i for i in range(30)
                      if mean2[i, 0] + radius[i] >= x0 and mean2[i, 0] - radius[i] <= x0 + 15
                      and mean2[i, 1] + radius[i] >= y0 and mean2[i, 1] - radius[i] <= y0 + 15}
            assert expect <= listed
            d = depth[grid.tile_list(tx, ty)]
            assert np.all(np.diff(d) >= 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 60))
def test_conservation_and_bounds(seed, n):
    rng = np.random.default_rng(seed)
    cam = square_camera(24)
    out = rasterize(random_cloud(n, rng, scale=(0.01, 0.2)), cam, BG, tile=8)
    np.testing.assert_allclose(out.alpha + out.transmittance, 1.0, atol=1e-12)
    assert out.alpha.min() >= 0 and out.alpha.max() <= 1
    assert out.image.min() >= -1e-12 and out.image.max() <= 1 + 1e-12


def test_tiled_output_is_deterministic():
    cam = square_camera(32)
    cloud = random_cloud(200, np.random.default_rng(3))
    a, b = rasterize(cloud, cam, BG), rasterize(cloud, cam, BG)
    assert a.image.tobytes() == b.image.tobytes()


@pytest.mark.parametrize("seed", range(4))
def test_rasterize_backward_matches_differences(seed):
    rng = np.random.default_rng(seed)
    cam = square_camera(20, focal=26.0)
    c = random_cloud(6, rng, scale=(0.05, 0.2), spread=0.3)
    c.opacity = rng.uniform(0.1, 0.6, 6)
    g_img = rng.normal(size=(20, 20, 3))
    g_dep = rng.normal(size=(20, 20))
    grads = rasterize_backward(c, cam, g_img, BG, grad_depth=g_dep)
    names = ("means", "quats", "scales", "opacity", "rgb")

    def f():
        o = rasterize(c, cam, BG)
        return float((o.image * g_img).sum() + (o.depth * g_dep).sum())

    err, skipped = array_smooth_check(f, [getattr(c, n) for n in names], [grads[n] for n in names])
    assert err < 1e-4
    assert skipped < 0.05


def test_render_is_differentiable_through_tape(rng):
    cam = square_camera(12, focal=16.0)
    c = random_cloud(4, rng, scale=(0.05, 0.2), spread=0.2)
    c.opacity = rng.uniform(0.2, 0.6, 4)
    rgb = tc.param(c.rgb.copy())
    g = rng.normal(size=(12, 12, 3))
    cloud = GaussianCloud(c.means, c.quats, c.scales, c.opacity, rgb)
    # colour enters linearly, so a plain central difference is exact here
    assert tc.grad_check(lambda: tc.tsum(render(cloud, cam, BG).image * g), [rgb]) < 1e-7


def test_settings_validate():
    with pytest.raises(ValueError):
        RasterSettings(tile=0)
