import numpy as np
import pytest
from conftest import square_camera
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

import posegauss.tensorcore as tc
from posegauss.gaussmaps import (
    RAW_CHANNELS,
    GaussianCloud,
    RawGaussianMap,
    activate,
    axis_angle_to_quat,
    build_prior,
    confidence_blend,
    lift_to_gaussians,
    merge_clouds,
    read_cloud,
    write_cloud,
)
from posegauss.geometry import project


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-3, 3)))
def test_axis_angle_matches_rotation_library(r):
    q = axis_angle_to_quat(r).data
    # angles beyond pi are clamped to a half turn about the same axis
    n = np.linalg.norm(r, axis=-1, keepdims=True)
    clamped = np.where(n > np.pi, r / np.maximum(n, 1e-300) * np.pi, r)
    ref = Rotation.from_rotvec(clamped).as_quat(scalar_first=True)
    # same rotation up to the quaternion double cover
    dots = np.abs(np.sum(q * ref, axis=-1))
    np.testing.assert_allclose(dots, 1.0, atol=1e-9)


def test_axis_angle_identity_and_grad_at_origin():
    r = tc.param(np.zeros((1, 3)))
    np.testing.assert_array_equal(axis_angle_to_quat(r).data, [[1.0, 0, 0, 0]])
    with tc.Tape() as tape:
        out = tc.tsum(axis_angle_to_quat(r))
    tc.backprop(tape, output=out)
    assert np.all(np.isfinite(r.grad))


def test_axis_angle_grad(rng):
    r = tc.param(rng.uniform(-1.5, 1.5, size=(5, 3)))
    g = rng.normal(size=(5, 4))
    assert tc.grad_check(lambda: tc.tsum(axis_angle_to_quat(r) * g), [r]) < 1e-6


def _raw(rng, h=4, w=5):
    return tc.param(rng.normal(size=(h, w, RAW_CHANNELS)))


def test_activation_ranges(rng):
    g = activate(RawGaussianMap.split(_raw(rng)))
    assert (g.scale.data > 0).all()
    np.testing.assert_allclose(np.linalg.norm(g.rotation.data, axis=-1), 1.0, atol=1e-12)
    assert ((g.opacity.data > 0) & (g.opacity.data < 1)).all()


def test_split_rejects_short_maps():
    with pytest.raises(ValueError):
        RawGaussianMap.split(np.zeros((2, 2, 5)))


def test_prior_footprint_is_one_pixel():
    cam = square_camera(16)
    depth = np.full((8, 8), 2.0)
    prior = build_prior(depth, np.ones((8, 8)), cam)
    fx8 = cam.resized(8, 8).intrinsics.fx
    np.testing.assert_allclose(prior.scale.data * fx8 / 2.0, 1.0)
    with pytest.raises(ValueError):
        build_prior(np.zeros((8, 8)), np.ones((8, 8)), cam)


def test_confidence_blend_endpoints(rng):
    cam = square_camera(8)
    dec = activate(RawGaussianMap.split(_raw(rng, 8, 8)))
    prior = build_prior(np.full((8, 8), 2.0), np.ones((8, 8)), cam)
    hi = confidence_blend(dec, prior, np.full((8, 8, 1), 50.0))
    lo = confidence_blend(dec, prior, np.full((8, 8, 1), -50.0))
    np.testing.assert_allclose(hi.scale.data, dec.scale.data, atol=1e-15)
    np.testing.assert_allclose(lo.scale.data, prior.scale.data, atol=1e-15)
    np.testing.assert_allclose(lo.rotation.data[..., 0], 1.0)


def test_confidence_blend_grad(rng):
    cam = square_camera(6)
    raw = _raw(rng, 6, 6)
    depth = tc.param(rng.uniform(1.5, 2.5, size=(6, 6)))
    g = rng.normal(size=(6, 6, 3))

    def f():
        dec = activate(RawGaussianMap.split(raw))
        prior = build_prior(depth, np.ones((6, 6)), cam)
        return tc.tsum(confidence_blend(dec, prior, raw[..., 8:9]).scale * g)

    assert tc.grad_check(f, [raw, depth]) < 1e-6


def test_lift_places_means_on_pixel_rays(rng):
    cam = square_camera(16)
    depth = rng.uniform(1.5, 3.0, size=(8, 8))
    mask = rng.uniform(size=(8, 8)) > 0.4
    img = rng.uniform(size=(8, 8, 3))
    gmap = activate(RawGaussianMap.split(_raw(rng, 8, 8)))
    cloud = lift_to_gaussians(gmap, depth, mask, img, cam)
    assert len(cloud) == mask.sum()
    proj = project(cloud.means.data, cam.resized(8, 8))
    ys, xs = np.nonzero(mask)
    np.testing.assert_allclose(proj.pixel, np.stack([xs, ys], -1), atol=1e-9)
    np.testing.assert_allclose(proj.depth, depth[mask], atol=1e-12)
    np.testing.assert_allclose(cloud.rgb.data, img[mask])
    expect_op = (gmap.opacity.data * gmap.aux.data)[mask][:, 0]
    np.testing.assert_allclose(cloud.opacity.data, expect_op)


def test_lift_empty_mask_gives_empty_cloud(rng):
    gmap = activate(RawGaussianMap.split(_raw(rng, 4, 4)))
    cloud = lift_to_gaussians(gmap, np.ones((4, 4)), np.zeros((4, 4)), np.zeros((4, 4, 3)), square_camera(4))
    assert len(cloud) == 0
    assert len(merge_clouds([cloud, cloud])) == 0


def test_cloud_file_roundtrip(tmp_path, rng):
    n = 7
    c = GaussianCloud(rng.normal(size=(n, 3)), rng.normal(size=(n, 4)), rng.uniform(size=(n, 3)),
                      rng.uniform(size=n), rng.uniform(size=(n, 3)))
    p = tmp_path / "c.pgcl"
    write_cloud(p, c)
    back = read_cloud(p)
    for f in ("means", "quats", "scales", "opacity", "rgb"):
        np.testing.assert_array_equal(getattr(back, f), getattr(c, f).astype(np.float32))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(ValueError, match="truncated"):
        read_cloud(p)
