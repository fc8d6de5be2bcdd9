"""Residual-parallax-coherence metric: rectification, pose baselines, robust
masking, TV-L1 flow, Spearman correlation, and the assembled score.

Oracles: analytic plane projection for rectification (linear fields resample
exactly), hand-constructed rank statistics and scipy's independent rank
implementations for Spearman, synthetic integer shifts for flow.
"""

import itertools

import numpy as np
import pytest
import scipy.stats
from scipy.ndimage import gaussian_filter
from scipy.stats import rankdata

from neumat import render_reference_sequence
from neumat.errors import InputError
from neumat.renderer import CameraPose, PointLight, frame_samples
from neumat.rpc import (
    RectifiedFrame,
    baseline,
    bilateral_filter,
    luminance,
    rectify,
    robust_mask,
    rpc_score,
    spearman,
    tvl1_flow,
)
from neumat.synthref import make_test_materials
from neumat.trajectory import (
    Kind,
    Phase,
    Trajectory,
    make_gonio_trajectory,
    orbit_position,
    top_down_camera,
)


def uv_encoding_image(cam):
    """Image whose RGB stores the plane-hit coordinates (ux, uy, 0) for every
    pixel ray, including those landing outside the unit sample (so bilinear
    taps at the sample border still see the exact linear field)."""
    w, h = cam.resolution
    right, up, forward = cam.basis()
    half = np.tan(np.deg2rad(cam.vertical_fov) / 2.0)
    aspect = w / h
    xs = (((np.arange(w) + 0.5) / w) * 2.0 - 1.0) * half * aspect
    ys = (1.0 - ((np.arange(h) + 0.5) / h) * 2.0) * half
    X, Y = np.meshgrid(xs, ys)
    dirs = X[..., None] * right + Y[..., None] * up + forward
    t = -cam.position[2] / dirs[..., 2]
    hit = np.asarray(cam.position) + t[..., None] * dirs
    img = np.zeros((h, w, 3), np.float32)
    img[..., 0] = hit[..., 0] + 0.5
    img[..., 1] = hit[..., 1] + 0.5
    # cross-check the convention against the renderer on in-sample pixels
    rs = frame_samples(cam, PointLight((0.0, 0.0, 2.0)))
    flat = img.reshape(-1, 3)
    assert np.abs(flat[rs.valid, :2] - rs.u[rs.valid]).max() < 1e-6
    return img


def textured(size=128, seed=0, sigma=2.0):
    rng = np.random.default_rng(seed)
    return gaussian_filter(rng.random((size, size)), sigma, mode="wrap")


def phase2_subset(count, resolution, start=41):
    base = make_gonio_trajectory(resolution=resolution)
    frames = base.frames[start : start + count]
    assert all(f.phase is Phase.CAMERA_MOTION for f in frames)
    return Trajectory(frames, Kind.CUSTOM)


# ---------------------------------------------------------------------------
# rectify


def test_rectify_recovers_plane_coordinates_topdown():
    cam = top_down_camera(1.6, 96)
    rect = rectify(uv_encoding_image(cam), cam)
    r = rect.image.shape[0]
    cols = (np.arange(r) + 0.5) / r
    rows = 1.0 - (np.arange(r) + 0.5) / r
    ux, uy = np.meshgrid(cols, rows)
    m = rect.mask
    assert np.abs(rect.image[..., 0][m] - ux[m]).max() < 1e-5
    assert np.abs(rect.image[..., 1][m] - uy[m]).max() < 1e-5


def test_rectify_recovers_plane_coordinates_oblique():
    frame = make_gonio_trajectory(resolution=96).frames[55]
    cam = frame.camera
    rect = rectify(uv_encoding_image(cam), cam, resolution=64)
    r = rect.image.shape[0]
    cols = (np.arange(r) + 0.5) / r
    rows = 1.0 - (np.arange(r) + 0.5) / r
    ux, uy = np.meshgrid(cols, rows)
    m = rect.mask
    assert m.sum() > 0.5 * m.size
    assert np.abs(rect.image[..., 0][m] - ux[m]).max() < 2e-3
    assert np.abs(rect.image[..., 1][m] - uy[m]).max() < 2e-3


def test_rectify_exact_framing_is_identity():
    # camera whose view spans exactly the unit sample: rectifying at the
    # source resolution is an identity resample of a smooth image
    n = 96
    d = 0.5 / np.tan(np.deg2rad(22.5))
    cam = top_down_camera(d, n)
    cols = (np.arange(n) + 0.5) / n
    rows = 1.0 - (np.arange(n) + 0.5) / n
    ux, uy = np.meshgrid(cols, rows)
    smooth = 0.4 + 0.3 * np.sin(2 * np.pi * ux) * np.cos(2 * np.pi * uy)
    src = np.repeat(smooth[..., None], 3, axis=2).astype(np.float32)
    rect = rectify(src, cam, resolution=n)
    m = rect.mask
    # boundary texels project to px = 0 up to rounding and may fall either
    # side of the validity cut; the interior must be fully covered
    assert m[1:-1, 1:-1].all()
    assert m.mean() > 0.95
    assert np.abs(rect.image[m] - src[m]).max() <= 2.0 / 255.0


def test_rectify_mask_coverage_topdown():
    cam = top_down_camera(1.6, 128)
    rect = rectify(np.zeros((128, 128, 3), np.float32), cam)
    assert rect.mask.mean() >= 0.99


def test_rectify_flat_lambertian_null_flow():
    # phase 2 keeps the light fixed: a flat Lambertian sample shades
    # identically from any azimuth, so rectified frames must not "move"
    mats = make_test_materials(seed=0, resolution=64)
    traj = phase2_subset(2, 128, start=41)
    imgs = render_reference_sequence(mats["flat-lambert"], traj)
    rects = [rectify(img, f.camera) for img, f in zip(imgs, traj.frames)]
    m = rects[0].mask & rects[1].mask
    flow = tvl1_flow(luminance(rects[0].image), luminance(rects[1].image))
    mag = np.hypot(flow[..., 0], flow[..., 1])
    assert np.median(mag[m]) <= 0.2


def test_rectify_degenerate_pose_fully_masked():
    cam = CameraPose(position=(0.0, 0.0, 1.6), look_at=(0.0, 0.0, 3.0),
                     up=(0.0, 1.0, 0.0), vertical_fov=45.0, resolution=(32, 32))
    rect = rectify(np.zeros((32, 32, 3), np.float32), cam)
    assert not rect.mask.any()


def test_rectify_rejects_non_rgb():
    cam = top_down_camera(1.6, 16)
    with pytest.raises(InputError):
        rectify(np.zeros((16, 16), np.float32), cam)


# ---------------------------------------------------------------------------
# baseline


def orbit_camera(azimuth, radius, elevation_deg, resolution=16):
    return CameraPose(
        position=orbit_position(azimuth, radius, elevation_deg),
        look_at=(0.0, 0.0, 0.0),
        up=(0.0, 0.0, 1.0),
        vertical_fov=45.0,
        resolution=(resolution, resolution),
    )


def test_baseline_identical_poses_is_zero():
    cam = orbit_camera(0.3, 1.6, 56.31)
    assert baseline(cam, cam) == pytest.approx(0.0, abs=1e-6)


def test_baseline_pure_translation():
    a = CameraPose(position=(0.0, 0.0, 1.6), look_at=(0.0, 0.0, 0.0),
                   up=(0.0, 1.0, 0.0), vertical_fov=45.0, resolution=(8, 8))
    b = CameraPose(position=(0.5, 0.0, 1.6), look_at=(0.5, 0.0, 0.0),
                   up=(0.0, 1.0, 0.0), vertical_fov=45.0, resolution=(8, 8))
    assert baseline(a, b, s=1.0) == pytest.approx(0.5, abs=1e-9)
    assert baseline(a, b, s=2.0) == pytest.approx(0.25, abs=1e-9)


def test_baseline_three_four_five():
    # orbit step of 0.3 rad rotates the whole camera frame by exactly 0.3;
    # radius chosen so the chord is 0.4: b = hypot(0.3, 0.4) = 0.5
    radius = 0.2 / np.sin(0.15)
    a = orbit_camera(0.0, radius, 0.0)
    b = orbit_camera(0.3, radius, 0.0)
    assert np.linalg.norm(np.asarray(a.position) - np.asarray(b.position)) == pytest.approx(0.4, rel=1e-9)
    assert baseline(a, b, s=1.0) == pytest.approx(0.5, rel=1e-9)


def test_baseline_symmetry_and_validation():
    a = orbit_camera(0.1, 1.6, 40.0)
    b = orbit_camera(1.4, 2.0, 56.31)
    assert baseline(a, b) == pytest.approx(baseline(b, a), rel=1e-12)
    assert baseline(a, b) >= 0.0
    with pytest.raises(InputError):
        baseline(a, b, s=0.0)


# ---------------------------------------------------------------------------
# bilateral filter + robust mask


def test_bilateral_preserves_constants():
    lum = np.full((32, 32), 0.37)
    mask = np.ones((32, 32), bool)
    out = bilateral_filter(lum, mask)
    assert np.allclose(out, 0.37, atol=1e-12)


def test_bilateral_ignores_values_outside_mask():
    rng = np.random.default_rng(0)
    lum = rng.random((24, 24))
    mask = np.zeros((24, 24), bool)
    mask[4:20, 4:20] = True
    poisoned = lum.copy()
    poisoned[~mask] = 1e6
    a = bilateral_filter(lum, mask)
    b = bilateral_filter(poisoned, mask)
    assert np.allclose(a[mask], b[mask], atol=1e-9)


def test_bilateral_output_within_input_range():
    rng = np.random.default_rng(1)
    lum = rng.random((32, 32))
    mask = np.ones((32, 32), bool)
    out = bilateral_filter(lum, mask)
    assert out.min() >= lum.min() - 1e-12
    assert out.max() <= lum.max() + 1e-12


def test_robust_mask_constant_image_collapses():
    rect = RectifiedFrame(np.full((32, 32, 3), 0.5, np.float32),
                          np.ones((32, 32), bool))
    assert robust_mask(rect).sum() == 0


def test_robust_mask_excludes_dark_outlier_band():
    # 20% dark columns, 80% mid with a slight ramp: the 10th percentile
    # lands inside the dark mass, so interior dark texels must be excluded
    h, w = 60, 60
    img = np.empty((h, w))
    img[:, :12] = 0.1
    ramp = np.linspace(0.6, 0.62, w - 12)
    img[:, 12:] = ramp[None, :]
    rect = RectifiedFrame(np.repeat(img[..., None], 3, axis=2).astype(np.float32),
                          np.ones((h, w), bool))
    mask = robust_mask(rect)
    dark_interior = np.zeros((h, w), bool)
    dark_interior[8 : h - 8, :4] = True
    assert not mask[dark_interior].any()
    mid_interior = np.zeros((h, w), bool)
    mid_interior[8 : h - 8, 20 : w - 8] = True
    assert mask[mid_interior].mean() > 0.6


def test_robust_mask_subset_of_validity():
    rng = np.random.default_rng(2)
    img = rng.random((40, 40, 3)).astype(np.float32)
    validity = np.zeros((40, 40), bool)
    yy, xx = np.mgrid[0:40, 0:40]
    validity[(yy - 20) ** 2 + (xx - 20) ** 2 < 15**2] = True
    mask = robust_mask(RectifiedFrame(img, validity))
    assert np.all(validity[mask])
    assert 0 < mask.sum() < validity.sum()


def test_robust_mask_rejects_empty_validity():
    rect = RectifiedFrame(np.zeros((8, 8, 3), np.float32), np.zeros((8, 8), bool))
    with pytest.raises(InputError):
        robust_mask(rect)


# ---------------------------------------------------------------------------
# TV-L1 flow


def test_tvl1_identical_images_zero_flow():
    img = textured(96, seed=3)
    flow = tvl1_flow(img, img)
    mag = np.hypot(flow[..., 0], flow[..., 1])
    assert np.median(mag) <= 1e-3


def test_tvl1_recovers_integer_shift():
    img = textured(128, seed=4)
    shifted = np.roll(img, 3, axis=1)
    flow = tvl1_flow(img, shifted)
    interior = flow[16:-16, 16:-16]
    assert 2.5 <= np.median(interior[..., 0]) <= 3.5
    assert 2.5 <= np.median(np.hypot(interior[..., 0], interior[..., 1])) <= 3.5
    assert np.abs(np.median(interior[..., 1])) <= 0.5


def test_tvl1_vertical_shift():
    img = textured(128, seed=5)
    shifted = np.roll(img, -2, axis=0)
    flow = tvl1_flow(img, shifted)
    interior = flow[16:-16, 16:-16]
    assert -2.5 <= np.median(interior[..., 1]) <= -1.5


def test_tvl1_forward_backward_antisymmetry():
    img = textured(128, seed=6)
    shifted = np.roll(img, 2, axis=1)
    fwd = tvl1_flow(img, shifted)
    bwd = tvl1_flow(shifted, img)
    s = fwd + bwd
    mag = np.hypot(s[..., 0], s[..., 1])[16:-16, 16:-16]
    assert np.median(mag) <= 0.5


def test_tvl1_deterministic():
    img = textured(64, seed=7)
    shifted = np.roll(img, 1, axis=1)
    assert np.array_equal(tvl1_flow(img, shifted), tvl1_flow(img, shifted))


def test_tvl1_rejects_bad_inputs():
    with pytest.raises(InputError):
        tvl1_flow(np.zeros((16, 16)), np.zeros((16, 18)))
    with pytest.raises(InputError):
        tvl1_flow(np.zeros((16, 16, 3)), np.zeros((16, 16, 3)))


# ---------------------------------------------------------------------------
# Spearman


def brute_force_spearman(x, y):
    rx = rankdata(x)  # average-rank ties
    ry = rankdata(y)
    return float(np.corrcoef(rx, ry)[0, 1])


def test_spearman_exhaustive_permutations():
    base = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    x = np.arange(1.0, 6.0)
    for perm in itertools.permutations(base):
        y = np.array(perm)
        ours = spearman(x, y)
        assert ours == pytest.approx(brute_force_spearman(x, y), abs=1e-12)
        d = x - y
        closed_form = 1.0 - 6.0 * np.sum(d * d) / (5 * 24)
        assert ours == pytest.approx(closed_form, abs=1e-12)


def test_spearman_random_tied_lists():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(5, 30))
        x = rng.integers(0, 4, n).astype(float)
        y = rng.integers(0, 4, n).astype(float)
        if np.all(x == x[0]) or np.all(y == y[0]):
            continue
        ours = spearman(x, y)
        ref = scipy.stats.spearmanr(x, y).statistic
        assert ours == pytest.approx(ref, abs=1e-10)
        assert ours == pytest.approx(brute_force_spearman(x, y), abs=1e-10)


def test_spearman_constant_input_returns_zero():
    assert spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]) == 0.0


def test_spearman_antisymmetry_under_negation():
    rng = np.random.default_rng(1)
    x = rng.random(20)
    y = rng.random(20)
    assert spearman(x, y) == pytest.approx(-spearman(x, -np.asarray(y)), abs=1e-12)


def test_spearman_validation():
    with pytest.raises(InputError):
        spearman([1.0], [2.0])
    with pytest.raises(InputError):
        spearman([1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(InputError):
        spearman([1.0, np.nan, 3.0], [1.0, 2.0, 3.0])


def test_monotone_pairs_hit_loss_extremes():
    b = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
    m_up = b * 2.0 + 0.05
    m_down = 1.0 - b
    assert 1.0 - max(0.0, spearman(b, m_up)) == pytest.approx(0.0, abs=1e-12)
    assert 1.0 - max(0.0, spearman(b, m_down)) == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# assembled score


@pytest.fixture(scope="module")
def ridge_sequence():
    mats = make_test_materials(seed=0, resolution=64)
    traj = phase2_subset(8, 64, start=41)
    imgs = render_reference_sequence(mats["sine-ridges"], traj)
    return imgs, traj


def test_rpc_score_report_structure(ridge_sequence):
    imgs, traj = ridge_sequence
    report = rpc_score(imgs, traj, lags=(1, 2))
    assert len(report.samples) + report.dropped_pairs == 7 + 6
    for s in report.samples:
        assert s.b >= 0.0 and s.m >= 0.0
        assert 0 <= s.t < s.t + s.lag < 8
        assert s.lag in (1, 2)
    assert 0.0 <= report.loss <= 1.0
    b = np.array([s.b for s in report.samples])
    m = np.array([s.m for s in report.samples])
    assert report.rho == pytest.approx(spearman(b, m), abs=1e-12)
    assert report.loss == pytest.approx(1.0 - max(0.0, report.rho), abs=1e-12)
    d = report.to_dict()
    assert d["schema"] == 1
    assert d["lags"] == [1, 2]
    assert len(d["pairs"]) == len(report.samples)
    assert isinstance(d["degenerate_flag"], bool)


def test_rpc_score_ignores_light_motion_frames(ridge_sequence):
    # a full capture sequence starts with 41 light-orbit frames; the score
    # must come from the camera-motion frames alone, so prepending phase-1
    # frames with arbitrary pixel content cannot change anything
    imgs, traj = ridge_sequence
    base = make_gonio_trajectory(resolution=64)
    mixed_frames = base.frames[:3] + list(traj.frames)
    rng = np.random.default_rng(5)
    garbage = [rng.random((64, 64, 3)).astype(np.float32) for _ in range(3)]
    mixed = Trajectory(mixed_frames, Kind.CUSTOM)
    r_pure = rpc_score(imgs, traj, lags=(1, 2))
    r_mixed = rpc_score(garbage + list(imgs), mixed, lags=(1, 2))
    assert r_mixed.loss == r_pure.loss
    assert [(s.t, s.lag, s.b, s.m) for s in r_mixed.samples] == \
           [(s.t, s.lag, s.b, s.m) for s in r_pure.samples]


def test_rpc_score_brightness_scale_invariance(ridge_sequence):
    imgs, traj = ridge_sequence
    r1 = rpc_score(imgs, traj, lags=(1, 2))
    r2 = rpc_score([img * 2.0 for img in imgs], traj, lags=(1, 2))
    r3 = rpc_score([img * 0.5 for img in imgs], traj, lags=(1, 2))
    assert abs(r2.loss - r1.loss) <= 0.05
    assert abs(r3.loss - r1.loss) <= 0.05


def test_rpc_score_thread_count_invariant(ridge_sequence):
    imgs, traj = ridge_sequence
    r1 = rpc_score(imgs, traj, lags=(1, 2), threads=1)
    r2 = rpc_score(imgs, traj, lags=(1, 2), threads=4)
    assert r1.loss == r2.loss
    assert [(s.t, s.lag, s.b, s.m) for s in r1.samples] == \
           [(s.t, s.lag, s.b, s.m) for s in r2.samples]


def test_rpc_score_flat_sequence_degenerate_flag():
    mats = make_test_materials(seed=0, resolution=64)
    traj = phase2_subset(8, 64, start=41)
    imgs = render_reference_sequence(mats["flat-lambert"], traj)
    report = rpc_score(imgs, traj, lags=(1, 2))
    assert report.degenerate is True
    assert max(s.m for s in report.samples) < 0.3


def test_rpc_score_rejects_too_few_pairs():
    traj = phase2_subset(3, 32, start=41)
    rng = np.random.default_rng(0)
    imgs = [np.clip(gaussian_filter(rng.random((32, 32, 3)), 2), 0.05, 1).astype(np.float32)
            for _ in range(3)]
    with pytest.raises(InputError, match="pairs"):
        rpc_score(imgs, traj, lags=(1,))


def test_rpc_score_counts_mask_collapsed_pairs_as_dropped():
    traj = phase2_subset(6, 32, start=41)
    imgs = [np.full((32, 32, 3), 0.5, np.float32) for _ in range(6)]
    with pytest.raises(InputError, match="dropped"):
        rpc_score(imgs, traj, lags=(1,))


def test_rpc_score_validation():
    traj = phase2_subset(6, 32, start=41)
    imgs = [np.zeros((32, 32, 3), np.float32)] * 6
    with pytest.raises(InputError, match="trajectory"):
        rpc_score(imgs, None)
    with pytest.raises(InputError, match="images"):
        rpc_score(imgs[:5], traj)
    with pytest.raises(InputError, match="lags"):
        rpc_score(imgs, traj, lags=(0, 1))
    topdown = Trajectory(make_gonio_trajectory(resolution=32).frames[:6], Kind.CUSTOM)
    with pytest.raises(InputError, match="phase 2"):
        rpc_score(imgs, topdown)


def test_rpc_score_cache_round_trip(ridge_sequence, tmp_path, monkeypatch):
    imgs, traj = ridge_sequence
    monkeypatch.setenv("NEUMAT_CACHE", str(tmp_path))
    r1 = rpc_score(imgs, traj, lags=(1,), cache_key="ridge8")
    assert (tmp_path / "rect_ridge8.npz").exists()
    r2 = rpc_score(imgs, traj, lags=(1,), cache_key="ridge8")
    assert r1.loss == r2.loss
    # corrupt cache falls back to recomputation rather than failing
    (tmp_path / "rect_ridge8.npz").write_bytes(b"garbage")
    r3 = rpc_score(imgs, traj, lags=(1,), cache_key="ridge8")
    assert r3.loss == pytest.approx(r1.loss, abs=1e-12)
