import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

import oracles
from ricpr.epnp import PnPError, solve_epnp
from ricpr.pose import (
    CameraModel,
    FacePose,
    MeanShape3D,
    PoseError,
    PoseInitializer,
    align_to_fiducials,
    estimate_pose,
    fiducial_mean_shape,
    format_mean_shape,
    frontal_variants,
    load_mean_shape,
    parse_mean_shape,
    pose_init_shapes,
    project_points,
    project_shape,
    rotation_angle_between,
)
from ricpr.shapes import AnnotatedShape, FaceBox, FiducialFive

BOX = FaceBox(100, 80, 200, 200)
CAM = CameraModel.for_box(BOX)
DEPTH = 2.5  # model units; the mean shapes use inter-pupil distance 1


@pytest.fixture(scope="module")
def mean5(mean29):
    return fiducial_mean_shape(mean29)[0]


def _fiducials(mean5, rvec, t=(0.0, 0.0, DEPTH)):
    pts = oracles.pinhole(mean5.points.tolist(), list(rvec), list(t), CAM.focal, CAM.cx, CAM.cy)
    return FiducialFive(np.array(pts))


def test_bundled_mean_shapes(mean29):
    assert mean29.arity == 29
    np.testing.assert_allclose(mean29.points.mean(axis=0), 0, atol=1e-12)
    m5 = load_mean_shape(arity=5)
    f5, _ = fiducial_mean_shape(mean29)
    np.testing.assert_allclose(m5.points, f5.points, atol=1e-12)
    assert m5.ids == f5.ids


def test_mean_shape_text_round_trip(mean29):
    back = parse_mean_shape(format_mean_shape(mean29))
    assert back.ids == mean29.ids
    np.testing.assert_allclose(back.points, mean29.points, atol=1e-12)


def test_mean_shape_format_errors(mean29):
    text = format_mean_shape(mean29)
    with pytest.raises(PoseError, match="newer"):
        parse_mean_shape(text.replace("ricpr-mean-shape 1", "ricpr-mean-shape 9"))
    with pytest.raises(PoseError, match="arity"):
        parse_mean_shape(text.replace("arity 29", "arity 28"))
    with pytest.raises(PoseError):
        parse_mean_shape("hello")


def test_mean_shape_invariants():
    with pytest.raises(PoseError):
        MeanShape3D(np.ones((5, 3)))  # centroid off the origin
    with pytest.raises(PoseError):
        MeanShape3D.centered(np.zeros((6, 3)))


def test_identity_pose_round_trip(mean5):
    pose = estimate_pose(mean5, _fiducials(mean5, (0, 0, 0)), CAM)
    assert np.linalg.norm(pose.rotation) < 1e-3
    np.testing.assert_allclose(pose.translation, [0, 0, DEPTH], atol=1e-6)
    assert not pose.warning


def test_known_rotation_vector(mean5):
    rvec = (0.3, -0.2, 0.1)
    pose = estimate_pose(mean5, _fiducials(mean5, rvec), CAM)
    assert rotation_angle_between(pose.rotation, np.array(rvec)) < 1e-3


def test_twenty_degree_yaw(mean5):
    pose = estimate_pose(mean5, _fiducials(mean5, (0, np.radians(20), 0)), CAM)
    yaw = np.degrees(Rotation.from_rotvec(pose.rotation).as_euler("yxz")[0])
    assert yaw == pytest.approx(20.0, abs=0.5)


def test_collinear_and_coincident_fiducials_are_errors(mean5):
    line = np.array([[0, 0], [1, 1], [2, 2], [3, 3], [4, 4.0]]) * 10 + 100
    with pytest.raises(PoseError):
        estimate_pose(mean5, FiducialFive(line), CAM)
    same = np.array([[100, 100], [101, 100], [100, 100], [100, 100], [100, 100.0]])
    with pytest.raises(PoseError):
        estimate_pose(mean5, FiducialFive(same), CAM)


def test_large_residual_sets_warning(mean5):
    # a face whose mouth sits above the eyes is not a rigid view of the mean shape
    pts = np.array([[150, 200], [250, 200], [200, 170], [140, 120], [260, 120.0]])
    assert estimate_pose(mean5, FiducialFive(pts), CAM).warning


def test_pose_needs_five_points(mean29):
    with pytest.raises(PoseError):
        estimate_pose(mean29, _fiducials(fiducial_mean_shape(mean29)[0], (0, 0, 0)), CAM)


rotations = st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: 1e-3 < np.linalg.norm(v)).map(
    lambda v: np.array(v) / np.linalg.norm(v)
)


@given(rotations, st.floats(0, np.radians(45)), st.floats(0.2, 5.0))
def test_rotation_is_invariant_to_model_scale(mean5, axis, angle, s):
    rvec = axis * angle
    fid = _fiducials(mean5, rvec)
    base = estimate_pose(mean5, fid, CAM)
    scaled = estimate_pose(MeanShape3D(mean5.points * s, mean5.ids), fid, CAM)
    assert rotation_angle_between(base.rotation, scaled.rotation) < 1e-6
    np.testing.assert_allclose(scaled.translation, base.translation * s, rtol=1e-6, atol=1e-9)


@given(rotations, st.floats(0, np.radians(45)), st.integers(0, 2**32 - 1))
def test_epnp_exact_on_random_clouds(axis, angle, seed):
    rng = np.random.default_rng(seed)
    pw = rng.normal(size=(8, 3))
    r = Rotation.from_rotvec(axis * angle).as_matrix()
    t = np.array([0.1, -0.2, 8.0])
    uv = np.array(oracles.pinhole(pw.tolist(), list(axis * angle), list(t), 500.0, 320.0, 240.0))
    sol = solve_epnp(pw, uv, np.array([[500.0, 0, 320], [0, 500, 240], [0, 0, 1]]))
    assert np.linalg.norm(Rotation.from_matrix(sol.rotation @ r.T).as_rotvec()) < 1e-6
    np.testing.assert_allclose(sol.translation, t, atol=1e-6)


def test_epnp_rejects_coplanar_objects():
    pw = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0.5, 0.3, 0.0]])
    uv = np.array([[0, 0], [1, 0], [0, 1], [1, 1], [0.5, 0.2]]) * 50
    with pytest.raises(PnPError):
        solve_epnp(pw, uv, CAM.matrix)


def _pose(rvec, t=(0, 0, DEPTH)):
    return FacePose(np.array(rvec, dtype=float), np.array(t, dtype=float), CAM)


def _procrustes_rms(src, dst):
    """Complex least squares dst ~ a*src + b solved by lstsq."""
    z = src[:, 0] + 1j * src[:, 1]
    w = dst[:, 0] + 1j * dst[:, 1]
    a_mat = np.column_stack([z, np.ones_like(z)])
    coef, *_ = np.linalg.lstsq(a_mat, w, rcond=None)
    return float(np.sqrt(np.mean(np.abs(a_mat @ coef - w) ** 2)))


def test_frontal_projection_is_similarity_of_mean_shape(mean29, mean5):
    fid = _fiducials(mean5, (0, 0, 0))
    pose = estimate_pose(mean5, fid, CAM).shifted_origin(fiducial_mean_shape(mean29)[1])
    out = project_shape(mean29, pose, BOX.scaled(3.0), fid, rng=np.random.default_rng(0))
    frontal = np.array(oracles.pinhole(mean29.points.tolist(), [0, 0, 0], list(pose.translation), CAM.focal, CAM.cx, CAM.cy))
    assert _procrustes_rms(frontal, out.points) < 1e-6


def test_roll_rotates_frontal_projection_about_principal_point(mean29):
    roll = np.radians(10)
    frontal = project_points(mean29.points, _pose((0, 0, 0)))
    rolled = project_points(mean29.points, _pose((0, 0, roll)))
    c = np.array([CAM.cx, CAM.cy])
    rot = np.array([[np.cos(roll), -np.sin(roll)], [np.sin(roll), np.cos(roll)]])
    np.testing.assert_allclose(rolled, (frontal - c) @ rot.T + c, atol=1e-9)


def test_fiducial_alignment_matches_procrustes_oracle(mean29):
    rng = np.random.default_rng(3)
    proj = project_points(mean29.points, _pose((0.1, 0.3, -0.1)))
    fid = FiducialFive(np.array([[150, 150], [230, 152], [191, 190], [160, 230], [222, 231.0]]) + rng.normal(size=(5, 2)))
    aligned, rms = align_to_fiducials(proj, fid)
    src = proj[[16, 17, 20, 22, 23]]
    assert rms == pytest.approx(_procrustes_rms(src, fid.points), abs=1e-9)


def test_project_shape_clamps_to_enlarged_box(mean29, mean5):
    fid = _fiducials(mean5, (0.2, 0.4, 0.1))
    pose = estimate_pose(mean5, fid, CAM).shifted_origin(fiducial_mean_shape(mean29)[1])
    small = FaceBox(170, 150, 60, 60)
    out = project_shape(mean29, pose, small, fid, rng=np.random.default_rng(0))
    lim = small.scaled(1.2)
    assert np.all(out.points[:, 0] >= lim.x) and np.all(out.points[:, 0] <= lim.x + lim.width)
    assert np.all(out.points[:, 1] >= lim.y) and np.all(out.points[:, 1] <= lim.y + lim.height)
    assert out.points.shape == (29, 2) and np.all(np.isfinite(out.points))


def test_behind_camera_is_an_error(mean29):
    with pytest.raises(PoseError):
        project_points(mean29.points, _pose((0, 0, 0), (0, 0, -3)))


def test_random_occlusion_rate(mean29, mean5):
    fid = _fiducials(mean5, (0, 0, 0))
    pose = estimate_pose(mean5, fid, CAM).shifted_origin(fiducial_mean_shape(mean29)[1])
    rng = np.random.default_rng(0)
    flags = np.stack([project_shape(mean29, pose, BOX, fid, rng=rng).occluded for _ in range(400)])
    assert flags.mean() == pytest.approx(0.23, abs=0.01)


def _orthographic_px(shape3d, scale=80.0, shift=(200.0, 180.0)):
    return AnnotatedShape(shape3d.points[:, :2] * scale + shift)


def test_frontal_variant_fixed_point(mean29):
    (v,) = frontal_variants([_orthographic_px(mean29)], mean29)
    np.testing.assert_allclose(v.points, mean29.points, atol=1e-9)


def test_frontal_variant_scale_invariance(mean29):
    (v,) = frontal_variants([_orthographic_px(mean29, scale=80.0 * 1.1)], mean29)
    np.testing.assert_allclose(v.points, mean29.points, atol=1e-9)


def test_two_frontal_shapes_give_two_variants(mean29):
    rng = np.random.default_rng(0)
    a = _orthographic_px(mean29)
    b = AnnotatedShape(a.points + rng.normal(scale=2.0, size=(29, 2)))
    va, vb = frontal_variants([a, b], mean29)
    assert not np.allclose(va.points, vb.points)
    np.testing.assert_allclose(va.points[:, 2], mean29.points[:, 2], atol=1e-12)
    np.testing.assert_allclose(vb.points[:, 2], mean29.points[:, 2], atol=1e-12)
    np.testing.assert_allclose(va.points.mean(axis=0), 0, atol=1e-12)


def test_empty_frontal_set_gives_mean(mean29):
    assert frontal_variants([], mean29) == [mean29]


def test_single_mean_variant_gives_one_shape(mean29, mean5):
    fid = _fiducials(mean5, (0.1, 0.2, 0.0))
    out = pose_init_shapes(BOX, fid, [mean29], 1, np.random.default_rng(5))
    pose = estimate_pose(mean5, fid, CAM).shifted_origin(fiducial_mean_shape(mean29)[1])
    want = project_shape(mean29, pose, BOX, fid, rng=np.random.default_rng(5))
    assert len(out) == 1
    np.testing.assert_allclose(out[0].points, want.points, atol=1e-9)


def test_pose_init_is_deterministic(mean29, mean5):
    fid = _fiducials(mean5, (0.1, -0.2, 0.05))
    init = PoseInitializer([mean29, mean29])
    a = init(BOX, fid, 2, np.random.default_rng(1))
    b = init(BOX, fid, 2, np.random.default_rng(1))
    assert a == b


def test_pose_init_count_bound(mean29, mean5):
    with pytest.raises(PoseError):
        pose_init_shapes(BOX, _fiducials(mean5, (0, 0, 0)), [mean29], 2, np.random.default_rng(0))


def _tilt(p, q):
    d = q - p
    return np.degrees(np.arctan2(d[1], d[0]))


@pytest.mark.parametrize("roll_deg", [-20, -7, 0, 12, 25])
@pytest.mark.parametrize("yaw_deg,pitch_deg", [(0, 0), (15, -5), (-25, 10)])
def test_pose_init_tilt_matches_planted_roll(mean29, mean5, roll_deg, yaw_deg, pitch_deg):
    rvec = Rotation.from_euler("yxz", np.radians([yaw_deg, pitch_deg, roll_deg])).as_rotvec()
    fid = _fiducials(mean5, rvec)
    # under yaw and pitch, perspective adds its own tilt to the image eye line
    planted = roll_deg if yaw_deg == pitch_deg == 0 else _tilt(fid.left_pupil, fid.right_pupil)
    rng = np.random.default_rng(0)
    variants = [mean29] + frontal_variants([AnnotatedShape(_orthographic_px(mean29).points + rng.normal(scale=1.0, size=(29, 2)))], mean29)
    for s in pose_init_shapes(BOX, fid, variants, 2, rng):
        assert _tilt(s.points[16], s.points[17]) == pytest.approx(planted, abs=1.0)
