import numpy as np
import pytest

from dressim.arm import (
    NUM_SUBRANGES,
    PHI1_INTERVALS,
    PHI2_INTERVALS,
    PHI3_INTERVALS,
    ArmPose,
    BodyParams,
    PoseSubRange,
    arm_distance,
    decompose_pose_range,
    forward_kinematics,
    sample_pose,
    segment_point_distance,
    subrange_index,
)

BODY = BodyParams(upper_arm_length=0.3, forearm_length=0.25)


def test_fk_identity_pose():
    geom = forward_kinematics(ArmPose(0.0, 0.0, 0.0), BODY)
    np.testing.assert_allclose(geom.p_elbow, [0.3, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(geom.p_finger, [0.55, 0.0, 0.0], atol=1e-12)


# Frozen from an independent rotation-composition oracle (scipy Rotation).
FK_CASES = [
    ((30.0, 0.0, 0.0), 0.3, 0.25, (0.0, 0.0, 0.0),
     (0.2598076211353316, 0.0, 0.14999999999999997),
     (0.47631397208144133, 0.0, 0.27499999999999997)),
    ((0.0, 20.0, 0.0), 0.3, 0.25, (0.0, 0.0, 0.0),
     (0.3, 0.0, 0.0),
     (0.5349231551964772, 0.08550503583141719, 0.0)),
    ((0.0, 0.0, 25.0), 0.3, 0.25, (0.0, 0.0, 0.0),
     (0.3, 0.0, 0.0),
     (0.5265769467591626, 0.0, 0.10565456543517486)),
    ((30.0, 20.0, -10.0), 0.28, 0.24, (0.05, -0.1, 0.9),
     (0.29248711305964287, -0.1, 1.04),
     (0.5056691182139676, -0.01916221867996834, 1.1149578934444944)),
    ((-20.0, -20.0, -20.0), 0.3, 0.25, (0.0, 0.0, 0.0),
     (0.2819077862357725, 0.0, -0.1026060429977006),
     (0.4601057080230026, -0.0803484512108174, -0.25845734090289973)),
]


@pytest.mark.parametrize("pose,lu,lf,sh,elbow,finger", FK_CASES)
def test_fk_frozen_values(pose, lu, lf, sh, elbow, finger):
    body = BodyParams(upper_arm_length=lu, forearm_length=lf,
                      shoulder_position=sh)
    geom = forward_kinematics(ArmPose(*pose), body)
    np.testing.assert_allclose(geom.p_elbow, elbow, atol=1e-12)
    np.testing.assert_allclose(geom.p_finger, finger, atol=1e-12)


def test_fk_lift_sign():
    # positive phi1 lifts the arm (+z), positive phi2 swings inward (+y),
    # positive phi3 lifts the forearm
    up = forward_kinematics(ArmPose(10.0, 0.0, 0.0), BODY)
    assert up.p_elbow[2] > 0 and up.p_finger[2] > 0
    inw = forward_kinematics(ArmPose(0.0, 10.0, 0.0), BODY)
    assert inw.p_finger[1] > 0
    fl = forward_kinematics(ArmPose(0.0, 0.0, 10.0), BODY)
    assert fl.p_finger[2] > 0


def test_fk_elbow_ignores_elbow_angles():
    base = forward_kinematics(ArmPose(12.0, 0.0, 0.0), BODY)
    bent = forward_kinematics(ArmPose(12.0, 19.0, -15.0), BODY)
    np.testing.assert_allclose(base.p_elbow, bent.p_elbow, atol=1e-15)


def test_fk_rigidity():
    rng = np.random.default_rng(7)
    for _ in range(200):
        pose = ArmPose(*rng.uniform(-20, 30, size=3))
        geom = forward_kinematics(pose, BODY)
        assert abs(geom.upper_arm_length - 0.3) < 1e-9
        assert abs(geom.forearm_length - 0.25) < 1e-9


def test_fk_continuity():
    # |geom(pose) - geom(pose + eps)| <= total_length * pi/180 * eps_deg
    rng = np.random.default_rng(11)
    c_bound = (0.3 + 0.25) * np.pi / 180.0
    for _ in range(100):
        pose = rng.uniform(-19, 29, size=3)
        eps = rng.uniform(-1, 1, size=3)
        g0 = forward_kinematics(ArmPose(*pose), BODY)
        g1 = forward_kinematics(ArmPose(*(pose + eps)), BODY)
        move = max(
            np.linalg.norm(g1.p_elbow - g0.p_elbow),
            np.linalg.norm(g1.p_finger - g0.p_finger),
        )
        assert move <= c_bound * np.abs(eps).sum() + 1e-12


def test_out_of_range_pose_flagged():
    assert not ArmPose(40.0, 0.0, 0.0).in_training_range
    assert ArmPose(30.0, -20.0, 30.0).in_training_range


def test_body_validation():
    with pytest.raises(ValueError):
        BodyParams(upper_arm_length=-0.1)
    with pytest.raises(ValueError):
        BodyParams(upper_arm_radius=0.0)
    with pytest.raises(ValueError):
        BodyParams(forearm_length=0.03, forearm_radius=0.04)


def test_subrange_intervals_exact():
    assert PHI1_INTERVALS == ((-20.0, -8.0), (-8.0, 18.0), (18.0, 30.0))
    assert PHI2_INTERVALS == ((-20.0, -8.0), (-8.0, 8.0), (8.0, 20.0))
    assert PHI3_INTERVALS == ((-20.0, -3.0), (-3.0, 14.0), (14.0, 30.0))


def test_subrange_index_order():
    subs = decompose_pose_range()
    assert len(subs) == NUM_SUBRANGES
    assert [s.index for s in subs] == list(range(27))
    assert subs[0].interval_phi1 == (-20.0, -8.0)
    assert subs[0].interval_phi2 == (-20.0, -8.0)
    assert subs[0].interval_phi3 == (-20.0, -3.0)
    assert subs[26].interval_phi1 == (18.0, 30.0)
    assert subs[26].interval_phi2 == (8.0, 20.0)
    assert subs[26].interval_phi3 == (14.0, 30.0)


def test_subrange_tiling_interior():
    # interior points belong to exactly one sub-range
    rng = np.random.default_rng(3)
    subs = decompose_pose_range()
    for _ in range(500):
        pose = ArmPose(
            float(rng.uniform(-20, 30)),
            float(rng.uniform(-20, 20)),
            float(rng.uniform(-20, 30)),
        )
        hits = [s.index for s in subs if s.contains(pose)]
        assert len(hits) >= 1
        assert subrange_index(pose) == hits[0]


def test_subrange_boundary_lowest_index():
    # -8 is shared between phi1 intervals 0 and 1 -> first match wins
    assert subrange_index(ArmPose(-8.0, 0.0, 0.0)) == 0 * 9 + 1 * 3 + 1
    assert subrange_index(ArmPose(0.0, 8.0, 0.0)) == 1 * 9 + 1 * 3 + 1
    # triple corner at the global minimum
    assert subrange_index(ArmPose(-20.0, -20.0, -20.0)) == 0


def test_subrange_out_of_range_raises():
    with pytest.raises(ValueError):
        subrange_index(ArmPose(31.0, 0.0, 0.0))


def test_sample_pose_degenerate_interval():
    sub = PoseSubRange(0, (5.0, 5.0), (5.0, 5.0), (5.0, 5.0))
    pose = sample_pose(sub, np.random.default_rng(0))
    assert (pose.phi1, pose.phi2, pose.phi3) == (5.0, 5.0, 5.0)


def test_sample_pose_uniform_mean():
    sub = decompose_pose_range()[13]  # middle cell: phi1 in [-8, 18]
    rng = np.random.default_rng(42)
    vals = [sample_pose(sub, rng).phi1 for _ in range(10_000)]
    assert abs(np.mean(vals) - 5.0) < 0.5


def test_sample_pose_deterministic():
    sub = decompose_pose_range()[5]
    p1 = sample_pose(sub, np.random.default_rng(123))
    p2 = sample_pose(sub, np.random.default_rng(123))
    assert p1 == p2


def test_sample_pose_in_range():
    rng = np.random.default_rng(9)
    for sub in decompose_pose_range():
        for _ in range(20):
            pose = sample_pose(sub, rng)
            assert sub.contains(pose)
            assert pose.in_training_range


def test_arm_distance_axis_point():
    geom = forward_kinematics(ArmPose(0.0, 0.0, 0.0), BODY)
    body = BodyParams(upper_arm_length=0.3, forearm_length=0.25,
                      forearm_radius=0.04)
    mid = 0.5 * (geom.p_elbow + geom.p_finger)
    assert arm_distance(mid, geom, body) == pytest.approx(-0.04, abs=1e-12)


def test_arm_distance_perpendicular_offset():
    geom = forward_kinematics(ArmPose(0.0, 0.0, 0.0), BODY)
    body = BodyParams(upper_arm_length=0.3, forearm_length=0.25,
                      forearm_radius=0.04)
    p = 0.5 * (geom.p_elbow + geom.p_finger) + np.array([0.0, 0.0, 0.1])
    assert arm_distance(p, geom, body) == pytest.approx(0.06, abs=1e-12)


def test_arm_distance_monte_carlo_oracle():
    # independent route: dense sampling of each capsule axis
    rng = np.random.default_rng(21)
    geom = forward_kinematics(ArmPose(17.0, 12.0, -5.0), BODY)
    body = BODY
    pts = rng.uniform(-0.2, 0.7, size=(1000, 3))
    got = arm_distance(pts, geom, body)

    ts = np.linspace(0.0, 1.0, 20_001)[:, None]
    axis_u = geom.p_shoulder + ts * (geom.p_elbow - geom.p_shoulder)
    axis_f = geom.p_elbow + ts * (geom.p_finger - geom.p_elbow)
    d_u = np.min(np.linalg.norm(pts[:, None, :] - axis_u[None], axis=2), axis=1)
    d_f = np.min(np.linalg.norm(pts[:, None, :] - axis_f[None], axis=2), axis=1)
    expected = np.minimum(d_u - body.upper_arm_radius,
                          d_f - body.forearm_radius)
    np.testing.assert_allclose(got, expected, atol=1e-4)


def test_arm_distance_lipschitz():
    rng = np.random.default_rng(33)
    geom = forward_kinematics(ArmPose(5.0, 5.0, 5.0), BODY)
    for _ in range(200):
        p = rng.uniform(-0.3, 0.8, size=3)
        q = p + rng.normal(scale=0.02, size=3)
        dp = arm_distance(p, geom, BODY)
        dq = arm_distance(q, geom, BODY)
        assert abs(dp - dq) <= np.linalg.norm(p - q) + 1e-12


def test_segment_distance_degenerate_segment():
    a = np.array([0.1, 0.2, 0.3])
    d = segment_point_distance(np.array([0.1, 0.2, 0.8]), a, a)
    assert d == pytest.approx(0.5)
