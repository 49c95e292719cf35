"""Waypoint planner and haptic-MPC baseline tests."""

import numpy as np
import pytest

from dressim import baselines as bl
from dressim.arm import (ArmGeometry, ArmPose, BodyParams, all_subranges,
                         arm_distance, forward_kinematics, sample_body,
                         sample_pose)


def straight_arm():
    geom = ArmGeometry(p_shoulder=np.array([0.0, 0.0, 0.0]),
                       p_elbow=np.array([0.3, 0.0, 0.0]),
                       p_finger=np.array([0.55, 0.0, 0.0]))
    return geom, BodyParams()


def bent_arm():
    geom = forward_kinematics(ArmPose(phi1=10.0, phi2=20.0, phi3=25.0),
                              BodyParams())
    return geom, BodyParams()


# ------------------------------------------------------------ planner

def test_straight_arm_three_waypoints_monotone_x():
    geom, body = straight_arm()
    path = bl.heuristic_plan(geom, body)
    assert len(path.waypoints) == 3
    xs = [p[0] for p, _ in path.waypoints]
    assert xs[0] > xs[1] > xs[2]          # finger -> elbow -> shoulder


def test_straight_arm_path_clears_the_arm():
    geom, body = straight_arm()
    cfg = bl.HeuristicConfig()
    path = bl.heuristic_plan(geom, body, cfg)
    positions = np.array([p for p, _ in path.sample_points()])
    clearance = arm_distance(positions, geom, body)
    assert (clearance >= cfg.min_clearance - 1e-12).all()
    assert (clearance > 0).all()


def test_forearm_segment_orientation_has_zero_angle_to_forearm_axis():
    geom, body = bent_arm()
    path = bl.heuristic_plan(geom, body)
    axis = geom.forearm_axis
    first = path.waypoints[0][1]
    assert abs(float(first @ axis) - 1.0) < 1e-12
    # every interpolated pose on the first segment carries that orientation
    elbow_wp = path.waypoints[1][0]
    for pos, orient in path.sample_points():
        if np.array_equal(pos, elbow_wp):
            break
        assert np.array_equal(orient, first)


def test_orientation_switches_to_upper_arm_axis_at_the_elbow():
    geom, body = bent_arm()
    path = bl.heuristic_plan(geom, body)
    assert abs(float(path.waypoints[1][1] @ geom.upper_arm_axis) - 1.0) < 1e-12
    assert abs(float(path.waypoints[0][1] @ path.waypoints[1][1])) < 1.0 - 1e-6


def test_tool_normal_is_the_arm_plane_normal():
    geom, body = bent_arm()
    path = bl.heuristic_plan(geom, body)
    n = path.tool_normal
    assert abs(np.linalg.norm(n) - 1.0) < 1e-12
    assert abs(float(n @ geom.forearm_axis)) < 1e-12
    assert abs(float(n @ geom.upper_arm_axis)) < 1e-12


def test_tool_normal_defined_for_a_straight_arm():
    geom, body = straight_arm()
    path = bl.heuristic_plan(geom, body)
    assert abs(np.linalg.norm(path.tool_normal) - 1.0) < 1e-12
    assert abs(float(path.tool_normal @ geom.forearm_axis)) < 1e-12


def test_sampled_poses_keep_the_configured_clearance():
    cfg = bl.HeuristicConfig()
    successes = 0
    for seed in range(6):
        rng = np.random.default_rng(seed)
        body = sample_body(rng)
        sub = all_subranges()[seed % 27]
        geom = forward_kinematics(sample_pose(sub, rng), body)
        try:
            path = bl.heuristic_plan(geom, body, cfg)
        except ValueError:
            continue
        positions = np.array([p for p, _ in path.sample_points()])
        assert (arm_distance(positions, geom, body)
                >= cfg.min_clearance - 1e-12).all()
        successes += 1
    assert successes >= 3


def test_colliding_segments_get_lifted():
    geom, body = straight_arm()
    # 8 cm above a 5 cm capsule leaves 3 cm; demand 5 cm to force lifts
    cfg = bl.HeuristicConfig(min_clearance=0.05)
    path = bl.heuristic_plan(geom, body, cfg)
    positions = np.array([p for p, _ in path.sample_points()])
    assert (arm_distance(positions, geom, body)
            >= cfg.min_clearance - 1e-12).all()
    assert path.waypoints[2][0][2] > cfg.shoulder_height + 1e-9


def test_lift_cap_exhaustion_is_an_error():
    geom, body = straight_arm()
    cfg = bl.HeuristicConfig(min_clearance=0.5, max_lift=0.05)
    with pytest.raises(ValueError, match="lift cap"):
        bl.heuristic_plan(geom, body, cfg)


def test_waypoint_path_validation():
    p = np.zeros(3)
    o = np.array([1.0, 0.0, 0.0])
    with pytest.raises(ValueError, match="two waypoints"):
        bl.WaypointPath(waypoints=((p, o),), tool_normal=o, step_size=0.01)
    with pytest.raises(ValueError, match="unit"):
        bl.WaypointPath(waypoints=((p, o), (p + 1, 2 * o)),
                        tool_normal=o, step_size=0.01)
    with pytest.raises(ValueError, match="finite"):
        bl.WaypointPath(waypoints=((p, o), (p + np.nan, o)),
                        tool_normal=o, step_size=0.01)
    with pytest.raises(ValueError, match="step_size"):
        bl.WaypointPath(waypoints=((p, o), (p + 1, o)),
                        tool_normal=o, step_size=0.0)


def test_heuristic_config_validation():
    with pytest.raises(ValueError):
        bl.HeuristicConfig(step_size=0.0)
    with pytest.raises(ValueError):
        bl.HeuristicConfig(min_clearance=-0.01)


def test_sample_points_spacing_respects_step_size():
    geom, body = straight_arm()
    cfg = bl.HeuristicConfig(step_size=0.02)
    path = bl.heuristic_plan(geom, body, cfg)
    positions = np.array([p for p, _ in path.sample_points()])
    gaps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    assert (gaps <= cfg.step_size + 1e-12).all()


# ------------------------------------------------------------ force model

def tiny_cfg(**kw):
    base = dict(history=2, hidden=(16, 16), candidates=16)
    base.update(kw)
    return bl.HapticModelConfig(**base)


def random_dataset(n, cfg, seed=0, constant_force=None):
    rng = np.random.default_rng(seed)
    windows = 0.3 * rng.normal(size=(n, cfg.history, bl.STATE_DIM))
    actions = rng.uniform(-1.0, 1.0, size=(n, 6))
    if constant_force is None:
        forces = rng.uniform(0.0, 3.0, size=n)
    else:
        forces = np.full(n, constant_force)
    return windows, actions, forces


def test_haptic_config_validation():
    with pytest.raises(ValueError, match="history"):
        bl.HapticModelConfig(history=0)
    with pytest.raises(ValueError, match="candidate"):
        bl.HapticModelConfig(candidates=0)
    with pytest.raises(ValueError, match="budget"):
        bl.HapticModelConfig(resample_budget=0)
    with pytest.raises(ValueError, match="hidden"):
        bl.HapticModelConfig(hidden=())
    assert bl.HapticModelConfig().input_dim == 5 * 13 + 6


def test_constant_force_function_is_learned_to_tolerance():
    cfg = tiny_cfg()
    windows, actions, forces = random_dataset(20, cfg, constant_force=2.0)
    model = bl.train_force_model(windows, actions, forces, cfg,
                                 rng=np.random.default_rng(0),
                                 epochs=3000, lr=2e-2)
    preds = model.predict_batch(windows, actions)
    assert np.abs(preds - 2.0).max() < 1e-3


def test_full_batch_training_loss_is_non_increasing():
    cfg = tiny_cfg()
    windows, actions, forces = random_dataset(12, cfg, seed=3)
    model = bl.train_force_model(windows, actions, forces, cfg,
                                 rng=np.random.default_rng(1),
                                 epochs=40, lr=1e-5)
    losses = np.array(model.loss_history)
    assert (np.diff(losses) <= 1e-12).all()


def test_training_is_deterministic_given_the_seed():
    cfg = tiny_cfg()
    data = random_dataset(10, cfg, seed=2)
    m1 = bl.train_force_model(*data, cfg, rng=np.random.default_rng(4),
                              epochs=5, lr=1e-3, batch=4)
    m2 = bl.train_force_model(*data, cfg, rng=np.random.default_rng(4),
                              epochs=5, lr=1e-3, batch=4)
    for name in m1.params:
        assert np.array_equal(m1.params[name].values, m2.params[name].values)


def test_predictions_are_finite():
    cfg = tiny_cfg()
    windows, actions, forces = random_dataset(8, cfg)
    model = bl.train_force_model(windows, actions, forces, cfg, epochs=1)
    preds = model.predict_batch(windows, actions)
    assert np.isfinite(preds).all()
    single = model.predict(windows[0], actions[0])
    assert np.isfinite(single)
    assert single == pytest.approx(preds[0])


def test_empty_dataset_is_an_error():
    cfg = tiny_cfg()
    with pytest.raises(ValueError, match="empty"):
        bl.train_force_model(np.zeros((0, 2, 13)), np.zeros((0, 6)),
                             np.zeros(0), cfg)


def test_mismatched_dataset_lengths_are_an_error():
    cfg = tiny_cfg()
    windows, actions, forces = random_dataset(8, cfg)
    with pytest.raises(ValueError, match="length"):
        bl.train_force_model(windows, actions[:5], forces, cfg)


def test_window_length_must_match_the_config():
    cfg = tiny_cfg()
    windows, actions, forces = random_dataset(8, cfg)
    model = bl.train_force_model(windows, actions, forces, cfg, epochs=1)
    with pytest.raises(ValueError, match="window"):
        model.predict_batch(np.zeros((2, 3, 13)), np.zeros((2, 6)))


def test_state_vector_layout():
    x = bl.make_state_vector([1, 2, 3], [4, 5, 6], [7, 8, 9],
                             [10, 11, 12], 13.0)
    assert np.array_equal(x, np.arange(1.0, 14.0))


# ------------------------------------------------------------ MPC

def test_phase_directions():
    geom, _ = straight_arm()
    d = bl.phase_direction(geom, "forearm")
    assert np.allclose(d, [-1.0, 0.0, 0.0])
    d = bl.phase_direction(geom, "upper_arm")
    assert np.allclose(d, [-1.0, 0.0, 0.0])
    bent, _ = bent_arm()
    assert np.allclose(bl.phase_direction(bent, "forearm"),
                       -bent.forearm_axis)
    with pytest.raises(ValueError, match="phase"):
        bl.phase_direction(geom, "wrist")


def trained_model(cfg, seed=0):
    return bl.train_force_model(*random_dataset(10, cfg, seed=seed), cfg,
                                rng=np.random.default_rng(seed), epochs=2)


def test_selected_action_matches_brute_force_cost():
    cfg = tiny_cfg(candidates=64)
    model = trained_model(cfg)
    geom, _ = straight_arm()
    window = 0.1 * np.random.default_rng(8).normal(size=(2, 13))
    action = bl.haptic_mpc_select(window, geom, "forearm", model, cfg,
                                  np.random.default_rng(5))

    direction = bl.phase_direction(geom, "forearm")
    candidates = np.random.default_rng(5).uniform(-1, 1, size=(64, 6))
    kept = candidates[candidates[:, :3] @ direction > 0]
    forces = model.predict_batch(
        np.repeat(window[None, ...], len(kept), axis=0), kept)
    cost = (cfg.w1 * np.abs(forces) - cfg.w2 * (kept[:, :3] @ direction)
            + cfg.w3 * np.sum(kept * kept, axis=1))
    assert np.array_equal(action, kept[int(np.argmin(cost))])
    assert float(action[:3] @ direction) > 0


def test_zero_force_and_effort_weights_maximize_progress():
    cfg = tiny_cfg(candidates=64, w1=0.0, w3=0.0)
    model = trained_model(cfg)
    geom, _ = straight_arm()
    window = np.zeros((2, 13))
    action = bl.haptic_mpc_select(window, geom, "upper_arm", model, cfg,
                                  np.random.default_rng(11))
    direction = bl.phase_direction(geom, "upper_arm")
    candidates = np.random.default_rng(11).uniform(-1, 1, size=(64, 6))
    kept = candidates[candidates[:, :3] @ direction > 0]
    best = kept[np.argmax(kept[:, :3] @ direction)]
    assert np.array_equal(action, best)


def test_selection_is_deterministic_for_a_fixed_seed():
    cfg = tiny_cfg()
    model = trained_model(cfg)
    geom, _ = bent_arm()
    window = np.zeros((2, 13))
    a1 = bl.haptic_mpc_select(window, geom, "forearm", model, cfg,
                              np.random.default_rng(21))
    a2 = bl.haptic_mpc_select(window, geom, "forearm", model, cfg,
                              np.random.default_rng(21))
    assert np.array_equal(a1, a2)


class FakeRng:
    """Feeds scripted candidate batches to the selector."""

    def __init__(self, batches):
        self.batches = list(batches)

    def uniform(self, low, high, size):
        batch = self.batches.pop(0)
        assert batch.shape == size
        return batch


def test_candidates_opposing_the_phase_direction_are_rejected():
    cfg = tiny_cfg(candidates=2)
    model = trained_model(cfg)
    geom, _ = straight_arm()           # forearm direction is -x here
    opposing = np.array([0.9, 0.0, 0.0, 0.0, 0.0, 0.0])
    passing = np.array([-0.05, 0.0, 0.0, 0.0, 0.0, 0.0])
    rng = FakeRng([np.stack([opposing, passing])])
    action = bl.haptic_mpc_select(np.zeros((2, 13)), geom, "forearm",
                                  model, cfg, rng)
    assert np.array_equal(action, passing)


def test_exhausted_resample_budget_falls_back_to_zero_action():
    cfg = tiny_cfg(candidates=2, resample_budget=3)
    model = trained_model(cfg)
    geom, _ = straight_arm()
    opposing = np.tile([0.5, 0.0, 0.0, 0.1, 0.2, 0.3], (2, 1))
    rng = FakeRng([opposing.copy() for _ in range(3)])
    with pytest.warns(UserWarning, match="phase filter"):
        action = bl.haptic_mpc_select(np.zeros((2, 13)), geom, "forearm",
                                      model, cfg, rng)
    assert np.array_equal(action, np.zeros(6))
    assert not rng.batches                # the whole budget was consumed


# ------------------------------------------------------------ dataset CSV

def test_force_dataset_csv_round_trip(tmp_path):
    cfg = tiny_cfg()
    windows, actions, forces = random_dataset(5, cfg, seed=6)
    path = tmp_path / "forces.csv"
    bl.save_force_dataset(path, windows, actions, forces, cfg)
    w2, a2, f2 = bl.load_force_dataset(path, cfg)
    assert np.array_equal(w2, windows.reshape(5, -1))
    assert np.array_equal(a2, actions)
    assert np.array_equal(f2, forces)


def test_force_dataset_header_mismatch_is_an_error(tmp_path):
    cfg = tiny_cfg()
    windows, actions, forces = random_dataset(3, cfg)
    path = tmp_path / "forces.csv"
    bl.save_force_dataset(path, windows, actions, forces, cfg)
    with pytest.raises(ValueError, match="columns"):
        bl.load_force_dataset(path, tiny_cfg(history=3))


def test_force_dataset_without_rows_is_an_error(tmp_path):
    cfg = tiny_cfg()
    path = tmp_path / "forces.csv"
    bl.save_force_dataset(path, np.zeros((0, 2, 13)), np.zeros((0, 6)),
                          np.zeros(0), cfg)
    with pytest.raises(ValueError, match="empty"):
        bl.load_force_dataset(path, cfg)
