"""Point-mass reach task on the arm-pose stack, used as a trainer sanity bed.

No cloth and no rendering: the observation is a four-point segmented cloud
(shoulder, elbow, fingertip, gripper) and the goal is to drive the gripper
onto the fingertip with the same clamped per-step translations the dressing
environment uses. The box-clamped greedy policy is provably optimal here,
which gives an exact oracle return to compare a learned policy against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .arm import all_subranges, forward_kinematics, sample_body, sample_pose
from .env import EpisodeFinishedError
from .perception import CLASS_ARM, CLASS_GRIPPER, SegmentedPointCloud


@dataclass(frozen=True)
class ToyReachConfig:
    episode_length: int = 50
    max_step_translation: float = 0.01
    reach_scale: float = 0.3           # r = clip(1 - d/reach_scale, 0, 1)
    success_distance: float = 0.02
    offset_range: tuple[float, float] = (0.12, 0.25)

    def __post_init__(self) -> None:
        if self.episode_length < 1:
            raise ValueError("episode_length must be at least 1")
        if min(self.max_step_translation, self.reach_scale,
               self.success_distance) <= 0:
            raise ValueError("distances must be positive")
        lo, hi = self.offset_range
        if not 0 < lo <= hi:
            raise ValueError("offset_range must be increasing and positive")


class ToyReachEnv:
    """Same (o, o_rand, ...) interface as the dressing environment."""

    def __init__(self, cfg: ToyReachConfig | None = None, seed: int = 0):
        self.cfg = cfg if cfg is not None else ToyReachConfig()
        self._rng = np.random.default_rng(seed)
        self._done = True
        self._gripper = None

    def reset(self, seed: int | None = None):
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        rng = self._rng
        body = sample_body(rng)
        pose = sample_pose(all_subranges()[0], rng)
        geom = forward_kinematics(pose, body)
        self._landmarks = np.stack(
            [geom.p_shoulder, geom.p_elbow, geom.p_finger])
        self._target = geom.p_finger.copy()
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        radius = rng.uniform(*self.cfg.offset_range)
        self._gripper = self._target + radius * direction
        self._initial_distance = radius
        self._step_count = 0
        self._done = False
        return self._observe(), None, self._info()

    def step(self, raw_action):
        if self._done or self._gripper is None:
            raise EpisodeFinishedError(
                "episode is finished; call reset() before stepping")
        raw = np.clip(np.asarray(raw_action, dtype=np.float64).reshape(6),
                      -1.0, 1.0)
        self._gripper = self._gripper \
            + raw[:3] * self.cfg.max_step_translation
        self._step_count += 1
        distance = self.distance
        reward = float(np.clip(1.0 - distance / self.cfg.reach_scale,
                               0.0, 1.0))
        self._done = self._step_count >= self.cfg.episode_length
        return self._observe(), None, reward, self._done, self._info()

    def _observe(self) -> SegmentedPointCloud:
        points = np.concatenate([self._landmarks,
                                 self._gripper.reshape(1, 3)])
        onehot = np.zeros((4, 3))
        onehot[:3, CLASS_ARM] = 1.0
        onehot[3, CLASS_GRIPPER] = 1.0
        return SegmentedPointCloud(points, onehot)

    def _info(self) -> dict:
        progress = np.clip(1.0 - self.distance / self._initial_distance,
                           0.0, 1.0)
        return {"subrange_id": 0,
                "upper_ratio": float(progress),
                "whole_ratio": float(progress),
                "success": bool(self.distance <= self.cfg.success_distance)}

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(self._target - self._gripper))

    @property
    def done(self) -> bool:
        return self._done


def oracle_action(env: ToyReachEnv) -> np.ndarray:
    """Box-clamped greedy step toward the fingertip (optimal here)."""
    delta = env._target - env._gripper
    action = np.zeros(6)
    action[:3] = np.clip(delta / env.cfg.max_step_translation, -1.0, 1.0)
    return action


def oracle_return(env: ToyReachEnv, seed: int) -> float:
    """Exact optimal episode return for the episode that seed produces."""
    env.reset(seed=seed)
    total = 0.0
    while True:
        _, _, reward, done, _ = env.step(oracle_action(env))
        total += reward
        if done:
            return total
