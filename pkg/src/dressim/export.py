"""Trajectory recording and on-disk export.

An episode is recorded as one frame per step (cloth vertices, the frozen
arm cloud, gripper position, the action taken, and the reward breakdown)
and exported as one class-tagged ASCII PLY per step plus a JSONL step
log. Vertex counts are constant across the frames of an episode: the
cloth mesh is fixed and the arm cloud is captured once at reset.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .perception import CLASS_ARM, CLASS_GARMENT, CLASS_GRIPPER, \
    SegmentedPointCloud, save_ply

REWARD_KEYS = ("r_m", "r_f", "r_c", "r_d")
METRIC_KEYS = ("upper_ratio", "whole_ratio", "success", "force")


@dataclass
class Frame:
    step: int
    cloth: np.ndarray
    arm: np.ndarray
    gripper: np.ndarray
    action: np.ndarray
    r_total: float
    info: dict


@dataclass
class EpisodeLog:
    frames: list[Frame] = field(default_factory=list)
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.frames)


def record_episode(env, act_fn, seed: int | None = None) -> EpisodeLog:
    """Roll one episode; act_fn(o, o_rand) -> raw action in [-1, 1]^6."""
    o, o_rand, _ = env.reset(seed)
    arm = env.arm_points
    log = EpisodeLog(seed=seed)
    done = False
    step = 0
    while not done:
        action = np.asarray(act_fn(o, o_rand), dtype=np.float64).reshape(6)
        o, o_rand, reward, done, info = env.step(action)
        step += 1
        log.frames.append(Frame(
            step=step, cloth=env.cloth_positions, arm=arm,
            gripper=env.gripper_pos, action=action.copy(),
            r_total=float(reward), info=dict(info)))
    return log


def _frame_cloud(frame: Frame) -> SegmentedPointCloud:
    points = np.concatenate(
        [frame.arm, frame.cloth, frame.gripper[None, :]], axis=0)
    onehot = np.zeros((len(points), 3))
    onehot[:len(frame.arm), CLASS_ARM] = 1.0
    onehot[len(frame.arm):-1, CLASS_GARMENT] = 1.0
    onehot[-1, CLASS_GRIPPER] = 1.0
    return SegmentedPointCloud(points=points, class_onehot=onehot)


def export_trajectory(log: EpisodeLog, out_dir) -> tuple[list[str], str]:
    """One PLY per step plus steps.jsonl; returns (ply paths, jsonl path)."""
    os.makedirs(out_dir, exist_ok=True)
    ply_paths = []
    jsonl_path = os.path.join(out_dir, "steps.jsonl")
    with open(jsonl_path, "w", encoding="ascii") as fh:
        for frame in log.frames:
            ply = os.path.join(out_dir, f"frame_{frame.step:04d}.ply")
            save_ply(ply, _frame_cloud(frame))
            ply_paths.append(ply)
            row = {"step": frame.step,
                   "action": [float(a) for a in frame.action],
                   "r_total": frame.r_total}
            for key in REWARD_KEYS + METRIC_KEYS:
                value = frame.info[key]
                row[key] = bool(value) if key == "success" else float(value)
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return ply_paths, jsonl_path
