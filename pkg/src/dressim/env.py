"""Dressing environment: reset samples a (garment, body, pose) scene and
drapes the sleeve at the fingertip; step applies a clamped end-effector
delta, simulates, and returns segmented point-cloud observations plus the
reward breakdown.

Episodes are fixed-length during training.  Early termination on success or
on a stall in the main reward term is an evaluation-mode behavior only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .arm import (
    PHI1_RANGE,
    PHI2_RANGE,
    PHI3_RANGE,
    ArmPose,
    BodyParams,
    all_subranges,
    forward_kinematics,
    sample_body,
    sample_pose,
    subrange_index,
)
from .cloth import (
    GripperMotion,
    SimParams,
    SimulationDivergedError,
    attach_gripper,
    make_cloth_state,
    settle,
    step as cloth_step,
)
from .garment import GarmentMesh, generate_sleeve_garment, opening_geometry
from .perception import (
    LABEL_ARM,
    LABEL_GARMENT,
    MODE_OFF,
    RandomizerConfig,
    SegmentedPointCloud,
    assemble_observation,
    crop_arm,
    deproject,
    look_at_camera,
    randomize_observation,
    render_scene,
    sample_episode_randomization,
)
from .reward import (
    RewardParams,
    compute_metrics,
    compute_progress,
    compute_reward,
)

TERMINATION_TIMEOUT = "timeout"
TERMINATION_SUCCESS = "success"
TERMINATION_NO_PROGRESS = "no_progress"

INFO_KEYS = frozenset({
    "r_m", "r_f", "r_c", "r_d", "upper_ratio", "whole_ratio",
    "success", "subrange_id", "force",
})


class EpisodeFinishedError(RuntimeError):
    """Raised when stepping an environment whose episode already ended."""


@dataclass(frozen=True)
class GarmentSpec:
    """Procedural sleeve recipe for the registry."""

    name: str
    sleeve_length: float
    sleeve_radius: float
    resolution: int = 12


def default_garment_registry() -> tuple[GarmentSpec, ...]:
    """Five training garments in ascending sleeve length: a short wide gown
    opening and four cardigan sleeves of varying length and width."""
    return (
        GarmentSpec("gown", 0.06, 0.095),
        GarmentSpec("cardigan-s", 0.10, 0.090),
        GarmentSpec("cardigan-m", 0.14, 0.085),
        GarmentSpec("cardigan-narrow", 0.16, 0.078),
        GarmentSpec("cardigan-l", 0.20, 0.085),
    )


@lru_cache(maxsize=32)
def build_garment(spec: GarmentSpec) -> GarmentMesh:
    return generate_sleeve_garment(
        spec.sleeve_length, spec.sleeve_radius,
        resolution=spec.resolution, name=spec.name)


@dataclass(frozen=True)
class EnvConfig:
    garments: tuple[GarmentSpec, ...] = field(
        default_factory=default_garment_registry)
    subrange: int | None = None          # pose sub-range id, None = full range
    episode_length: int = 150
    max_step_translation: float = 0.01
    max_step_rotation: float = float(np.radians(2.0))
    no_progress_window: int = 15
    no_progress_epsilon: float = 1e-3
    eval_mode: bool = False
    settle_steps: int = 60
    placement_offset: float = 0.05       # opening center beyond the fingertip
    camera_position: tuple[float, float, float] = (0.35, -1.0, 0.05)
    camera_target: tuple[float, float, float] = (0.35, 0.0, 0.05)
    camera_width: int = 128
    camera_height: int = 128
    body_ranges: dict = field(default_factory=dict)
    sim: SimParams = field(default_factory=SimParams)
    reward: RewardParams = field(default_factory=RewardParams)
    randomizer: RandomizerConfig = field(default_factory=RandomizerConfig)

    def __post_init__(self) -> None:
        if not self.garments:
            raise ValueError("garment registry must not be empty")
        if self.episode_length < 1:
            raise ValueError("episode_length must be at least 1")
        if self.subrange is not None and not (
                0 <= self.subrange < len(all_subranges())):
            raise ValueError("subrange id out of range")


@dataclass
class Transition:
    """One replay tuple; ``o_rand`` twins are None when randomization is off."""

    o: SegmentedPointCloud
    o_rand: SegmentedPointCloud | None
    action: np.ndarray
    reward: float
    o_next: SegmentedPointCloud
    o_rand_next: SegmentedPointCloud | None
    done: bool
    subrange_id: int

    def __post_init__(self) -> None:
        self.action = np.asarray(self.action, dtype=np.float64).reshape(6)
        if (self.o_rand is None) != (self.o_rand_next is None):
            raise ValueError("randomized twins must be present together")
        if not 0 <= self.subrange_id < len(all_subranges()):
            raise ValueError("subrange_id out of range")


def canonicalize_action(raw_action, cfg: EnvConfig):
    """[-1, 1]^6 -> clamped translation and roll-free rotation deltas.

    Returns (translation, d_pitch, d_yaw).  Component 3 (roll) is discarded;
    the (pitch, yaw) vector is scaled down if its magnitude exceeds
    max_step_rotation.
    """
    raw = np.clip(np.asarray(raw_action, dtype=np.float64).reshape(6), -1, 1)
    translation = raw[:3] * cfg.max_step_translation
    rot = raw[3:] * cfg.max_step_rotation
    d_pitch, d_yaw = rot[1], rot[2]
    magnitude = float(np.hypot(d_pitch, d_yaw))
    if magnitude > cfg.max_step_rotation:
        scale = cfg.max_step_rotation / magnitude
        d_pitch *= scale
        d_yaw *= scale
    return translation, float(d_pitch), float(d_yaw)


def is_terminal(step_count: int, episode_length: int, eval_mode: bool,
                success: bool, r_m_history, window: int = 15,
                epsilon: float = 1e-3):
    """(done, reason); training mode only ever times out."""
    if step_count >= episode_length:
        return True, TERMINATION_TIMEOUT
    if not eval_mode:
        return False, ""
    if success:
        return True, TERMINATION_SUCCESS
    if len(r_m_history) > window:
        best_before = max(r_m_history[:-window])
        recent = max(r_m_history[-window:])
        if recent <= best_before + epsilon:
            return True, TERMINATION_NO_PROGRESS
    return False, ""


def _placement_transform(geom):
    fore = geom.forearm_axis
    e2 = np.cross([0.0, 0.0, 1.0], fore)
    e2 /= np.linalg.norm(e2)
    return np.column_stack([fore, e2, np.cross(fore, e2)])


class DressingEnv:
    """Single-threaded environment instance; owns all mutable state."""

    def __init__(self, cfg: EnvConfig | None = None, seed: int = 0):
        self.cfg = cfg if cfg is not None else EnvConfig()
        self._rng = np.random.default_rng(seed)
        self._camera = look_at_camera(
            self.cfg.camera_position, self.cfg.camera_target,
            width=self.cfg.camera_width, height=self.cfg.camera_height)
        self._state = None
        self._done = True
        self.termination_reason = ""

    # -- episode lifecycle -------------------------------------------------

    def reset(self, seed: int | None = None):
        """Sample a scene, drape the garment, return (o, o_rand, info)."""
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        last_error = None
        for _ in range(4):           # up to 3 retries on settle divergence
            try:
                return self._reset_once()
            except SimulationDivergedError as err:
                last_error = err
        raise last_error

    def _reset_once(self):
        cfg = self.cfg
        rng = self._rng
        spec = cfg.garments[int(rng.integers(len(cfg.garments)))]
        self.mesh = build_garment(spec)
        self.body = sample_body(rng, **cfg.body_ranges)
        if cfg.subrange is None:
            pose = ArmPose(phi1=float(rng.uniform(*PHI1_RANGE)),
                           phi2=float(rng.uniform(*PHI2_RANGE)),
                           phi3=float(rng.uniform(*PHI3_RANGE)))
        else:
            pose = sample_pose(all_subranges()[cfg.subrange], rng)
        self.pose = pose
        self.subrange_id = subrange_index(pose)
        self.geom = forward_kinematics(pose, self.body)

        center = self.geom.p_finger \
            + cfg.placement_offset * self.geom.forearm_axis
        state = make_cloth_state(
            self.mesh, transform=(_placement_transform(self.geom), center))
        grasp = state.positions[list(self.mesh.grasp_vertices)].mean(axis=0)
        state = attach_gripper(state, self.mesh, grasp)
        state = settle(state, self.mesh, cfg.sim, self.geom, self.body,
                       steps=cfg.settle_steps)
        self._state = state

        # static arm cloud, captured once per episode
        image = self._render()
        self._arm_points = crop_arm(deproject(image, LABEL_ARM), self.geom)
        self._episode_draws = sample_episode_randomization(
            cfg.randomizer, rng)

        self._step_count = 0
        self._r_m_history = []
        self._done = False
        self.termination_reason = ""
        o, o_rand = self._observe(image)
        progress = compute_progress(
            opening_geometry(self.mesh, state.positions), self.geom)
        upper, whole, success = compute_metrics(progress, self.geom)
        info = {"subrange_id": self.subrange_id, "upper_ratio": upper,
                "whole_ratio": whole, "success": success}
        return o, o_rand, info

    def step(self, raw_action):
        """(o, o_rand, reward, done, info) after one clamped action."""
        if self._done or self._state is None:
            raise EpisodeFinishedError(
                "episode is finished; call reset() before stepping")
        cfg = self.cfg
        translation, d_pitch, d_yaw = canonicalize_action(raw_action, cfg)
        out = cloth_step(
            self._state, self.mesh, cfg.sim, self.geom, self.body,
            GripperMotion(translation, d_yaw=d_yaw, d_pitch=d_pitch))
        self._state = out.new_state
        self._step_count += 1

        opening = opening_geometry(self.mesh, self._state.positions)
        progress = compute_progress(opening, self.geom)
        breakdown = compute_reward(progress, opening, out, self.geom,
                                   cfg.reward)
        upper, whole, success = compute_metrics(progress, self.geom)
        self._r_m_history.append(breakdown.r_m)

        done, reason = is_terminal(
            self._step_count, cfg.episode_length, cfg.eval_mode, success,
            self._r_m_history, cfg.no_progress_window,
            cfg.no_progress_epsilon)
        self._done = done
        self.termination_reason = reason

        image = self._render()
        o, o_rand = self._observe(image)
        info = {
            "r_m": breakdown.r_m, "r_f": breakdown.r_f,
            "r_c": breakdown.r_c, "r_d": breakdown.r_d,
            "upper_ratio": upper, "whole_ratio": whole, "success": success,
            "subrange_id": self.subrange_id,
            "force": out.total_arm_force,
        }
        return o, o_rand, breakdown.r_total, done, info

    def perturb_pose(self, d_phi1: float = 0.0, d_phi2: float = 0.0,
                     d_phi3: float = 0.0) -> None:
        """Re-pose the arm mid-episode by joint-angle deltas (degrees).

        The frozen arm observation and the draped cloth keep their
        pre-perturbation state, so the policy sees a stale arm cloud while
        simulation and metrics use the moved arm.
        """
        if self._state is None:
            raise EpisodeFinishedError("reset() before perturbing the pose")
        self.pose = ArmPose(phi1=self.pose.phi1 + d_phi1,
                            phi2=self.pose.phi2 + d_phi2,
                            phi3=self.pose.phi3 + d_phi3)
        self.geom = forward_kinematics(self.pose, self.body)

    # -- helpers -----------------------------------------------------------

    def _render(self):
        return render_scene(self._state.positions, self.mesh.triangles,
                            self.geom, self.body, self._camera)

    def _observe(self, image):
        gripper = self._state.gripper_pos
        o = assemble_observation(
            self._arm_points, deproject(image, LABEL_GARMENT), gripper)
        if self.cfg.randomizer.mode == MODE_OFF:
            return o, None
        o_rand = randomize_observation(
            image, self.geom, gripper, self.cfg.randomizer, self._rng,
            episode=self._episode_draws, arm_points=self._arm_points)
        return o, o_rand

    @property
    def done(self) -> bool:
        return self._done

    @property
    def gripper_pos(self) -> np.ndarray:
        return self._state.gripper_pos.copy()

    @property
    def cloth_positions(self) -> np.ndarray:
        return self._state.positions.copy()

    @property
    def arm_points(self) -> np.ndarray:
        """The frozen per-episode arm cloud."""
        return self._arm_points.copy()
