"""Parametric kinematic right arm: pose angles, capsule geometry, pose sub-ranges.

Coordinate conventions (fixed here, used everywhere):
  * World frame: +z up, gravity along -z. The rest pose arm points along +x.
  * phi1 lifts/lowers the whole arm at the shoulder (positive = lift),
    realized as R_y(-phi1).
  * phi2 bends the forearm in/out at the elbow (positive = inward, toward the
    body on a right arm), realized as R_z(+phi2).
  * phi3 lifts/lowers the forearm at the elbow (positive = lift), realized as
    R_y(-phi3).
  * Rotations compose about the current local frame: R = R1 @ R2 @ R3.
  * Angles are stored in degrees (the native unit of the pose ranges); all
    positions and distances are SI meters.

The arm body is two capsules: shoulder->elbow with the upper-arm radius and
elbow->finger with the forearm radius. `arm_distance` is the signed distance
to their union (negative inside).

The training pose box is partitioned into 27 sub-ranges (3 intervals per
angle, indexed idx = i1*9 + i2*3 + i3). Interval boundaries are shared;
membership ties resolve to the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Training ranges, degrees.
PHI1_RANGE = (-20.0, 30.0)
PHI2_RANGE = (-20.0, 20.0)
PHI3_RANGE = (-20.0, 30.0)

# Fixed 3-way splits of each angle's training range (degrees). The middle
# interval is widest for phi1 where most natural poses concentrate.
PHI1_INTERVALS = ((-20.0, -8.0), (-8.0, 18.0), (18.0, 30.0))
PHI2_INTERVALS = ((-20.0, -8.0), (-8.0, 8.0), (8.0, 20.0))
PHI3_INTERVALS = ((-20.0, -3.0), (-3.0, 14.0), (14.0, 30.0))

NUM_SUBRANGES = 27


@dataclass(frozen=True)
class ArmPose:
    """Joint angles in degrees: shoulder lift, elbow in/out, elbow lift."""

    phi1: float
    phi2: float
    phi3: float

    @property
    def in_training_range(self) -> bool:
        return (
            PHI1_RANGE[0] <= self.phi1 <= PHI1_RANGE[1]
            and PHI2_RANGE[0] <= self.phi2 <= PHI2_RANGE[1]
            and PHI3_RANGE[0] <= self.phi3 <= PHI3_RANGE[1]
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.phi1, self.phi2, self.phi3], dtype=np.float64)


@dataclass(frozen=True)
class BodyParams:
    """Capsule-arm dimensions, meters. Shoulder position is the arm root."""

    upper_arm_length: float = 0.3
    forearm_length: float = 0.25
    upper_arm_radius: float = 0.05
    forearm_radius: float = 0.04
    shoulder_position: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if self.upper_arm_length <= 0 or self.forearm_length <= 0:
            raise ValueError("arm segment lengths must be positive")
        if self.upper_arm_radius <= 0 or self.forearm_radius <= 0:
            raise ValueError("arm radii must be positive")
        if (
            self.upper_arm_radius >= self.upper_arm_length
            or self.forearm_radius >= self.forearm_length
        ):
            raise ValueError("arm radii must be smaller than segment lengths")

    @property
    def shoulder(self) -> np.ndarray:
        return np.array(self.shoulder_position, dtype=np.float64)


@dataclass(frozen=True)
class ArmGeometry:
    """Key points and segment directions of a posed arm (world frame)."""

    p_shoulder: np.ndarray
    p_elbow: np.ndarray
    p_finger: np.ndarray

    @property
    def upper_arm_axis(self) -> np.ndarray:
        """Unit vector shoulder -> elbow."""
        d = self.p_elbow - self.p_shoulder
        return d / np.linalg.norm(d)

    @property
    def forearm_axis(self) -> np.ndarray:
        """Unit vector elbow -> finger."""
        d = self.p_finger - self.p_elbow
        return d / np.linalg.norm(d)

    @property
    def upper_arm_length(self) -> float:
        return float(np.linalg.norm(self.p_elbow - self.p_shoulder))

    @property
    def forearm_length(self) -> float:
        return float(np.linalg.norm(self.p_finger - self.p_elbow))


@dataclass(frozen=True)
class PoseSubRange:
    """One cell of the 3x3x3 partition of the training pose box."""

    index: int
    interval_phi1: tuple[float, float]
    interval_phi2: tuple[float, float]
    interval_phi3: tuple[float, float]

    def contains(self, pose: ArmPose) -> bool:
        return (
            self.interval_phi1[0] <= pose.phi1 <= self.interval_phi1[1]
            and self.interval_phi2[0] <= pose.phi2 <= self.interval_phi2[1]
            and self.interval_phi3[0] <= pose.phi3 <= self.interval_phi3[1]
        )


def _rot_y(deg: float) -> np.ndarray:
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(deg: float) -> np.ndarray:
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def forward_kinematics(pose: ArmPose, body: BodyParams) -> ArmGeometry:
    """Place shoulder, elbow and finger for a pose.

    The upper arm only sees phi1; the forearm sees all three angles composed
    about the current local frame (see module docstring for sign choices).
    """
    x_hat = np.array([1.0, 0.0, 0.0])
    r1 = _rot_y(-pose.phi1)
    shoulder = body.shoulder
    elbow = shoulder + body.upper_arm_length * (r1 @ x_hat)
    fore_rot = r1 @ _rot_z(pose.phi2) @ _rot_y(-pose.phi3)
    finger = elbow + body.forearm_length * (fore_rot @ x_hat)
    for p in (elbow, finger):
        p.setflags(write=False)
    shoulder.setflags(write=False)
    return ArmGeometry(p_shoulder=shoulder, p_elbow=elbow, p_finger=finger)


def segment_point_distance(
    points: np.ndarray, seg_a: np.ndarray, seg_b: np.ndarray
) -> np.ndarray:
    """Distance from each point to the segment a-b. points: (3,) or (N, 3)."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ab = seg_b - seg_a
    denom = float(ab @ ab)
    if denom == 0.0:
        d = np.linalg.norm(p - seg_a, axis=1)
    else:
        t = np.clip((p - seg_a) @ ab / denom, 0.0, 1.0)
        closest = seg_a + t[:, None] * ab
        d = np.linalg.norm(p - closest, axis=1)
    if np.asarray(points).ndim == 1:
        return d[0]
    return d


def arm_distance(points: np.ndarray, geom: ArmGeometry, body: BodyParams):
    """Signed distance to the two-capsule arm union (negative inside).

    Accepts a single point (3,) -> float, or (N, 3) -> (N,). Exact for
    capsules: segment distance minus radius, then min over the two segments.
    """
    d_upper = (
        segment_point_distance(points, geom.p_shoulder, geom.p_elbow)
        - body.upper_arm_radius
    )
    d_fore = (
        segment_point_distance(points, geom.p_elbow, geom.p_finger)
        - body.forearm_radius
    )
    out = np.minimum(d_upper, d_fore)
    if np.asarray(points).ndim == 1:
        return float(out)
    return out


def decompose_pose_range() -> list[PoseSubRange]:
    """The 27 sub-ranges in stable index order idx = i1*9 + i2*3 + i3."""
    out = []
    for i1, iv1 in enumerate(PHI1_INTERVALS):
        for i2, iv2 in enumerate(PHI2_INTERVALS):
            for i3, iv3 in enumerate(PHI3_INTERVALS):
                out.append(
                    PoseSubRange(
                        index=i1 * 9 + i2 * 3 + i3,
                        interval_phi1=iv1,
                        interval_phi2=iv2,
                        interval_phi3=iv3,
                    )
                )
    return out


_SUBRANGES = None


def all_subranges() -> list[PoseSubRange]:
    """Cached decompose_pose_range()."""
    global _SUBRANGES
    if _SUBRANGES is None:
        _SUBRANGES = decompose_pose_range()
    return _SUBRANGES


def subrange_index(pose: ArmPose) -> int:
    """Index of the sub-range containing the pose; boundaries go to the
    lowest index (first match in index order). Raises for poses outside the
    training box."""
    for sub in all_subranges():
        if sub.contains(pose):
            return sub.index
    raise ValueError(f"pose {pose} outside the training range")


def sample_pose(subrange: PoseSubRange, rng: np.random.Generator) -> ArmPose:
    """Uniform pose inside one sub-range. Draws phi1, phi2, phi3 in order."""
    return ArmPose(
        phi1=float(rng.uniform(*subrange.interval_phi1)),
        phi2=float(rng.uniform(*subrange.interval_phi2)),
        phi3=float(rng.uniform(*subrange.interval_phi3)),
    )


def sample_body(
    rng: np.random.Generator,
    upper_arm_length: tuple[float, float] = (0.28, 0.32),
    forearm_length: tuple[float, float] = (0.23, 0.27),
    upper_arm_radius: tuple[float, float] = (0.045, 0.055),
    forearm_radius: tuple[float, float] = (0.035, 0.045),
    shoulder_position: tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> BodyParams:
    """Uniform body dimensions. Draw order fixed: lengths then radii."""
    return BodyParams(
        upper_arm_length=float(rng.uniform(*upper_arm_length)),
        forearm_length=float(rng.uniform(*forearm_length)),
        upper_arm_radius=float(rng.uniform(*upper_arm_radius)),
        forearm_radius=float(rng.uniform(*forearm_radius)),
        shoulder_position=shoulder_position,
    )
