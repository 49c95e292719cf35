"""Dressing reward and evaluation metrics.

Progress is measured by where the garment opening crosses the arm.  The
opening hexagon is intersected with the forearm segment (finger to elbow)
and the upper-arm segment (elbow to shoulder); the reward's main term is

  * approach (no crossing):  -|opening center - finger|
  * forearm:                  |p_int - finger|
  * upper arm:                forearm_length + w * |p_int - elbow|

plus a force penalty above f_max, a contact penalty when the gripper is
within d_min of the arm, and a deviation band term on the opening-center
clearance.  Metrics are the dressed-ratio pair and the 0.8 success gate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .arm import ArmGeometry
from .cloth import StepOutcome
from .garment import OpeningGeometry

PLANE_TOLERANCE = 1e-9
EDGE_TOLERANCE = 1e-9

PHASE_APPROACH = "approach"
PHASE_FOREARM = "forearm"
PHASE_UPPER = "upper_arm"


@dataclass(frozen=True)
class RewardParams:
    """Weights and thresholds of the reward terms.

    f_max is in simulator force units.  The default was calibrated against
    two scripted scenarios at default sim parameters: a compliant dressing
    run peaks near 2.5e3 while ramming the sleeve into the arm exceeds 9e3,
    so 3.5e3 separates normal operation from jamming.
    """

    w: float = 5.0
    f_max: float = 3500.0
    force_coeff: float = 0.001
    contact_coeff: float = 0.01
    d_min: float = 0.01
    deviation_near: float = 0.03
    deviation_far: float = 0.075
    deviation_bonus: float = 0.02
    deviation_penalty: float = 0.05

    def __post_init__(self) -> None:
        values = (self.w, self.f_max, self.force_coeff, self.contact_coeff,
                  self.d_min, self.deviation_near, self.deviation_far,
                  self.deviation_bonus, self.deviation_penalty)
        if any(v < 0 for v in values):
            raise ValueError("reward parameters must be nonnegative")
        if self.deviation_near >= self.deviation_far:
            raise ValueError("deviation_near must be below deviation_far")


@dataclass(frozen=True)
class DressProgress:
    """Which arm segment the opening crosses and how far along it sits."""

    phase: str
    p_int: np.ndarray | None
    forearm_dressed: float
    upper_dressed: float

    def __post_init__(self) -> None:
        if (self.phase == PHASE_APPROACH) != (self.p_int is None):
            raise ValueError("approach phase has no intersection point")


@dataclass(frozen=True)
class RewardBreakdown:
    r_m: float
    r_f: float
    r_c: float
    r_d: float

    @property
    def r_total(self) -> float:
        return self.r_m + self.r_f + self.r_c + self.r_d


def hexagon_segment_intersection(opening: OpeningGeometry, seg_a, seg_b):
    """Crossing point of a segment with the opening hexagon, or None.

    The segment is intersected with the hexagon's plane; the crossing
    counts when it falls inside the hexagon (star-shaped about the opening
    center), tested as membership in any center-fan triangle with a 1e-9
    tolerance on the half-plane sides.  Near-parallel segments miss.
    """
    if opening.degenerate:
        return None
    seg_a = np.asarray(seg_a, dtype=np.float64)
    seg_b = np.asarray(seg_b, dtype=np.float64)
    n = opening.plane_normal
    d = seg_b - seg_a
    denom = float(n @ d)
    if abs(denom) < PLANE_TOLERANCE:
        return None
    t = float(n @ (opening.p_center - seg_a)) / denom
    if not 0.0 <= t <= 1.0:
        return None
    point = seg_a + t * d
    return point if _inside_hexagon(opening, point) else None


def _inside_hexagon(opening: OpeningGeometry, point: np.ndarray) -> bool:
    # in-plane coordinates relative to the center
    n = opening.plane_normal
    ref = np.array([1.0, 0.0, 0.0])
    if abs(n @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    e1 = np.cross(n, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    rel = opening.hexagon - opening.p_center
    hx = rel @ e1
    hy = rel @ e2
    px = float((point - opening.p_center) @ e1)
    py = float((point - opening.p_center) @ e2)
    # fan triangles (0, v_i, v_{i+1}); star-shaped about the center
    for i in range(6):
        j = (i + 1) % 6
        if _in_triangle(px, py, hx[i], hy[i], hx[j], hy[j]):
            return True
    return False


def _in_triangle(px, py, ax, ay, bx, by) -> bool:
    # signed areas against (0,0); tolerance in area units of unit-length
    # edges so it acts as a distance tolerance
    def side(x0, y0, x1, y1):
        edge = np.hypot(x1 - x0, y1 - y0)
        cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        return cross / edge if edge > 0 else 0.0

    s1 = side(0.0, 0.0, ax, ay)
    s2 = side(ax, ay, bx, by)
    s3 = side(bx, by, 0.0, 0.0)
    return (min(s1, s2, s3) >= -EDGE_TOLERANCE
            or max(s1, s2, s3) <= EDGE_TOLERANCE)


def compute_progress(opening: OpeningGeometry,
                     geom: ArmGeometry) -> DressProgress:
    """Locate the opening crossing: forearm first, upper arm overrides."""
    p_fore = hexagon_segment_intersection(opening, geom.p_finger, geom.p_elbow)
    p_up = hexagon_segment_intersection(opening, geom.p_elbow, geom.p_shoulder)
    if p_up is not None:
        return DressProgress(
            phase=PHASE_UPPER, p_int=p_up,
            forearm_dressed=geom.forearm_length,
            upper_dressed=float(np.linalg.norm(p_up - geom.p_elbow)))
    if p_fore is not None:
        return DressProgress(
            phase=PHASE_FOREARM, p_int=p_fore,
            forearm_dressed=float(np.linalg.norm(p_fore - geom.p_finger)),
            upper_dressed=0.0)
    return DressProgress(phase=PHASE_APPROACH, p_int=None,
                         forearm_dressed=0.0, upper_dressed=0.0)


def compute_reward(progress: DressProgress, opening: OpeningGeometry,
                   step_out: StepOutcome, geom: ArmGeometry,
                   params: RewardParams) -> RewardBreakdown:
    if progress.phase == PHASE_APPROACH:
        r_m = -float(np.linalg.norm(opening.p_center - geom.p_finger))
    elif progress.phase == PHASE_FOREARM:
        r_m = float(np.linalg.norm(progress.p_int - geom.p_finger))
    else:
        r_m = geom.forearm_length + params.w * float(
            np.linalg.norm(progress.p_int - geom.p_elbow))
    r_f = -params.force_coeff * max(
        step_out.total_arm_force - params.f_max, 0.0)
    r_c = -params.contact_coeff * float(
        step_out.min_gripper_arm_distance < params.d_min)
    d_g = step_out.center_arm_distance
    if d_g < params.deviation_near:
        r_d = params.deviation_bonus
    elif d_g > params.deviation_far:
        r_d = -params.deviation_penalty
    else:
        r_d = 0.0
    return RewardBreakdown(r_m=r_m, r_f=r_f, r_c=r_c, r_d=r_d)


def compute_metrics(progress: DressProgress, geom: ArmGeometry):
    """(upper_ratio, whole_ratio, success): dressed fractions and the 0.8
    upper-arm success gate."""
    upper_ratio = min(max(progress.upper_dressed / geom.upper_arm_length,
                          0.0), 1.0)
    whole_ratio = ((progress.forearm_dressed + progress.upper_dressed)
                   / (geom.forearm_length + geom.upper_arm_length))
    return upper_ratio, whole_ratio, upper_ratio >= 0.8
