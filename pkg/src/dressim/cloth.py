"""Position-based-dynamics cloth on a capsule arm.

Per substep: symplectic-Euler prediction under gravity, `solver_iterations`
rounds of distance-constraint projection (stretch, shear, bend families in
that order, Jacobi within a family with per-particle degree normalization),
then capsule collision push-out with a Coulomb-style tangential friction
clamp, then velocity update from the position change.

Stiffness k in [0, 1] is made iteration-count-independent through the
standard per-iteration correction k' = 1 - (1 - k)^(1/iterations).

Grasped particles are pinned (inverse mass 0) and rigidly framed to the
gripper pose; constraints and collisions never move them. The gripper frame
is R_z(yaw) @ R_y(pitch), roll fixed at zero.

Force readout: the garment-to-arm force for a step is
    f = sum over substeps, colliding particles of
        ||collision position correction|| * particle_mass / dt_substep^2,
an impulse-derived proxy in simulator units (not Newtons); force thresholds
are calibrated against it in config.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from weakref import WeakKeyDictionary

import numpy as np

from .arm import ArmGeometry, BodyParams
from .garment import GarmentMesh


class SimulationDivergedError(RuntimeError):
    """Raised when particle state stops being finite."""


@dataclass(frozen=True)
class SimParams:
    stretch_stiffness: float = 0.3
    shear_stiffness: float = 0.3
    bend_stiffness: float = 0.3
    particle_radius: float = 0.00625
    friction: float = 0.3
    dt: float = 0.01
    solver_iterations: int = 6
    substeps: int = 2
    gravity: float = -9.81
    # deformation-mode velocity damping per substep; rigid translation and
    # rotation of the free cloth are preserved exactly
    damping: float = 0.1

    def __post_init__(self) -> None:
        for k in ("stretch_stiffness", "shear_stiffness", "bend_stiffness"):
            v = getattr(self, k)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{k} must be in [0, 1]")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.solver_iterations < 1 or self.substeps < 1:
            raise ValueError("iterations and substeps must be >= 1")
        if self.particle_radius <= 0:
            raise ValueError("particle_radius must be positive")
        if not 0.0 <= self.damping <= 1.0:
            raise ValueError("damping must be in [0, 1]")


@dataclass
class ClothState:
    """Owned value; step() returns a fresh state and never mutates inputs."""

    positions: np.ndarray       # (N, 3)
    velocities: np.ndarray      # (N, 3)
    inverse_masses: np.ndarray  # (N,), 0 for pinned
    gripper_pos: np.ndarray     # (3,)
    gripper_yaw: float = 0.0
    gripper_pitch: float = 0.0
    pinned: np.ndarray | None = None        # (K,) int, set by attach_gripper
    grasp_offsets: np.ndarray | None = None  # (K, 3) in gripper frame


@dataclass(frozen=True)
class GripperMotion:
    """Per-step gripper delta: world translation plus yaw/pitch increments."""

    translation: np.ndarray  # (3,) meters
    d_yaw: float = 0.0       # radians
    d_pitch: float = 0.0

    @staticmethod
    def zero() -> "GripperMotion":
        return GripperMotion(np.zeros(3))


@dataclass(frozen=True)
class StepOutcome:
    new_state: ClothState
    total_arm_force: float
    min_gripper_arm_distance: float
    center_arm_distance: float


def gripper_rotation(yaw: float, pitch: float) -> np.ndarray:
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    return rz @ ry


def make_cloth_state(mesh: GarmentMesh, transform=None) -> ClothState:
    """Rest-pose particles, optionally placed by (rotation, translation)."""
    pos = mesh.vertices.copy()
    if transform is not None:
        rot, trans = transform
        pos = pos @ np.asarray(rot).T + np.asarray(trans)
    return ClothState(
        positions=pos,
        velocities=np.zeros_like(pos),
        inverse_masses=np.ones(len(pos)),
        gripper_pos=np.zeros(3),
    )


def attach_gripper(
    state: ClothState, mesh: GarmentMesh, gripper_pos, yaw: float = 0.0,
    pitch: float = 0.0,
) -> ClothState:
    """Pin grasp vertices rigidly to the gripper frame."""
    if not mesh.grasp_vertices:
        raise ValueError("garment has no grasp vertices")
    pinned = np.array(mesh.grasp_vertices, dtype=np.int64)
    gripper_pos = np.asarray(gripper_pos, dtype=np.float64)
    inv = state.inverse_masses.copy()
    inv[pinned] = 0.0
    rot = gripper_rotation(yaw, pitch)
    offsets = (state.positions[pinned] - gripper_pos) @ rot
    return ClothState(
        positions=state.positions.copy(),
        velocities=state.velocities.copy(),
        inverse_masses=inv,
        gripper_pos=gripper_pos,
        gripper_yaw=yaw,
        gripper_pitch=pitch,
        pinned=pinned,
        grasp_offsets=offsets,
    )


# ---------------------------------------------------------------------------
# precomputed constraint arrays, cached per mesh
#
# Edges are greedily colored so that no two edges in a color share a vertex;
# colors are projected sequentially, making the vectorized update an exact
# Gauss-Seidel sweep (pairwise antisymmetric corrections, so momentum is
# conserved to round-off for equal masses).

@dataclass(frozen=True)
class _Constraints:
    families: tuple  # per family: tuple of (i, j, rest) color groups, or None


_CONSTRAINT_CACHE: "WeakKeyDictionary[GarmentMesh, _Constraints]" = (
    WeakKeyDictionary()
)


def _color_edges(edges: np.ndarray, num_vertices: int):
    vertex_colors: list[set[int]] = [set() for _ in range(num_vertices)]
    colors = np.empty(len(edges), dtype=np.int64)
    for e, (a, b) in enumerate(edges):
        used = vertex_colors[a] | vertex_colors[b]
        c = 0
        while c in used:
            c += 1
        colors[e] = c
        vertex_colors[a].add(c)
        vertex_colors[b].add(c)
    return colors


def _build_constraints(mesh: GarmentMesh) -> _Constraints:
    fams = []
    for edges in (mesh.stretch_edges, mesh.shear_edges, mesh.bend_pairs):
        if edges.shape[0] == 0:
            fams.append(None)
            continue
        colors = _color_edges(edges, mesh.num_vertices)
        groups = []
        for c in range(colors.max() + 1):
            sel = colors == c
            i = edges[sel, 0].astype(np.int64)
            j = edges[sel, 1].astype(np.int64)
            rest = np.linalg.norm(mesh.vertices[i] - mesh.vertices[j], axis=1)
            groups.append((i, j, rest))
        fams.append(tuple(groups))
    return _Constraints(families=tuple(fams))


def _constraints_for(mesh: GarmentMesh) -> _Constraints:
    c = _CONSTRAINT_CACHE.get(mesh)
    if c is None:
        c = _build_constraints(mesh)
        _CONSTRAINT_CACHE[mesh] = c
    return c


def _project_family(pos, inv_mass, groups, k_iter):
    for i, j, rest in groups:
        d = pos[i] - pos[j]
        length = np.linalg.norm(d, axis=1)
        w_i = inv_mass[i]
        w_j = inv_mass[j]
        w_sum = w_i + w_j
        ok = (w_sum > 0.0) & (length > 1e-12)
        denom = np.where(ok, length * w_sum, 1.0)
        scale = np.where(ok, (length - rest) / denom, 0.0) * k_iter
        corr = scale[:, None] * d
        pos[i] -= w_i[:, None] * corr
        pos[j] += w_j[:, None] * corr


def _damp_deformation(pos, vel, inv_mass, free, k):
    """Damp free-particle velocities toward the best-fit rigid mode.

    For fully free cloth the fit is mass-weighted over all particles, so the
    update changes neither linear nor angular momentum (only deformation
    energy is removed). Pinned particles enter the fit with a huge mass,
    anchoring the rigid mode to the gripper's own motion, which lets a
    hanging cloth's pendulum swing decay.
    """
    if k <= 0.0 or free.sum() < 2:
        return
    mass = np.where(free, 1.0 / np.maximum(inv_mass, 1e-12), 1e6)
    total = mass.sum()
    x_cm = (mass[:, None] * pos).sum(axis=0) / total
    v_cm = (mass[:, None] * vel).sum(axis=0) / total
    r = pos - x_cm
    ang_mom = np.cross(r, mass[:, None] * vel).sum(axis=0)
    rr = (mass * (r * r).sum(axis=1)).sum()
    inertia = rr * np.eye(3) - (mass[:, None] * r).T @ r
    try:
        omega = np.linalg.solve(inertia, ang_mom)
    except np.linalg.LinAlgError:
        omega = np.zeros(3)
    rigid = v_cm + np.cross(omega, r[free])
    vel[free] += k * (rigid - vel[free])


def _capsule_push(pos, geom: ArmGeometry, body: BodyParams, margin):
    """Penetration depth and outward normal wrt the nearer capsule.

    Returns (depth, normal) with depth > 0 where pos is closer than margin.
    """
    out_depth = np.zeros(len(pos))
    out_normal = np.zeros_like(pos)
    best = np.full(len(pos), np.inf)
    for a, b, r in (
        (geom.p_shoulder, geom.p_elbow, body.upper_arm_radius),
        (geom.p_elbow, geom.p_finger, body.forearm_radius),
    ):
        ab = b - a
        t = np.clip((pos - a) @ ab / float(ab @ ab), 0.0, 1.0)
        closest = a + t[:, None] * ab
        rel = pos - closest
        dist_axis = np.linalg.norm(rel, axis=1)
        signed = dist_axis - r
        nearer = signed < best
        if not nearer.any():
            continue
        safe = np.maximum(dist_axis, 1e-12)
        normal = rel / safe[:, None]
        # particle exactly on the axis: push along a fixed perpendicular
        on_axis = dist_axis < 1e-12
        if on_axis.any():
            perp = np.cross(ab, np.array([0.0, 0.0, 1.0]))
            if np.linalg.norm(perp) < 1e-12:
                perp = np.cross(ab, np.array([0.0, 1.0, 0.0]))
            perp = perp / np.linalg.norm(perp)
            normal[on_axis] = perp
        best[nearer] = signed[nearer]
        out_normal[nearer] = normal[nearer]
        out_depth[nearer] = margin - signed[nearer]
    return np.maximum(out_depth, 0.0), out_normal


def step(
    state: ClothState,
    mesh: GarmentMesh,
    params: SimParams,
    geom: ArmGeometry,
    body: BodyParams,
    motion: GripperMotion | None = None,
) -> StepOutcome:
    """Advance one control step (params.substeps PBD substeps)."""
    if motion is None:
        motion = GripperMotion.zero()
    cons = _constraints_for(mesh)
    n_sub = params.substeps
    dt_s = params.dt / n_sub
    k_iter = [
        1.0 - (1.0 - k) ** (1.0 / params.solver_iterations)
        for k in (params.stretch_stiffness, params.shear_stiffness,
                  params.bend_stiffness)
    ]

    pos = state.positions.copy()
    vel = state.velocities.copy()
    inv_mass = state.inverse_masses
    free = inv_mass > 0.0
    g_pos = state.gripper_pos.copy()
    g_yaw, g_pitch = state.gripper_yaw, state.gripper_pitch
    pinned = state.pinned
    offsets = state.grasp_offsets

    total_force = 0.0
    margin = params.particle_radius
    for _ in range(n_sub):
        vel[free, 2] += params.gravity * dt_s
        _damp_deformation(pos, vel, inv_mass, free, params.damping)
        old = pos
        pos = pos + vel * dt_s
        # gripper advances by an equal fraction each substep
        g_pos = g_pos + motion.translation / n_sub
        g_yaw += motion.d_yaw / n_sub
        g_pitch += motion.d_pitch / n_sub
        if pinned is not None:
            rot = gripper_rotation(g_yaw, g_pitch)
            pos[pinned] = g_pos + offsets @ rot.T

        for _i in range(params.solver_iterations):
            for groups, k in zip(cons.families, k_iter):
                if groups is None or k == 0.0:
                    continue
                _project_family(pos, inv_mass, groups, k)

        # push-out may need a second pass near the elbow wedge, where leaving
        # one capsule's margin can still violate the other's
        corr_norm = np.zeros(len(pos))
        for _pass in range(3):
            depth, normal = _capsule_push(pos, geom, body, margin)
            hit = (depth > 0.0) & free
            if not hit.any():
                break
            push = depth[hit, None] * normal[hit]
            pos[hit] += push
            # Coulomb clamp on the tangential slide accumulated this substep
            slide = pos[hit] - old[hit]
            n_h = normal[hit]
            tangent = slide - (np.sum(slide * n_h, axis=1))[:, None] * n_h
            t_len = np.linalg.norm(tangent, axis=1)
            limit = params.friction * depth[hit]
            scale = np.where(t_len > 1e-12,
                             np.minimum(1.0, limit / np.maximum(t_len, 1e-12)),
                             0.0)
            fric = -(1.0 - scale)[:, None] * tangent
            pos[hit] += fric
            corr_norm[hit] += np.linalg.norm(push + fric, axis=1)
        if corr_norm.any():
            mass = np.where(inv_mass > 0, 1.0 / np.maximum(inv_mass, 1e-12), 0.0)
            total_force += float((corr_norm * mass).sum() / dt_s**2)
        vel = (pos - old) / dt_s

    if not np.isfinite(pos).all():
        bad = int(np.argwhere(~np.isfinite(pos).all(axis=1))[0, 0])
        raise SimulationDivergedError(f"particle {bad} became non-finite")

    new_state = ClothState(
        positions=pos,
        velocities=vel,
        inverse_masses=inv_mass.copy(),
        gripper_pos=g_pos,
        gripper_yaw=g_yaw,
        gripper_pitch=g_pitch,
        pinned=None if pinned is None else pinned.copy(),
        grasp_offsets=None if offsets is None else offsets.copy(),
    )

    from .arm import arm_distance  # local import to avoid cycle at module load

    d_e = float(arm_distance(g_pos, geom, body))
    ring = pos[list(mesh.opening_ring)]
    d_g = float(arm_distance(ring.mean(axis=0), geom, body))
    return StepOutcome(
        new_state=new_state,
        total_arm_force=total_force,
        min_gripper_arm_distance=d_e,
        center_arm_distance=d_g,
    )


def settle(
    state: ClothState,
    mesh: GarmentMesh,
    params: SimParams,
    geom: ArmGeometry,
    body: BodyParams,
    steps: int,
    speed_threshold: float = 0.01,
) -> ClothState:
    """Run zero-action steps until quiescent or the budget runs out."""
    for _ in range(steps):
        state = step(state, mesh, params, geom, body).new_state
        free = state.inverse_masses > 0
        if not free.any():
            break
        if np.linalg.norm(state.velocities[free], axis=1).max() < speed_threshold:
            break
    return state
