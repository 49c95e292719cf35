"""Synthetic depth camera and the observation pipeline built on top of it.

A pinhole camera raycasts the scene (two arm capsules, cloth triangles) into
a labeled depth image.  Labeled pixels deproject to segmented point clouds,
which pass through voxel downsampling, arm cropping, garment cropping and the
training-time randomizations before they reach the policy:

  * garment crop: keep points above (finger z - d1), below (gripper z + d2)
    and behind (gripper x + d3); d1..d3 resampled every observation,
  * gripper-proximity drop: active for a whole episode with probability 0.5,
  * erosion / dilation of the garment label mask before deprojection,
  * a constant per-episode offset on the gripper point.

Arm points are never randomized.  Deployment mode applies only the garment
crop, at fixed deltas.  The observation itself is the concatenation
[arm; garment; gripper] with a one-hot class per point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import ndimage

from .arm import ArmGeometry, BodyParams, segment_point_distance

LABEL_NONE = 0
LABEL_ARM = 1
LABEL_GARMENT = 2

# one-hot column layout of SegmentedPointCloud.class_onehot
CLASS_GARMENT = 0
CLASS_ARM = 1
CLASS_GRIPPER = 2

DEFAULT_VOXEL_SIZE = 0.0625
DEFAULT_ARM_CROP = 0.075


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics in pixels, extrinsics world-from-camera.

    Camera frame is the usual computer-vision one: +x right, +y down,
    +z forward (the optical axis).  ``rotation`` columns are those axes
    expressed in world coordinates.
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    position: np.ndarray
    rotation: np.ndarray

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        pos.setflags(write=False)
        rot.setflags(write=False)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "rotation", rot)


def look_at_camera(
    position,
    target,
    up=(0.0, 0.0, 1.0),
    width: int = 128,
    height: int = 128,
    fov_degrees: float = 60.0,
) -> CameraModel:
    """Camera at ``position`` with the optical axis through ``target``.

    ``fov_degrees`` is the horizontal field of view; fy = fx (square pixels).
    The principal point sits on the integer pixel grid so the center pixel
    looks exactly down the optical axis.
    """
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    z = target - position
    norm = np.linalg.norm(z)
    if norm < 1e-12:
        raise ValueError("camera position and target coincide")
    z = z / norm
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    norm = np.linalg.norm(x)
    if norm < 1e-12:
        raise ValueError("camera optical axis is parallel to the up vector")
    x = x / norm
    y = np.cross(z, x)
    fx = 0.5 * width / np.tan(np.radians(fov_degrees) / 2.0)
    return CameraModel(
        width=width, height=height, fx=fx, fy=fx,
        cx=width // 2, cy=height // 2,
        position=position, rotation=np.column_stack([x, y, z]))


@dataclass
class DepthImage:
    """Raycast output: per-pixel depth (camera-frame z, inf where nothing was
    hit) and a per-pixel class label."""

    depth: np.ndarray
    label: np.ndarray
    camera: CameraModel

    def __post_init__(self) -> None:
        h, w = self.depth.shape
        if (h, w) != (self.camera.height, self.camera.width):
            raise ValueError("depth image does not match camera dimensions")
        if self.label.shape != self.depth.shape:
            raise ValueError("label image does not match depth image")
        d = self.depth[self.label != LABEL_NONE]
        if d.size and not (np.isfinite(d) & (d > 0)).all():
            raise ValueError("labeled pixels must have positive finite depth")


@dataclass
class SegmentedPointCloud:
    """Points with one-hot classes, ordered [arm; garment; gripper].

    Exactly one gripper point, always the last row.
    """

    points: np.ndarray
    class_onehot: np.ndarray

    def __post_init__(self) -> None:
        if self.points.shape != (self.class_onehot.shape[0], 3):
            raise ValueError("points and classes disagree on shape")
        if self.class_onehot.shape[1] != 3:
            raise ValueError("class_onehot must have three columns")
        if not np.isfinite(self.points).all():
            raise ValueError("point coordinates must be finite")
        if (self.class_onehot.sum(axis=1) != 1.0).any():
            raise ValueError("every one-hot row must sum to 1")
        if self.class_onehot[:, CLASS_GRIPPER].sum() != 1.0:
            raise ValueError("observation must contain exactly one gripper point")

    @property
    def num_points(self) -> int:
        return self.points.shape[0]

    def points_of_class(self, column: int) -> np.ndarray:
        return self.points[self.class_onehot[:, column] == 1.0]

    @property
    def gripper_point(self) -> np.ndarray:
        return self.points_of_class(CLASS_GRIPPER)[0]


@numba.njit(cache=True)
def _raycast_scene(origin, dirs, zfac, seg_a, seg_b, radii, tri_verts):
    """Nearest hit per ray: capsule lateral surface + end caps (smallest
    t > 1e-9), triangles via Moller-Trumbore without backface culling.

    Everything that does not depend on the ray (capsule axis frames, the
    origin-relative offsets, triangle edge and q = offset x e1 vectors) is
    hoisted out of the pixel loop, and the loop itself is scalar-only; per
    primitive-test allocations were the dominant cost of rendering.
    """
    n = dirs.shape[0]
    ncap = seg_a.shape[0]
    ntri = tri_verts.shape[0]
    depth = np.full(n, np.inf)
    label = np.zeros(n, dtype=np.uint8)

    clen = np.empty(ncap)
    cux = np.empty(ncap)
    cuy = np.empty(ncap)
    cuz = np.empty(ncap)
    m_axis = np.empty(ncap)
    mpx = np.empty(ncap)
    mpy = np.empty(ncap)
    mpz = np.empty(ncap)
    qc_body = np.empty(ncap)
    amx = np.empty(ncap)   # origin - a, for the a-side end cap
    amy = np.empty(ncap)
    amz = np.empty(ncap)
    qc_a = np.empty(ncap)
    bmx = np.empty(ncap)   # origin - b
    bmy = np.empty(ncap)
    bmz = np.empty(ncap)
    qc_b = np.empty(ncap)
    for c in range(ncap):
        abx = seg_b[c, 0] - seg_a[c, 0]
        aby = seg_b[c, 1] - seg_a[c, 1]
        abz = seg_b[c, 2] - seg_a[c, 2]
        length = np.sqrt(abx ** 2 + aby ** 2 + abz ** 2)
        clen[c] = length
        amx[c] = origin[0] - seg_a[c, 0]
        amy[c] = origin[1] - seg_a[c, 1]
        amz[c] = origin[2] - seg_a[c, 2]
        qc_a[c] = amx[c] ** 2 + amy[c] ** 2 + amz[c] ** 2 \
            - radii[c] * radii[c]
        bmx[c] = origin[0] - seg_b[c, 0]
        bmy[c] = origin[1] - seg_b[c, 1]
        bmz[c] = origin[2] - seg_b[c, 2]
        qc_b[c] = bmx[c] ** 2 + bmy[c] ** 2 + bmz[c] ** 2 \
            - radii[c] * radii[c]
        if length > 1e-12:
            ux = abx / length
            uy = aby / length
            uz = abz / length
            ma = amx[c] * ux + amy[c] * uy + amz[c] * uz
            cux[c] = ux
            cuy[c] = uy
            cuz[c] = uz
            m_axis[c] = ma
            mpx[c] = amx[c] - ma * ux
            mpy[c] = amy[c] - ma * uy
            mpz[c] = amz[c] - ma * uz
            qc_body[c] = mpx[c] ** 2 + mpy[c] ** 2 + mpz[c] ** 2 \
                - radii[c] * radii[c]
        else:
            cux[c] = 0.0
            cuy[c] = 0.0
            cuz[c] = 0.0
            m_axis[c] = 0.0
            mpx[c] = 0.0
            mpy[c] = 0.0
            mpz[c] = 0.0
            qc_body[c] = 0.0

    e1x = np.empty(ntri)
    e1y = np.empty(ntri)
    e1z = np.empty(ntri)
    e2x = np.empty(ntri)
    e2y = np.empty(ntri)
    e2z = np.empty(ntri)
    qx = np.empty(ntri)    # (origin - v0) x e1
    qy = np.empty(ntri)
    qz = np.empty(ntri)
    tdp_x = np.empty(ntri)  # origin - v0
    tdp_y = np.empty(ntri)
    tdp_z = np.empty(ntri)
    e2q = np.empty(ntri)
    for k in range(ntri):
        e1x[k] = tri_verts[k, 1, 0] - tri_verts[k, 0, 0]
        e1y[k] = tri_verts[k, 1, 1] - tri_verts[k, 0, 1]
        e1z[k] = tri_verts[k, 1, 2] - tri_verts[k, 0, 2]
        e2x[k] = tri_verts[k, 2, 0] - tri_verts[k, 0, 0]
        e2y[k] = tri_verts[k, 2, 1] - tri_verts[k, 0, 1]
        e2z[k] = tri_verts[k, 2, 2] - tri_verts[k, 0, 2]
        tx = origin[0] - tri_verts[k, 0, 0]
        ty = origin[1] - tri_verts[k, 0, 1]
        tz = origin[2] - tri_verts[k, 0, 2]
        tdp_x[k] = tx
        tdp_y[k] = ty
        tdp_z[k] = tz
        qx[k] = ty * e1z[k] - tz * e1y[k]
        qy[k] = tz * e1x[k] - tx * e1z[k]
        qz[k] = tx * e1y[k] - ty * e1x[k]
        e2q[k] = e2x[k] * qx[k] + e2y[k] * qy[k] + e2z[k] * qz[k]

    for i in range(n):
        dx = dirs[i, 0]
        dy = dirs[i, 1]
        dz = dirs[i, 2]
        best = np.inf
        hit = 0
        for c in range(ncap):
            if clen[c] > 1e-12:
                d_axis = dx * cux[c] + dy * cuy[c] + dz * cuz[c]
                dpx = dx - d_axis * cux[c]
                dpy = dy - d_axis * cuy[c]
                dpz = dz - d_axis * cuz[c]
                qa = dpx ** 2 + dpy ** 2 + dpz ** 2
                qb = 2.0 * (mpx[c] * dpx + mpy[c] * dpy + mpz[c] * dpz)
                if qa > 1e-14:
                    disc = qb * qb - 4.0 * qa * qc_body[c]
                    if disc >= 0.0:
                        root = np.sqrt(disc)
                        for sign in (-1.0, 1.0):
                            t = (-qb + sign * root) / (2.0 * qa)
                            if 1e-9 < t < best:
                                s = m_axis[c] + t * d_axis
                                if 0.0 <= s <= clen[c]:
                                    best = t
                                    hit = LABEL_ARM
            qb = 2.0 * (amx[c] * dx + amy[c] * dy + amz[c] * dz)
            disc = qb * qb - 4.0 * qc_a[c]
            if disc >= 0.0:
                root = np.sqrt(disc)
                for sign in (-1.0, 1.0):
                    t = (-qb + sign * root) / 2.0
                    if 1e-9 < t < best:
                        best = t
                        hit = LABEL_ARM
            qb = 2.0 * (bmx[c] * dx + bmy[c] * dy + bmz[c] * dz)
            disc = qb * qb - 4.0 * qc_b[c]
            if disc >= 0.0:
                root = np.sqrt(disc)
                for sign in (-1.0, 1.0):
                    t = (-qb + sign * root) / 2.0
                    if 1e-9 < t < best:
                        best = t
                        hit = LABEL_ARM
        for k in range(ntri):
            px = dy * e2z[k] - dz * e2y[k]
            py = dz * e2x[k] - dx * e2z[k]
            pz = dx * e2y[k] - dy * e2x[k]
            det = e1x[k] * px + e1y[k] * py + e1z[k] * pz
            if -1e-14 < det < 1e-14:
                continue
            inv = 1.0 / det
            u = (tdp_x[k] * px + tdp_y[k] * py + tdp_z[k] * pz) * inv
            if u < 0.0 or u > 1.0:
                continue
            v = (dx * qx[k] + dy * qy[k] + dz * qz[k]) * inv
            if v < 0.0 or u + v > 1.0:
                continue
            t = e2q[k] * inv
            if 1e-9 < t < best:
                best = t
                hit = LABEL_GARMENT
        if hit != 0:
            depth[i] = best * zfac[i]
            label[i] = hit
    return depth, label


def _pixel_rays(camera: CameraModel):
    """World-frame unit ray directions plus the ray-length -> z-depth factor,
    both flattened row-major."""
    u = np.arange(camera.width, dtype=np.float64)
    v = np.arange(camera.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    cam = np.stack([
        (uu - camera.cx) / camera.fx,
        (vv - camera.cy) / camera.fy,
        np.ones_like(uu),
    ], axis=-1).reshape(-1, 3)
    norms = np.linalg.norm(cam, axis=1)
    dirs = (cam / norms[:, None]) @ camera.rotation.T
    return dirs, 1.0 / norms


def render_scene(
    cloth_positions: np.ndarray,
    triangles: np.ndarray,
    geom: ArmGeometry,
    body: BodyParams,
    camera: CameraModel,
) -> DepthImage:
    """Nearest-hit raycast of the arm capsules and the cloth mesh."""
    dirs, zfac = _pixel_rays(camera)
    seg_a = np.stack([geom.p_shoulder, geom.p_elbow])
    seg_b = np.stack([geom.p_elbow, geom.p_finger])
    radii = np.array([body.upper_arm_radius, body.forearm_radius])
    if len(triangles):
        tri_verts = np.ascontiguousarray(
            cloth_positions[np.asarray(triangles, dtype=np.int64)])
    else:
        tri_verts = np.zeros((0, 3, 3))
    depth, label = _raycast_scene(
        np.ascontiguousarray(camera.position, dtype=np.float64),
        np.ascontiguousarray(dirs), zfac, seg_a, seg_b, radii, tri_verts)
    shape = (camera.height, camera.width)
    return DepthImage(depth=depth.reshape(shape),
                      label=label.reshape(shape), camera=camera)


def deproject(image: DepthImage, label_value: int,
              mask: np.ndarray | None = None) -> np.ndarray:
    """World-frame points of the pixels carrying ``label_value``.

    ``mask`` overrides the label lookup (used after morphology on the
    garment mask); depth must be finite wherever the mask is set.
    """
    if mask is None:
        mask = image.label == label_value
    v, u = np.nonzero(mask)
    if len(v) == 0:
        return np.zeros((0, 3))
    d = image.depth[v, u]
    cam = image.camera
    pts_cam = np.stack([
        (u - cam.cx) / cam.fx * d,
        (v - cam.cy) / cam.fy * d,
        d,
    ], axis=-1)
    return pts_cam @ cam.rotation.T + cam.position


def voxel_filter(points: np.ndarray,
                 voxel_size: float = DEFAULT_VOXEL_SIZE) -> np.ndarray:
    """One centroid per occupied voxel, rows ordered by voxel index.

    Voxel membership is floor(coordinate / voxel_size) per axis; the output
    is sorted lexicographically by (ix, iy, iz), so it does not depend on
    the input point order.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return np.zeros((0, 3))
    idx = np.floor(points / voxel_size).astype(np.int64)
    # lexicographic sort of voxel indices, then segment means
    order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0]))
    idx = idx[order]
    pts = points[order]
    boundary = np.any(idx[1:] != idx[:-1], axis=1)
    starts = np.concatenate([[0], np.nonzero(boundary)[0] + 1])
    sums = np.add.reduceat(pts, starts, axis=0)
    counts = np.diff(np.concatenate([starts, [len(pts)]]))
    return sums / counts[:, None]


def crop_arm(points: np.ndarray, geom: ArmGeometry,
             threshold: float = DEFAULT_ARM_CROP) -> np.ndarray:
    """Keep points strictly closer than ``threshold`` to either arm segment."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return points
    d_fore = segment_point_distance(points, geom.p_finger, geom.p_elbow)
    d_up = segment_point_distance(points, geom.p_elbow, geom.p_shoulder)
    return points[np.minimum(d_fore, d_up) < threshold]


def garment_keep_mask(points: np.ndarray, finger_z: float,
                      gripper_pos: np.ndarray,
                      d1: float, d2: float, d3: float) -> np.ndarray:
    """Garment crop predicate: above finger_z - d1, below gripper z + d2,
    behind gripper x + d3 (x is the forward axis, z is up)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return ((points[:, 2] > finger_z - d1)
            & (points[:, 2] < gripper_pos[2] + d2)
            & (points[:, 0] < gripper_pos[0] + d3))


def assemble_observation(arm_points: np.ndarray, garment_points: np.ndarray,
                         gripper_pos: np.ndarray,
                         voxel_size: float = DEFAULT_VOXEL_SIZE,
                         ) -> SegmentedPointCloud:
    """Voxel-filter both sets, then concatenate [arm; garment; gripper]."""
    arm_points = voxel_filter(arm_points, voxel_size)
    garment_points = voxel_filter(garment_points, voxel_size)
    gripper = np.asarray(gripper_pos, dtype=np.float64).reshape(1, 3)
    points = np.concatenate([arm_points, garment_points, gripper])
    onehot = np.zeros((len(points), 3))
    onehot[:len(arm_points), CLASS_ARM] = 1.0
    onehot[len(arm_points):len(arm_points) + len(garment_points),
           CLASS_GARMENT] = 1.0
    onehot[-1, CLASS_GRIPPER] = 1.0
    return SegmentedPointCloud(points=points, class_onehot=onehot)


MODE_TRAIN = "train_randomized"
MODE_DEPLOY = "deploy_fixed"
MODE_OFF = "off"

DEPLOY_DELTAS = (0.15, 0.02, 0.01)


@dataclass(frozen=True)
class RandomizerConfig:
    """Observation randomization ranges (meters) and mode."""

    delta1_range: tuple[float, float] = (0.10, 0.25)
    delta2_range: tuple[float, float] = (0.01, 0.05)
    delta3_range: tuple[float, float] = (0.01, 0.05)
    delta4: float = 0.09375
    drop_probability: float = 0.5
    kernel_sizes: tuple[int, ...] = (0, 3, 5, 7, 9, 11, 13, 15, 17, 19)
    gripper_noise_range: tuple[float, float] = (-0.03125, 0.03125)
    mode: str = MODE_TRAIN

    def __post_init__(self) -> None:
        if self.mode not in (MODE_TRAIN, MODE_DEPLOY, MODE_OFF):
            raise ValueError(f"unknown randomizer mode: {self.mode!r}")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop_probability must be in [0, 1]")
        if self.delta4 < 0:
            raise ValueError("delta4 must be nonnegative")
        for k in self.kernel_sizes:
            if k != 0 and (k < 0 or k % 2 == 0):
                raise ValueError("kernel sizes must be 0 or odd positive")
        for lo, hi in (self.delta1_range, self.delta2_range,
                       self.delta3_range, self.gripper_noise_range):
            if hi < lo:
                raise ValueError("range bounds must be ordered")


@dataclass(frozen=True)
class EpisodeRandomization:
    """Draws held constant over one episode: the gripper offset and whether
    gripper-proximity dropping is active."""

    gripper_noise: np.ndarray = field(
        default_factory=lambda: np.zeros(3))
    drop_active: bool = False


def sample_episode_randomization(
        cfg: RandomizerConfig,
        rng: np.random.Generator) -> EpisodeRandomization:
    if cfg.mode != MODE_TRAIN:
        return EpisodeRandomization()
    lo, hi = cfg.gripper_noise_range
    return EpisodeRandomization(
        gripper_noise=rng.uniform(lo, hi, size=3),
        drop_active=bool(rng.random() < cfg.drop_probability))


def _morph_garment(depth: np.ndarray, garment_mask: np.ndarray,
                   erosion_k: int, dilation_k: int):
    """Erode or dilate the garment mask; dilation fills new pixels with the
    depth of the nearest original garment pixel.  Returns (mask, depth)."""
    if erosion_k and dilation_k:
        raise ValueError("erosion and dilation are mutually exclusive")
    if erosion_k:
        structure = np.ones((erosion_k, erosion_k), dtype=bool)
        return ndimage.binary_erosion(garment_mask, structure), depth
    if dilation_k:
        structure = np.ones((dilation_k, dilation_k), dtype=bool)
        grown = ndimage.binary_dilation(garment_mask, structure)
        added = grown & ~garment_mask
        if added.any():
            _, (iv, iu) = ndimage.distance_transform_edt(
                ~garment_mask, return_indices=True)
            depth = depth.copy()
            depth[added] = depth[iv[added], iu[added]]
        return grown, depth
    return garment_mask, depth


def randomize_observation(
    image: DepthImage,
    geom: ArmGeometry,
    gripper_pos: np.ndarray,
    cfg: RandomizerConfig,
    rng: np.random.Generator,
    episode: EpisodeRandomization | None = None,
    arm_points: np.ndarray | None = None,
    voxel_size: float = DEFAULT_VOXEL_SIZE,
    arm_crop_threshold: float = DEFAULT_ARM_CROP,
) -> SegmentedPointCloud:
    """Build the (randomized) policy observation from a labeled depth image.

    ``arm_points`` short-circuits the arm half of the pipeline with a cloud
    captured earlier (the arm is static during an episode, so environments
    deproject and crop it once).  In train mode, pass the ``episode`` draws
    sampled at reset; per-observation draws (crop deltas, morphology kernel)
    come from ``rng``.
    """
    gripper_pos = np.asarray(gripper_pos, dtype=np.float64).reshape(3)
    if arm_points is None:
        arm_points = crop_arm(
            deproject(image, LABEL_ARM), geom, arm_crop_threshold)

    garment_mask = image.label == LABEL_GARMENT
    depth = image.depth
    gripper = gripper_pos

    if cfg.mode == MODE_OFF:
        garment = deproject(image, LABEL_GARMENT)
        return assemble_observation(arm_points, garment, gripper, voxel_size)

    if cfg.mode == MODE_TRAIN:
        if episode is None:
            raise ValueError("train mode requires the per-episode draws")
        d1 = rng.uniform(*cfg.delta1_range)
        d2 = rng.uniform(*cfg.delta2_range)
        d3 = rng.uniform(*cfg.delta3_range)
        erosion_k = int(rng.choice(cfg.kernel_sizes))
        dilation_k = int(rng.choice(cfg.kernel_sizes))
        if erosion_k and dilation_k:
            if rng.random() < 0.5:
                dilation_k = 0
            else:
                erosion_k = 0
        garment_mask, depth = _morph_garment(
            depth, garment_mask, erosion_k, dilation_k)
        image = DepthImage(depth=depth, label=image.label, camera=image.camera)
        garment = deproject(image, LABEL_GARMENT, mask=garment_mask)
        keep = garment_keep_mask(
            garment, geom.p_finger[2], gripper_pos, d1, d2, d3)
        garment = garment[keep]
        if episode.drop_active and len(garment):
            dist = np.linalg.norm(garment - gripper_pos, axis=1)
            garment = garment[dist >= cfg.delta4]
        gripper = gripper_pos + episode.gripper_noise
    else:  # deploy_fixed: garment crop only, pinned deltas
        garment = deproject(image, LABEL_GARMENT)
        keep = garment_keep_mask(
            garment, geom.p_finger[2], gripper_pos, *DEPLOY_DELTAS)
        garment = garment[keep]

    return assemble_observation(arm_points, garment, gripper, voxel_size)


def save_ply(path, cloud: SegmentedPointCloud) -> None:
    """ASCII PLY dump with a per-point ``class`` property (one-hot argmax)."""
    classes = cloud.class_onehot.argmax(axis=1)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {cloud.num_points}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        fh.write("property uchar class\nend_header\n")
        for p, c in zip(cloud.points, classes):
            fh.write("%.17g %.17g %.17g %d\n" % (p[0], p[1], p[2], c))
