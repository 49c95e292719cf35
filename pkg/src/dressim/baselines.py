"""Non-learned comparison methods: waypoint planning and haptic MPC.

The heuristic planner builds a three-waypoint path over the arm (above the
fingertip, the elbow, and the shoulder), validates every interpolated pose
against the capsule-arm signed distance, and lifts colliding segments in
centimeter increments until the path clears or a cap is reached. The haptic
controller trains a one-step force predictor on logged end-effector state
windows and picks actions by rejection sampling against a phase-direction
filter plus a force/progress/effort cost.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .arm import ArmGeometry, BodyParams, arm_distance
from .nets import _init_mlp, _mlp

PHASES = ("forearm", "upper_arm")

STATE_DIM = 13          # 6D pose, 6D velocity, contact force magnitude


# ------------------------------------------------------------ waypoint plan

@dataclass(frozen=True)
class WaypointPath:
    """Ordered (position, orientation) targets with an interpolation step.

    Orientations are unit tool-axis directions (roll-free by
    construction); tool_normal is the arm-plane normal shared by the
    whole path.
    """

    waypoints: tuple
    tool_normal: np.ndarray
    step_size: float

    def __post_init__(self) -> None:
        if len(self.waypoints) < 2:
            raise ValueError("a path needs at least two waypoints")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        for position, orientation in self.waypoints:
            if not (np.isfinite(position).all()
                    and np.isfinite(orientation).all()):
                raise ValueError("waypoints must be finite")
            if abs(np.linalg.norm(orientation) - 1.0) > 1e-9:
                raise ValueError("orientations must be unit vectors")

    def sample_points(self):
        """Interpolated (position, orientation) list, endpoints included.

        Each segment carries the orientation of its starting waypoint;
        spacing is at most step_size.
        """
        out = []
        for (p0, orient), (p1, _) in zip(self.waypoints,
                                         self.waypoints[1:]):
            length = float(np.linalg.norm(p1 - p0))
            n = max(1, int(np.ceil(length / self.step_size)))
            for k in range(n):
                t = k / n
                out.append(((1.0 - t) * p0 + t * p1, orient))
        out.append(self.waypoints[-1])
        return out


@dataclass(frozen=True)
class HeuristicConfig:
    finger_height: float = 0.08
    elbow_height: float = 0.08
    shoulder_height: float = 0.08
    min_clearance: float = 0.02
    step_size: float = 0.01
    lift_increment: float = 0.01     # 1 cm per retry
    max_lift: float = 0.2

    def __post_init__(self) -> None:
        if min(self.min_clearance, self.step_size,
               self.lift_increment, self.max_lift) <= 0:
            raise ValueError("heuristic distances must be positive")


def _arm_plane_normal(geom: ArmGeometry) -> np.ndarray:
    normal = np.cross(geom.upper_arm_axis, geom.forearm_axis)
    norm = float(np.linalg.norm(normal))
    if norm < 1e-8:                  # straight arm: plane is degenerate
        axis = geom.forearm_axis
        fallback = np.array([0.0, 0.0, 1.0])
        if abs(axis @ fallback) > 0.99:
            fallback = np.array([0.0, 1.0, 0.0])
        normal = np.cross(axis, fallback)
        norm = float(np.linalg.norm(normal))
    return normal / norm


def heuristic_plan(geom: ArmGeometry, body: BodyParams,
                   cfg: HeuristicConfig = HeuristicConfig()) -> WaypointPath:
    """Three waypoints above finger, elbow, shoulder, collision-checked.

    Segment orientations align with the forearm axis and then the
    upper-arm axis. Every interpolated position must keep
    arm_distance >= min_clearance; segments that collide are lifted in
    lift_increment steps (both bounding waypoints) until the whole path
    clears or a waypoint exceeds max_lift, which is an error.
    """
    up = np.array([0.0, 0.0, 1.0])
    base = [geom.p_finger + cfg.finger_height * up,
            geom.p_elbow + cfg.elbow_height * up,
            geom.p_shoulder + cfg.shoulder_height * up]
    orientations = [geom.forearm_axis, geom.upper_arm_axis,
                    geom.upper_arm_axis]
    lifts = np.zeros(3)
    while True:
        points = [p + lift * up for p, lift in zip(base, lifts)]
        path = WaypointPath(
            waypoints=tuple((p, o) for p, o in zip(points, orientations)),
            tool_normal=_arm_plane_normal(geom), step_size=cfg.step_size)
        offending = set()
        for seg, ((p0, _), (p1, _)) in enumerate(
                zip(path.waypoints, path.waypoints[1:])):
            length = float(np.linalg.norm(p1 - p0))
            n = max(1, int(np.ceil(length / cfg.step_size)))
            ts = np.arange(n + 1) / n
            samples = p0[None, :] * (1.0 - ts)[:, None] \
                + p1[None, :] * ts[:, None]
            if (arm_distance(samples, geom, body)
                    < cfg.min_clearance).any():
                offending.add(seg)
                offending.add(seg + 1)
        if not offending:
            return path
        for i in offending:
            lifts[i] += cfg.lift_increment
        if (lifts > cfg.max_lift + 1e-12).any():
            raise ValueError(
                "no collision-free path within the lift cap")


# ------------------------------------------------------------ force model

@dataclass(frozen=True)
class HapticModelConfig:
    history: int = 5
    hidden: tuple[int, ...] = (64, 64)
    w1: float = 1.0                  # force magnitude
    w2: float = 1.0                  # phase progress
    w3: float = 0.1                  # action effort
    candidates: int = 128
    resample_budget: int = 4

    def __post_init__(self) -> None:
        if self.history < 1:
            raise ValueError("history window must be at least 1")
        if self.candidates < 1:
            raise ValueError("candidate count must be at least 1")
        if self.resample_budget < 1:
            raise ValueError("resample budget must be at least 1")
        if not self.hidden:
            raise ValueError("the predictor needs at least one hidden layer")

    @property
    def input_dim(self) -> int:
        return self.history * STATE_DIM + 6


@dataclass
class ForceModel:
    """One-step force predictor F(x_{t-H+1:t}, a_{t+1})."""

    cfg: HapticModelConfig
    params: dict = field(default_factory=dict)

    def predict_batch(self, windows: np.ndarray,
                      actions: np.ndarray) -> np.ndarray:
        windows = np.asarray(windows, dtype=np.float64)
        windows = windows.reshape(len(windows), -1)
        if windows.shape[1] != self.cfg.history * STATE_DIM:
            raise ValueError("window length does not match the config")
        actions = np.asarray(actions, dtype=np.float64).reshape(-1, 6)
        x = ad.Tensor(np.concatenate([windows, actions], axis=1))
        out = _mlp(self.params, "force", x, len(self.cfg.hidden) + 1)
        return out.values[:, 0]

    def predict(self, window: np.ndarray, action: np.ndarray) -> float:
        return float(self.predict_batch(
            np.asarray(window)[None, ...], np.asarray(action)[None, :])[0])


def make_state_vector(position, orientation, velocity, angular_velocity,
                      force: float) -> np.ndarray:
    """Pack one end-effector measurement into the 13-dim state layout."""
    parts = [np.asarray(position, dtype=np.float64).reshape(3),
             np.asarray(orientation, dtype=np.float64).reshape(3),
             np.asarray(velocity, dtype=np.float64).reshape(3),
             np.asarray(angular_velocity, dtype=np.float64).reshape(3),
             np.asarray([force], dtype=np.float64)]
    return np.concatenate(parts)


def train_force_model(windows, actions, forces,
                      cfg: HapticModelConfig = HapticModelConfig(),
                      rng=None, epochs: int = 200, lr: float = 1e-3,
                      batch: int | None = None) -> ForceModel:
    """Squared-error regression of next-step force over flattened windows.

    batch=None runs full-batch steps (loss then decreases monotonically
    at small lr); otherwise uniform minibatches. The per-epoch losses
    end up on model.loss_history.
    """
    windows = np.asarray(windows, dtype=np.float64)
    if windows.size == 0:
        raise ValueError("force-model dataset is empty")
    windows = windows.reshape(len(windows), -1)
    actions = np.asarray(actions, dtype=np.float64).reshape(-1, 6)
    forces = np.asarray(forces, dtype=np.float64).reshape(-1, 1)
    if not len(windows) == len(actions) == len(forces):
        raise ValueError("dataset columns disagree on length")
    if rng is None:
        rng = np.random.default_rng(0)
    model = ForceModel(cfg=cfg)
    sizes = (cfg.input_dim,) + tuple(cfg.hidden) + (1,)
    _init_mlp(model.params, rng, "force", sizes, np.float64)
    opt = ad.Adam(list(model.params.values()), lr=lr)
    inputs = np.concatenate([windows, actions], axis=1)
    history = []
    for _ in range(epochs):
        if batch is None:
            x, target = inputs, forces
        else:
            idx = rng.integers(0, len(inputs), size=batch)
            x, target = inputs[idx], forces[idx]
        out = _mlp(model.params, "force", ad.Tensor(x.copy()),
                   len(cfg.hidden) + 1)
        diff = ad.sub(out, ad.Tensor(target.copy()))
        loss = ad.reduce_mean(ad.mul(diff, diff))
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        history.append(float(loss.values))
    model.loss_history = history
    return model


# ------------------------------------------------------------ MPC selection

def phase_direction(geom: ArmGeometry, phase: str) -> np.ndarray:
    """Unit travel direction for the dressing phase."""
    if phase == "forearm":
        d = geom.p_elbow - geom.p_finger
    elif phase == "upper_arm":
        d = geom.p_shoulder - geom.p_elbow
    else:
        raise ValueError(f"unknown phase {phase!r}; expected one of {PHASES}")
    return d / np.linalg.norm(d)


def haptic_mpc_select(history, geom: ArmGeometry, phase: str,
                      model: ForceModel, cfg: HapticModelConfig, rng
                      ) -> np.ndarray:
    """Pick the candidate action minimizing w1|F| - w2 d.a + w3 ||a||^2.

    Candidates are uniform in the [-1, 1]^6 box; any whose translation
    has non-positive dot product with the phase direction is rejected.
    If every candidate of every resample round fails the filter, the
    fallback is the zero action, with a warning.
    """
    window = np.asarray(history, dtype=np.float64)
    direction = phase_direction(geom, phase)
    for _ in range(cfg.resample_budget):
        candidates = rng.uniform(-1.0, 1.0, size=(cfg.candidates, 6))
        keep = candidates[:, :3] @ direction > 0.0
        if not keep.any():
            continue
        kept = candidates[keep]
        forces = model.predict_batch(
            np.repeat(window[None, ...], len(kept), axis=0), kept)
        cost = (cfg.w1 * np.abs(forces)
                - cfg.w2 * (kept[:, :3] @ direction)
                + cfg.w3 * np.sum(kept * kept, axis=1))
        return kept[int(np.argmin(cost))].copy()
    warnings.warn("haptic MPC: every candidate failed the phase filter; "
                  "falling back to the zero action")
    return np.zeros(6)


# ------------------------------------------------------------ dataset CSV

FORCE_CSV_ACTION_COLUMNS = [f"a{j}" for j in range(6)]


def force_csv_columns(cfg: HapticModelConfig) -> list[str]:
    """x{t}_{k} window columns, then a0..a5, then force."""
    cols = [f"x{t}_{k}" for t in range(cfg.history)
            for k in range(STATE_DIM)]
    return cols + FORCE_CSV_ACTION_COLUMNS + ["force"]


def save_force_dataset(path, windows, actions, forces,
                       cfg: HapticModelConfig = HapticModelConfig()) -> None:
    windows = np.asarray(windows, dtype=np.float64).reshape(
        len(windows), cfg.history * STATE_DIM)
    actions = np.asarray(actions, dtype=np.float64).reshape(-1, 6)
    forces = np.asarray(forces, dtype=np.float64).reshape(-1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(force_csv_columns(cfg))
        for w, a, f in zip(windows, actions, forces):
            writer.writerow([repr(float(v)) for v in w]
                            + [repr(float(v)) for v in a]
                            + [repr(float(f))])


def load_force_dataset(path, cfg: HapticModelConfig = HapticModelConfig()):
    """(windows (N, H*13), actions (N, 6), forces (N,)) from the CSV."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != force_csv_columns(cfg):
            raise ValueError("force dataset columns do not match the config")
        rows = [[float(v) for v in row] for row in reader]
    data = np.asarray(rows, dtype=np.float64)
    if data.size == 0:
        raise ValueError("force-model dataset is empty")
    n_window = cfg.history * STATE_DIM
    return data[:, :n_window], data[:, n_window:n_window + 6], data[:, -1]
