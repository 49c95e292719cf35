"""Point-cloud policy and critic networks.

Four network families share one hierarchical encoder built from
radius-grouped set abstraction (max pooling over metric neighborhoods)
and, for the dense policy, distance-weighted feature propagation back to
every point:

* dense policy: per-point Gaussian action heads; the executed action is
  read off the gripper point's row
* per-point-action critic: the raw action is appended to every point's
  feature before encoding
* direct-vector policy: encoder to a single latent, deep fully-connected
  head to one Gaussian
* latent-Q critic: encoder to a latent, action concatenated after pooling

Coordinates are centered on the gripper point before encoding, so every
network is translation-invariant. Classification-style nets (everything
except the dense policy) are exactly permutation-invariant because all
cross-point mixing happens through max pooling.

Geometry (neighborhoods, interpolation weights) is computed in numpy and
enters the graph as constants; gradients flow through features only.
Batches of observations are merged into one block-diagonal cloud so a
whole batch costs a single set of matrix products; per-observation
geometry is cached for the lifetime of the observation object, which
makes replayed transitions cheap.
"""

from __future__ import annotations

import dataclasses
import math
import weakref

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .perception import CLASS_GRIPPER, SegmentedPointCloud

LOG_TWO_PI = math.log(2.0 * math.pi)


@dataclasses.dataclass(frozen=True)
class PointNetConfig:
    """Sizes for the shared encoder and the heads."""

    sa_radii: tuple = (0.05, 0.1)
    sa_ratios: tuple = (1.0, 1.0)
    fp_neighbors: tuple = (1, 3, 3)
    head_layers: tuple = (128, 128)
    vector_head_layers: tuple = (256, 256, 256, 128, 128, 128, 128, 128, 128)
    lift_width: int = 64
    sa_widths: tuple = (128, 256)
    fp_widths: tuple = (256, 256, 128)
    max_neighbors: int = 32      # nearest-first cap on radius groups
    log_std_min: float = -5.0
    log_std_max: float = 2.0
    dtype: str = "float64"

    def __post_init__(self):
        if list(self.sa_radii) != sorted(self.sa_radii):
            raise ValueError("set-abstraction radii must be ascending")
        if any(not 0.0 < r <= 1.0 for r in self.sa_ratios):
            raise ValueError("sampling ratios must lie in (0, 1]")
        if len(self.sa_radii) != len(self.sa_widths):
            raise ValueError("one width per set-abstraction layer")
        if len(self.fp_neighbors) != len(self.fp_widths):
            raise ValueError("one width per propagation layer")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def geometry_key(self):
        return (self.sa_radii, self.max_neighbors, self.fp_neighbors)


@dataclasses.dataclass
class GaussianPolicyOutput:
    """Row-wise 6-D Gaussians (one row per selected point or batch item)."""

    mu: ad.Tensor     # (n, 6)
    sigma: ad.Tensor  # (n, 6), strictly positive


@dataclasses.dataclass
class DensePolicyOutput:
    """Per-point Gaussians plus the selected gripper-point rows."""

    per_point: GaussianPolicyOutput   # (sum of M_b, 6) each
    selected: GaussianPolicyOutput    # (B, 6) each, graph-linked
    gripper_index: int                # row within the first observation


# -------------------------------------------------------------- parameters

def _init_linear(params, rng, name, fan_in, fan_out, dtype, scale=None):
    std = scale if scale is not None else math.sqrt(2.0 / fan_in)
    params[f"{name}.w"] = ad.Tensor(
        rng.normal(0.0, std, size=(fan_in, fan_out)).astype(dtype))
    params[f"{name}.b"] = ad.Tensor(np.zeros(fan_out, dtype=dtype))


def _linear(params, name, x):
    return ad.add(ad.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def _init_mlp(params, rng, name, sizes, dtype, final_scale=None):
    """sizes = (in, h1, ..., out); final layer optionally down-scaled."""
    for i in range(len(sizes) - 1):
        last = i == len(sizes) - 2
        _init_linear(params, rng, f"{name}.{i}", sizes[i], sizes[i + 1],
                     dtype, scale=final_scale if last else None)


def _mlp(params, name, x, n_layers, final_relu=False):
    for i in range(n_layers):
        x = _linear(params, f"{name}.{i}", x)
        if final_relu or i < n_layers - 1:
            x = ad.relu(x)
    return x


def count_parameters(params) -> int:
    return sum(int(t.values.size) for t in params.values())


def parameter_names(params):
    return list(params.keys())


# ---------------------------------------------------------------- geometry

_GEOMETRY_CACHE: dict = {}


def _cloud_geometry(obs: SegmentedPointCloud, cfg: PointNetConfig):
    """Per-observation neighborhoods and interpolation tables, cached."""
    entry = _GEOMETRY_CACHE.get(id(obs))
    if entry is None:
        entry = {}
        _GEOMETRY_CACHE[id(obs)] = entry
        weakref.finalize(obs, _GEOMETRY_CACHE.pop, id(obs), None)
    geom = entry.get(cfg.geometry_key)
    if geom is not None:
        return geom

    gripper_rows = np.flatnonzero(obs.class_onehot[:, CLASS_GRIPPER] == 1.0)
    if gripper_rows.size != 1:
        raise ValueError("observation must contain exactly one gripper point")
    g = int(gripper_rows[0])
    centered = obs.points - obs.points[g]

    sa = []
    tree = cKDTree(centered)
    for radius in cfg.sa_radii:
        neighborhoods = tree.query_ball_point(centered, r=radius)
        sources, sizes = [], []
        for i, idx in enumerate(neighborhoods):
            idx = np.asarray(idx, dtype=np.int64)
            dist = np.linalg.norm(centered[idx] - centered[i], axis=1)
            order = np.lexsort((idx, dist))[:cfg.max_neighbors]
            sources.append(idx[order])
            sizes.append(idx[order].size)
        src = np.concatenate(sources)
        centers = np.repeat(np.arange(len(centered)), sizes)
        rel = centered[src] - centered[centers]
        sa.append((src, rel, np.asarray(sizes, dtype=np.int64)))

    k_max = max(cfg.fp_neighbors)
    fp = {}
    for k in set(cfg.fp_neighbors):
        kk = min(k, len(centered))
        dist, idx = tree.query(centered, k=kk)
        if kk == 1:
            dist, idx = dist[:, None], idx[:, None]
        w = 1.0 / (dist + 1e-8)
        w = w / w.sum(axis=1, keepdims=True)
        if kk < k:  # pad tiny clouds with zero-weight self columns
            pad = k - kk
            idx = np.concatenate([idx, np.tile(idx[:, :1], (1, pad))], axis=1)
            w = np.concatenate([w, np.zeros((len(w), pad))], axis=1)
        fp[k] = (idx.astype(np.int64), w)

    geom = {"gripper": g, "centered": centered, "sa": sa, "fp": fp,
            "k_max": k_max}
    entry[cfg.geometry_key] = geom
    return geom


@dataclasses.dataclass
class MergedCloud:
    """A batch of observations stacked into one block-diagonal cloud."""

    centered: np.ndarray             # (sum M_b, 3)
    feats: np.ndarray                # (sum M_b, 6) [position, one-hot]
    gripper_rows: np.ndarray         # (B,) global row of each gripper
    item_groups: ad.ContiguousGroups  # per-item row segments
    item_of_row: np.ndarray          # (sum M_b,)
    sa: list                         # per level: (src, rel, groups)
    fp: dict                         # k -> (idx, w), global rows

    @property
    def batch_size(self) -> int:
        return len(self.item_groups)


def merge_observations(obs_list, cfg: PointNetConfig) -> MergedCloud:
    if not obs_list:
        raise ValueError("cannot merge an empty observation batch")
    geoms = [_cloud_geometry(o, cfg) for o in obs_list]
    counts = [o.num_points for o in obs_list]
    offsets = np.cumsum([0] + counts)

    centered = np.concatenate([g["centered"] for g in geoms])
    feats = np.concatenate(
        [np.concatenate([g["centered"], o.class_onehot], axis=1)
         for g, o in zip(geoms, obs_list)]).astype(cfg.np_dtype)
    gripper_rows = np.array([g["gripper"] + off
                             for g, off in zip(geoms, offsets[:-1])])
    item_groups = ad.ContiguousGroups(offsets)
    item_of_row = np.repeat(np.arange(len(obs_list)), counts)

    sa = []
    for level in range(len(cfg.sa_radii)):
        src = np.concatenate([g["sa"][level][0] + off
                              for g, off in zip(geoms, offsets[:-1])])
        rel = np.concatenate([g["sa"][level][1] for g in geoms])
        sizes = np.concatenate([g["sa"][level][2] for g in geoms])
        groups = ad.ContiguousGroups(
            np.concatenate([[0], np.cumsum(sizes)]))
        sa.append((src, rel, groups))

    fp = {}
    for k in set(cfg.fp_neighbors):
        idx = np.concatenate([g["fp"][k][0] + off
                              for g, off in zip(geoms, offsets[:-1])])
        w = np.concatenate([g["fp"][k][1] for g in geoms])
        fp[k] = (idx, w)

    return MergedCloud(centered=centered, feats=feats,
                       gripper_rows=gripper_rows, item_groups=item_groups,
                       item_of_row=item_of_row, sa=sa, fp=fp)


def _interpolate(features: ad.Tensor, idx, w, dtype):
    cols = features.shape[1]
    total = None
    for j in range(idx.shape[1]):
        wj = np.broadcast_to(w[:, j:j + 1], (idx.shape[0], cols))
        term = ad.mul(ad.gather(features, idx[:, j]),
                      ad.Tensor(wj.astype(dtype)))
        total = term if total is None else ad.add(total, term)
    return total


def _as_action_tensor(action, dtype, rows: int) -> ad.Tensor:
    """Accept raw action rows or a graph Tensor shaped (rows, 6)."""
    if isinstance(action, ad.Tensor):
        if action.shape != (rows, 6):
            raise ValueError(
                f"action tensor must have shape ({rows}, 6), "
                f"got {action.shape}")
        return action
    arr = np.asarray(action, dtype=np.float64).reshape(rows, 6)
    return ad.Tensor(arr.astype(dtype))


# ----------------------------------------------------------------- encoder

def init_encoder(params, rng, name, in_features, cfg: PointNetConfig):
    dt = cfg.np_dtype
    _init_linear(params, rng, f"{name}.lift", in_features, cfg.lift_width, dt)
    widths = (cfg.lift_width,) + tuple(cfg.sa_widths)
    for i, out_w in enumerate(cfg.sa_widths):
        _init_linear(params, rng, f"{name}.sa{i}", widths[i] + 3, out_w, dt)


def encoder_forward(params, name, merged: MergedCloud, feats,
                    cfg: PointNetConfig):
    """Lift + set-abstraction stack. Returns per-level features + global.

    feats may be a constant array or a graph Tensor (critics thread the
    action through it).
    """
    dt = cfg.np_dtype
    feats = feats if isinstance(feats, ad.Tensor) else ad.Tensor(feats)
    levels = [ad.relu(_linear(params, f"{name}.lift", feats))]
    for i, (src, rel, groups) in enumerate(merged.sa):
        edge = ad.concat([ad.gather(levels[-1], src),
                          ad.Tensor(rel.astype(dt))], axis=1)
        edge = ad.relu(_linear(params, f"{name}.sa{i}", edge))
        levels.append(ad.max_over_set(edge, groups))
    global_feat = ad.max_over_set(levels[-1], merged.item_groups)
    return levels, global_feat


def init_propagation(params, rng, name, cfg: PointNetConfig):
    dt = cfg.np_dtype
    skips = (cfg.sa_widths[1], cfg.sa_widths[0], cfg.lift_width)
    ins = (cfg.sa_widths[1] + skips[0],
           cfg.fp_widths[0] + skips[1],
           cfg.fp_widths[1] + skips[2])
    for i, (fan_in, fan_out) in enumerate(zip(ins, cfg.fp_widths)):
        _init_linear(params, rng, f"{name}.fp{i}", fan_in, fan_out, dt)


def propagation_forward(params, name, merged: MergedCloud, levels,
                        global_feat, cfg: PointNetConfig):
    """Feature propagation back to every point.

    The pooled global vector is broadcast into the first layer; later
    layers mix each point's feature with its k nearest neighbors by
    inverse-distance interpolation, with skip connections to the matching
    encoder level.
    """
    dt = cfg.np_dtype
    broadcast = ad.gather(global_feat, merged.item_of_row)
    x = ad.relu(_linear(params, f"{name}.fp0",
                        ad.concat([levels[2], broadcast], axis=1)))
    for i, skip in ((1, levels[1]), (2, levels[0])):
        idx, w = merged.fp[cfg.fp_neighbors[i]]
        x = _interpolate(x, idx, w, dt)
        x = ad.relu(_linear(params, f"{name}.fp{i}",
                            ad.concat([x, skip], axis=1)))
    return x


def _gaussian_from_head(raw: ad.Tensor, cfg: PointNetConfig):
    mu = ad.slice_cols(raw, 0, 6)
    log_std = ad.clip(ad.slice_cols(raw, 6, 12),
                      cfg.log_std_min, cfg.log_std_max)
    return GaussianPolicyOutput(mu=mu, sigma=ad.exp(log_std))


# ------------------------------------------------------------ dense policy

def init_dense_policy(rng, cfg: PointNetConfig = PointNetConfig()):
    params = {}
    init_encoder(params, rng, "enc", 6, cfg)
    init_propagation(params, rng, "prop", cfg)
    sizes = (cfg.fp_widths[-1],) + tuple(cfg.head_layers) + (12,)
    _init_mlp(params, rng, "head", sizes, cfg.np_dtype, final_scale=1e-2)
    return params


def dense_policy_batch(obs_list, params,
                       cfg: PointNetConfig = PointNetConfig()
                       ) -> DensePolicyOutput:
    merged = merge_observations(obs_list, cfg)
    levels, global_feat = encoder_forward(params, "enc", merged,
                                          merged.feats, cfg)
    per_point = propagation_forward(params, "prop", merged, levels,
                                    global_feat, cfg)
    raw = _mlp(params, "head", per_point, len(cfg.head_layers) + 1)
    out = _gaussian_from_head(raw, cfg)
    selected = GaussianPolicyOutput(
        mu=ad.gather(out.mu, merged.gripper_rows),
        sigma=ad.gather(out.sigma, merged.gripper_rows))
    return DensePolicyOutput(per_point=out, selected=selected,
                             gripper_index=int(merged.gripper_rows[0]))


def dense_policy_forward(obs: SegmentedPointCloud, params,
                         cfg: PointNetConfig = PointNetConfig()
                         ) -> DensePolicyOutput:
    return dense_policy_batch([obs], params, cfg)


# ----------------------------------------------------- per-point critic

def init_point_critic(rng, cfg: PointNetConfig = PointNetConfig()):
    params = {}
    init_encoder(params, rng, "enc", 12, cfg)
    sizes = (cfg.sa_widths[-1],) + tuple(cfg.head_layers) + (1,)
    _init_mlp(params, rng, "head", sizes, cfg.np_dtype)
    return params


def point_critic_batch(obs_list, actions, params,
                       cfg: PointNetConfig = PointNetConfig()) -> ad.Tensor:
    """(B, 1) Q values; the action rides along as a per-point feature.

    actions may be raw rows or a (B, 6) Tensor; a Tensor keeps dQ/da alive
    for actor updates.
    """
    merged = merge_observations(obs_list, cfg)
    act = _as_action_tensor(actions, cfg.np_dtype, merged.batch_size)
    tiled = ad.gather(act, merged.item_of_row)
    joined = ad.concat([ad.Tensor(merged.feats), tiled], axis=1)
    _, global_feat = encoder_forward(params, "enc", merged, joined, cfg)
    return _mlp(params, "head", global_feat, len(cfg.head_layers) + 1)


def point_critic_forward(obs: SegmentedPointCloud, action, params,
                         cfg: PointNetConfig = PointNetConfig()) -> ad.Tensor:
    """Scalar Q for one observation/action pair."""
    if isinstance(action, ad.Tensor):
        q = point_critic_batch([obs], action, params, cfg)
    else:
        q = point_critic_batch([obs], np.asarray(action).reshape(1, 6),
                               params, cfg)
    return ad.reduce_sum(q)


# --------------------------------------------------- direct-vector policy

def init_vector_policy(rng, cfg: PointNetConfig = PointNetConfig()):
    params = {}
    init_encoder(params, rng, "enc", 6, cfg)
    sizes = ((cfg.sa_widths[-1],) + tuple(cfg.vector_head_layers) + (12,))
    _init_mlp(params, rng, "head", sizes, cfg.np_dtype, final_scale=1e-2)
    return params


def vector_policy_batch(obs_list, params,
                        cfg: PointNetConfig = PointNetConfig()
                        ) -> GaussianPolicyOutput:
    merged = merge_observations(obs_list, cfg)
    _, global_feat = encoder_forward(params, "enc", merged,
                                     merged.feats, cfg)
    raw = _mlp(params, "head", global_feat,
               len(cfg.vector_head_layers) + 1)
    return _gaussian_from_head(raw, cfg)


def vector_policy_forward(obs: SegmentedPointCloud, params,
                          cfg: PointNetConfig = PointNetConfig()
                          ) -> GaussianPolicyOutput:
    return vector_policy_batch([obs], params, cfg)


# --------------------------------------------------------- latent-Q critic

def init_latent_critic(rng, cfg: PointNetConfig = PointNetConfig()):
    params = {}
    init_encoder(params, rng, "enc", 6, cfg)
    sizes = (cfg.sa_widths[-1] + 6,) + tuple(cfg.head_layers) + (1,)
    _init_mlp(params, rng, "head", sizes, cfg.np_dtype)
    return params


def latent_critic_batch(obs_list, actions, params,
                        cfg: PointNetConfig = PointNetConfig()) -> ad.Tensor:
    """(B, 1) Q values; the action joins after pooling to a latent."""
    merged = merge_observations(obs_list, cfg)
    _, global_feat = encoder_forward(params, "enc", merged,
                                     merged.feats, cfg)
    act = _as_action_tensor(actions, cfg.np_dtype, merged.batch_size)
    joined = ad.concat([global_feat, act], axis=1)
    return _mlp(params, "head", joined, len(cfg.head_layers) + 1)


def latent_critic_forward(obs: SegmentedPointCloud, action, params,
                          cfg: PointNetConfig = PointNetConfig()
                          ) -> ad.Tensor:
    if isinstance(action, ad.Tensor):
        q = latent_critic_batch([obs], action, params, cfg)
    else:
        q = latent_critic_batch([obs], np.asarray(action).reshape(1, 6),
                                params, cfg)
    return ad.reduce_sum(q)


# ------------------------------------------------------- action sampling

_ONES_COLUMN = np.ones((6, 1))


def rsample_squashed(gauss: GaussianPolicyOutput, rng):
    """Reparameterized tanh-squashed draw kept inside the graph.

    Returns (action Tensor (n, 6), log_prob Tensor (n, 1)); both stay
    differentiable w.r.t. the Gaussian's parameters, which is what actor
    updates need.
    """
    n = gauss.mu.shape[0]
    if gauss.mu.shape != (n, 6):
        raise ValueError("sampling expects (n, 6) Gaussians")
    noise = rng.standard_normal(size=(n, 6))
    u = ad.add(gauss.mu, ad.mul(gauss.sigma, ad.Tensor(
        noise.astype(gauss.mu.values.dtype))))
    action_t = ad.tanh(u)
    log_prob = gaussian_log_prob(gauss, u)
    # tanh change of variables: log(1 - tanh(u)^2) = 2(log 2 - u - softplus(-2u))
    ones = ad.Tensor(_ONES_COLUMN.astype(u.values.dtype))
    correction = ad.mul(ad.matmul(ad.add(
        ad.mul(u, -1.0),
        ad.mul(ad.softplus(ad.mul(u, -2.0)), -1.0)), ones), 2.0)
    total = ad.add(correction,
                   ad.Tensor(np.full((n, 1), 12.0 * math.log(2.0))))
    return action_t, ad.sub(log_prob, total)


def sample_squashed_action(gauss: GaussianPolicyOutput, rng,
                           deterministic: bool = False):
    """Draw tanh-squashed actions as plain arrays, one row per Gaussian.

    Returns (actions (n, 6) in (-1, 1), log_prob Tensor (n, 1)).
    Deterministic mode returns tanh(mu) and no log_prob.
    """
    if deterministic:
        if gauss.mu.shape[1:] != (6,):
            raise ValueError("sampling expects (n, 6) Gaussians")
        return np.tanh(gauss.mu.values), None
    action_t, log_prob = rsample_squashed(gauss, rng)
    return action_t.values.copy(), log_prob


def gaussian_log_prob(gauss: GaussianPolicyOutput, u: ad.Tensor) -> ad.Tensor:
    """log N(u; mu, sigma) summed over the 6 action dims, shape (n, 1)."""
    n = gauss.mu.shape[0]
    ones = ad.Tensor(_ONES_COLUMN.astype(u.values.dtype))
    z = ad.div(ad.sub(u, gauss.mu), gauss.sigma)
    quad = ad.mul(ad.matmul(ad.mul(z, z), ones), -0.5)
    norm = ad.add(ad.matmul(ad.log(gauss.sigma), ones),
                  ad.Tensor(np.full((n, 1), 0.5 * 6.0 * LOG_TWO_PI)))
    return ad.sub(quad, norm)
