"""Soft Actor-Critic on point-cloud observations.

Twin critics with target networks, automatic entropy temperature, and a
delayed actor update, all running on the in-package autodiff stack. The
replay buffer stores paired (o, o_rand) observations and keeps a
per-sub-range partition so stratified sampling and teacher routing stay
cheap.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nets
from .env import Transition

POLICY_KINDS = ("dense", "vector")
CRITIC_KINDS = ("point", "latent")

METRIC_COLUMNS = ("step", "avg_return", "upper_ratio", "whole_ratio",
                  "success_rate", "alpha", "critic_loss", "actor_loss")


# ------------------------------------------------------------ replay buffer

class ReplayBuffer:
    """Ring buffer of transitions with a per-sub-range index.

    FIFO eviction once full; the index tracks which slots hold which pose
    sub-range so stratified sampling never scans the whole store.
    """

    def __init__(self, capacity: int = 400_000):
        if capacity < 1:
            raise ValueError("replay capacity must be positive")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._cursor = 0
        self._by_subrange: dict[int, set[int]] = {}

    def __len__(self) -> int:
        return len(self._items)

    def add(self, transition: Transition) -> None:
        if len(self._items) < self.capacity:
            pos = len(self._items)
            self._items.append(transition)
        else:
            pos = self._cursor
            old = self._items[pos]
            slots = self._by_subrange[old.subrange_id]
            slots.discard(pos)
            if not slots:
                del self._by_subrange[old.subrange_id]
            self._items[pos] = transition
            self._cursor = (pos + 1) % self.capacity
        self._by_subrange.setdefault(transition.subrange_id, set()).add(pos)

    def nonempty_subranges(self) -> list[int]:
        return sorted(self._by_subrange)

    def subrange_count(self, subrange_id: int) -> int:
        return len(self._by_subrange.get(subrange_id, ()))

    def sample(self, n: int, rng) -> list[Transition]:
        """n transitions drawn uniformly (with replacement)."""
        if not self._items:
            raise ValueError("cannot sample from an empty replay buffer")
        rows = rng.integers(0, len(self._items), size=n)
        return [self._items[int(i)] for i in rows]

    def sample_stratified(self, n_tasks: int, per_task: int, rng
                          ) -> list[tuple[int, list[Transition]]]:
        """n_tasks sub-ranges without replacement, per_task draws each."""
        nonempty = self.nonempty_subranges()
        if len(nonempty) < n_tasks:
            raise ValueError(
                f"stratified sampling needs {n_tasks} nonempty sub-range "
                f"partitions, buffer has {len(nonempty)}")
        chosen = rng.choice(len(nonempty), size=n_tasks, replace=False)
        out = []
        for c in chosen:
            sub = nonempty[int(c)]
            slots = sorted(self._by_subrange[sub])
            rows = rng.integers(0, len(slots), size=per_task)
            out.append((sub, [self._items[slots[int(i)]] for i in rows]))
        return out


# ------------------------------------------------------------ configuration

@dataclass(frozen=True)
class SacConfig:
    lr_actor: float = 1e-4
    lr_critic: float = 1e-4
    lr_alpha: float = 1e-4
    actor_delay: int = 4
    tau: float = 0.01
    batch: int = 64
    gamma: float = 0.99
    target_entropy: float = -6.0
    eval_every: int = 10_000
    buffer_capacity: int = 400_000
    update_every: int = 1          # env steps per gradient step
    start_steps: int = 0           # uniform-random warmup actions
    init_alpha: float = 1.0
    use_randomized_obs: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.actor_delay < 1:
            raise ValueError("actor_delay must be at least 1")
        if self.batch < 1 or self.buffer_capacity < self.batch:
            raise ValueError("batch must fit the buffer")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.eval_every < 1 or self.update_every < 1:
            raise ValueError("cadence fields must be positive")
        if self.start_steps < 0:
            raise ValueError("start_steps must be non-negative")
        if min(self.lr_actor, self.lr_critic, self.lr_alpha) <= 0:
            raise ValueError("learning rates must be positive")
        if self.init_alpha <= 0:
            raise ValueError("init_alpha must be positive")


@dataclass
class SacState:
    """Everything the trainer mutates: parameters, optimizers, counters."""

    net_cfg: nets.PointNetConfig
    policy_kind: str
    critic_kind: str
    actor: dict
    critic1: dict
    critic2: dict
    target1: dict
    target2: dict
    log_alpha: ad.Tensor
    opt_actor: ad.Adam
    opt_critic: ad.Adam
    opt_alpha: ad.Adam
    critic_steps: int = 0
    actor_steps: int = 0
    env_steps: int = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.values))


def _param_list(*dicts):
    out = []
    for d in dicts:
        out.extend(d[k] for k in sorted(d))
    return out


def _clone_params(params: dict) -> dict:
    return {k: ad.Tensor(p.values.copy()) for k, p in params.items()}


def make_sac_state(rng, net_cfg: nets.PointNetConfig | None = None,
                   cfg: SacConfig = SacConfig(),
                   policy_kind: str = "dense",
                   critic_kind: str = "point") -> SacState:
    if policy_kind not in POLICY_KINDS:
        raise ValueError(f"unknown policy kind {policy_kind!r}")
    if critic_kind not in CRITIC_KINDS:
        raise ValueError(f"unknown critic kind {critic_kind!r}")
    ncfg = net_cfg if net_cfg is not None else nets.PointNetConfig()
    if policy_kind == "dense":
        actor = nets.init_dense_policy(rng, ncfg)
    else:
        actor = nets.init_vector_policy(rng, ncfg)
    init_critic = (nets.init_point_critic if critic_kind == "point"
                   else nets.init_latent_critic)
    critic1 = init_critic(rng, ncfg)
    critic2 = init_critic(rng, ncfg)
    log_alpha = ad.Tensor(np.asarray(math.log(cfg.init_alpha)))
    return SacState(
        net_cfg=ncfg, policy_kind=policy_kind, critic_kind=critic_kind,
        actor=actor, critic1=critic1, critic2=critic2,
        target1=_clone_params(critic1), target2=_clone_params(critic2),
        log_alpha=log_alpha,
        opt_actor=ad.Adam(_param_list(actor), lr=cfg.lr_actor),
        opt_critic=ad.Adam(_param_list(critic1, critic2), lr=cfg.lr_critic),
        opt_alpha=ad.Adam([log_alpha], lr=cfg.lr_alpha))


# ------------------------------------------------------------ net dispatch

def policy_gaussians(params: dict, obs_list, kind: str,
                     ncfg: nets.PointNetConfig) -> nets.GaussianPolicyOutput:
    """(B, 6) action Gaussians for a batch of observations."""
    if kind == "dense":
        return nets.dense_policy_batch(obs_list, params, ncfg).selected
    return nets.vector_policy_batch(obs_list, params, ncfg)


def critic_values(params: dict, obs_list, actions, kind: str,
                  ncfg: nets.PointNetConfig) -> ad.Tensor:
    """(B, 1) Q values; actions may be an array or a graph Tensor."""
    if kind == "point":
        return nets.point_critic_batch(obs_list, actions, params, ncfg)
    return nets.latent_critic_batch(obs_list, actions, params, ncfg)


def _pick_obs(o, o_rand, cfg: SacConfig):
    if not cfg.use_randomized_obs:
        return o
    if o_rand is None:
        raise ValueError("randomized observations requested but not stored")
    return o_rand


def select_action(state: SacState, o, o_rand, cfg: SacConfig, rng,
                  deterministic: bool = False) -> np.ndarray:
    """One environment action from the current policy."""
    obs = _pick_obs(o, o_rand, cfg)
    gauss = policy_gaussians(state.actor, [obs], state.policy_kind,
                             state.net_cfg)
    action, _ = nets.sample_squashed_action(gauss, rng,
                                            deterministic=deterministic)
    return action[0]


# ------------------------------------------------------------ updates

def soft_update(online: dict, target: dict, tau: float = 0.01) -> None:
    """target <- (1 - tau)*target + tau*online, elementwise in place."""
    if sorted(online) != sorted(target):
        raise ValueError("soft_update: parameter sets differ")
    for name in online:
        src, dst = online[name].values, target[name].values
        if src.shape != dst.shape:
            raise ValueError(f"soft_update: shape mismatch at {name}")
        dst *= 1.0 - tau
        dst += tau * src


def _min_tensor(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    # min(a, b) = a - relu(a - b); ties route the gradient to a
    return ad.sub(a, ad.relu(ad.sub(a, b)))


def _batch_arrays(batch, cfg: SacConfig):
    obs = [_pick_obs(t.o, t.o_rand, cfg) for t in batch]
    next_obs = [_pick_obs(t.o_next, t.o_rand_next, cfg) for t in batch]
    actions = np.stack([t.action for t in batch])
    rewards = np.array([[t.reward] for t in batch], dtype=np.float64)
    dones = np.array([[float(t.done)] for t in batch], dtype=np.float64)
    return obs, next_obs, actions, rewards, dones


def bellman_targets(next_obs, rewards, dones, state: SacState,
                    cfg: SacConfig, rng,
                    alpha: float | None = None) -> np.ndarray:
    """y = r + gamma*(1 - done)*(min Q' - alpha*log pi'), as plain arrays.

    Next actions come from the current policy, Q' from the target critics
    only; nothing here joins the gradient graph. alpha defaults to the
    state's temperature; multi-task callers pass their per-task one.
    """
    ncfg = state.net_cfg
    if alpha is None:
        alpha = state.alpha
    gauss_next = policy_gaussians(state.actor, next_obs, state.policy_kind,
                                  ncfg)
    a_next, logp_next = nets.rsample_squashed(gauss_next, rng)
    q1n = critic_values(state.target1, next_obs, a_next.values,
                        state.critic_kind, ncfg).values
    q2n = critic_values(state.target2, next_obs, a_next.values,
                        state.critic_kind, ncfg).values
    soft_q = np.minimum(q1n, q2n) - alpha * logp_next.values
    return rewards + cfg.gamma * (1.0 - dones) * soft_q


def actor_objective(batch, state: SacState, cfg: SacConfig, rng,
                    extra_actor_term=None, alpha: float | None = None):
    """Actor-step loss graph: maximize min-Q minus alpha * log pi.

    Returns (total loss Tensor, log-prob Tensor, diagnostics). Exposed
    separately so gradient checks can rebuild the exact training graph
    with a pinned rng.
    """
    ncfg = state.net_cfg
    if alpha is None:
        alpha = state.alpha
    obs = [_pick_obs(t.o, t.o_rand, cfg) for t in batch]
    gauss = policy_gaussians(state.actor, obs, state.policy_kind, ncfg)
    a_pi, logp = nets.rsample_squashed(gauss, rng)
    q1p = critic_values(state.critic1, obs, a_pi, state.critic_kind, ncfg)
    q2p = critic_values(state.critic2, obs, a_pi, state.critic_kind, ncfg)
    qmin = _min_tensor(q1p, q2p)
    actor_loss = ad.reduce_mean(ad.sub(ad.mul(logp, alpha), qmin))
    diag = {"actor_loss": float(actor_loss.values)}
    total = actor_loss
    if extra_actor_term is not None:
        term, extra_diag = extra_actor_term(batch, gauss)
        if term is not None:
            total = ad.add(total, term)
        diag.update(extra_diag)
    return total, logp, diag


def update_from_batch(batch, state: SacState, cfg: SacConfig, rng,
                      extra_actor_term=None) -> dict:
    """One critic step (and possibly actor/alpha steps) on a fixed batch.

    extra_actor_term(batch, policy_gauss) -> (Tensor, dict) lets callers
    add a differentiable term to the actor objective; distillation hooks
    in through it.
    """
    ncfg = state.net_cfg
    obs, next_obs, actions, rewards, dones = _batch_arrays(batch, cfg)
    y = bellman_targets(next_obs, rewards, dones, state, cfg, rng)
    alpha = state.alpha

    # critic regression
    q1 = critic_values(state.critic1, obs, actions, state.critic_kind, ncfg)
    q2 = critic_values(state.critic2, obs, actions, state.critic_kind, ncfg)
    d1 = ad.sub(q1, ad.Tensor(y))
    d2 = ad.sub(q2, ad.Tensor(y))
    critic_loss = ad.add(ad.reduce_mean(ad.mul(d1, d1)),
                         ad.reduce_mean(ad.mul(d2, d2)))
    state.opt_critic.zero_grad()
    ad.backward(critic_loss)
    state.opt_critic.step()
    state.critic_steps += 1

    soft_update(state.critic1, state.target1, cfg.tau)
    soft_update(state.critic2, state.target2, cfg.tau)

    diag = {
        "critic_loss": float(critic_loss.values),
        "q1": float(np.mean(q1.values)),
        "q2": float(np.mean(q2.values)),
        "alpha": alpha,
        "actor_stepped": False,
    }

    if state.critic_steps % cfg.actor_delay != 0:
        return diag

    total, logp, extra_diag = actor_objective(batch, state, cfg, rng,
                                              extra_actor_term, alpha=alpha)
    diag.update(extra_diag)
    state.opt_actor.zero_grad()
    state.opt_critic.zero_grad()      # discard dQ/dtheta from this graph
    ad.backward(total)
    state.opt_actor.step()
    state.opt_critic.zero_grad()
    state.actor_steps += 1

    # temperature: push expected entropy toward the target
    entropy_gap = float(np.mean(logp.values) + cfg.target_entropy)
    alpha_loss = ad.mul(state.log_alpha, -entropy_gap)
    state.opt_alpha.zero_grad()
    ad.backward(alpha_loss)
    state.opt_alpha.step()

    diag.update({
        "alpha_loss": float(alpha_loss.values),
        "entropy": -float(np.mean(logp.values)),
        "alpha": state.alpha,
        "actor_stepped": True,
    })
    return diag


def sac_update(buffer: ReplayBuffer, state: SacState, cfg: SacConfig,
               rng) -> dict:
    """Sample a uniform batch and run one SAC update."""
    if len(buffer) < cfg.batch:
        raise ValueError("replay buffer smaller than one batch")
    batch = buffer.sample(cfg.batch, rng)
    return update_from_batch(batch, state, cfg, rng)


# ------------------------------------------------------------ evaluation

def evaluate(env, state: SacState, cfg: SacConfig, eval_seeds) -> tuple:
    """Deterministic-policy rollouts; (summary dict, per-episode rows)."""
    rows = []
    for seed in eval_seeds:
        o, o_rand, info = env.reset(seed=int(seed))
        ep_return = 0.0
        while True:
            action = select_action(state, o, o_rand, cfg, rng=None,
                                   deterministic=True)
            o, o_rand, reward, done, info = env.step(action)
            ep_return += reward
            if done:
                break
        rows.append({
            "pose_id": int(seed),
            "garment": getattr(getattr(env, "mesh", None), "name", ""),
            "episode_return": ep_return,
            "upper_ratio": float(info["upper_ratio"]),
            "whole_ratio": float(info["whole_ratio"]),
            "success": bool(info["success"]),
        })
    summary = {
        "avg_return": float(np.mean([r["episode_return"] for r in rows])),
        "upper_ratio": float(np.mean([r["upper_ratio"] for r in rows])),
        "whole_ratio": float(np.mean([r["whole_ratio"] for r in rows])),
        "success_rate": float(np.mean([r["success"] for r in rows])),
    }
    return summary, rows


def pose_split(n_train: int = 45, n_eval: int = 5, seed: int = 0):
    """Disjoint deterministic reset seeds: (train list, eval list)."""
    rng = np.random.default_rng(seed)
    seeds: list[int] = []
    seen: set[int] = set()
    while len(seeds) < n_train + n_eval:
        s = int(rng.integers(0, 2**31 - 1))
        if s not in seen:
            seen.add(s)
            seeds.append(s)
    return seeds[:n_train], seeds[n_train:]


# ------------------------------------------------------------ training loop

@dataclass
class TrainResult:
    metrics: list = field(default_factory=list)
    buffer: ReplayBuffer | None = None


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in METRIC_COLUMNS})


def train_loop(env, state: SacState, cfg: SacConfig, rng, total_steps: int,
               *, eval_env=None, train_seeds=None, eval_seeds=None,
               metrics_path=None, checkpoint_fn=None, update_fn=None,
               buffer: ReplayBuffer | None = None) -> TrainResult:
    """Interleave rollouts with gradient updates; evaluate periodically.

    Episodes restart lazily at the top of an iteration, so a checkpoint
    written at an eval boundary never has to serialize mid-episode cloth
    state; checkpoint_fn therefore requires eval_every to land on episode
    boundaries. update_fn(buffer, state, cfg, rng) defaults to sac_update.

    Bitwise split-run resume additionally needs train_seeds: with it,
    every episode is reseeded from this rng stream, so a restored rng
    reproduces the remaining episodes on a fresh environment.
    """
    if checkpoint_fn is not None and \
            cfg.eval_every % env.cfg.episode_length != 0:
        raise ValueError("checkpointing requires eval_every to be a "
                         "multiple of the episode length")
    if update_fn is None:
        update_fn = sac_update
    if buffer is None:
        buffer = ReplayBuffer(cfg.buffer_capacity)

    metrics: list[dict] = []
    losses: dict[str, list] = {"critic_loss": [], "actor_loss": []}
    obs_cur = None
    for step in range(state.env_steps + 1, total_steps + 1):
        if obs_cur is None:
            if train_seeds is not None:
                seed = int(train_seeds[int(rng.integers(len(train_seeds)))])
                o, o_rand, _ = env.reset(seed=seed)
            else:
                o, o_rand, _ = env.reset()
            obs_cur = (o, o_rand)

        if step <= cfg.start_steps:
            action = rng.uniform(-1.0, 1.0, size=6)
        else:
            action = select_action(state, obs_cur[0], obs_cur[1], cfg, rng)
        o2, o2_rand, reward, done, info = env.step(action)
        buffer.add(Transition(
            o=obs_cur[0], o_rand=obs_cur[1], action=action, reward=reward,
            o_next=o2, o_rand_next=o2_rand, done=done,
            subrange_id=info["subrange_id"]))
        obs_cur = None if done else (o2, o2_rand)
        state.env_steps = step

        if step % cfg.update_every == 0 and len(buffer) >= cfg.batch \
                and step > cfg.start_steps:
            diag = update_fn(buffer, state, cfg, rng)
            if diag is not None:        # update_fn may defer (e.g. PCGrad)
                losses["critic_loss"].append(diag["critic_loss"])
                if diag.get("actor_stepped"):
                    losses["actor_loss"].append(diag["actor_loss"])

        if step % cfg.eval_every == 0:
            row = {"step": step, "alpha": state.alpha}
            for key in ("critic_loss", "actor_loss"):
                vals = losses[key]
                row[key] = float(np.mean(vals)) if vals else float("nan")
                vals.clear()
            if eval_env is not None and eval_seeds:
                summary, _ = evaluate(eval_env, state, cfg, eval_seeds)
                row.update(summary)
            else:
                row.update({"avg_return": float("nan"),
                            "upper_ratio": float("nan"),
                            "whole_ratio": float("nan"),
                            "success_rate": float("nan")})
            metrics.append(row)
            if checkpoint_fn is not None:
                checkpoint_fn(state, buffer, step)

    if metrics_path is not None:
        write_metrics_csv(metrics_path, metrics)
    return TrainResult(metrics=metrics, buffer=buffer)
