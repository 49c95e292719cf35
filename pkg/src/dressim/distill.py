"""Policy distillation and the gradient-surgery multi-task baseline.

Teachers are frozen per-sub-range policies; the student trains on its own
rollouts with the usual SAC losses plus a weighted distribution-matching
term (Earth-Mover by default, Gaussian KL as the ablation). The guided
domain-randomization mode feeds the student the randomized observation
while teachers keep seeing the clean one. PCGrad is the no-distillation
alternative: one multi-task policy whose per-task actor gradients are
projected out of mutual conflict before the optimizer step.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nets, sac

LOSS_KINDS = ("emd", "kl")
ROUTING_MODES = ("by_subrange", "sum_all")
KL_DIRECTIONS = ("teacher_ref", "student_ref")


@dataclass(frozen=True)
class DistillConfig:
    beta: float = 0.01
    loss_kind: str = "emd"
    guided_dr: bool = False
    teacher_routing: str = "by_subrange"
    kl_direction: str = "teacher_ref"

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.teacher_routing not in ROUTING_MODES:
            raise ValueError(
                f"unknown teacher routing {self.teacher_routing!r}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ValueError(f"unknown KL direction {self.kl_direction!r}")


@dataclass
class TeacherBank:
    """Frozen per-sub-range policy parameters sharing one architecture."""

    net_cfg: nets.PointNetConfig
    policy_kind: str
    teachers: dict[int, dict] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.policy_kind not in sac.POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.policy_kind!r}")
        if not self.teachers:
            raise ValueError("teacher bank needs at least one teacher")

    def subranges(self) -> list[int]:
        return sorted(self.teachers)

    def teacher_for(self, subrange_id: int) -> dict:
        if subrange_id not in self.teachers:
            raise ValueError(
                f"no teacher trained for sub-range {subrange_id}; "
                f"teachers cover {self.subranges()}")
        return self.teachers[subrange_id]

    def gaussians(self, subrange_id: int, obs_list
                  ) -> nets.GaussianPolicyOutput:
        params = self.teacher_for(subrange_id)
        return sac.policy_gaussians(params, obs_list, self.policy_kind,
                                    self.net_cfg)


# ------------------------------------------------------------ losses

def _check_match(student: nets.GaussianPolicyOutput,
                 teacher: nets.GaussianPolicyOutput, op: str) -> None:
    if student.mu.shape != teacher.mu.shape \
            or student.sigma.shape != teacher.sigma.shape:
        raise ValueError(f"{op}: batch/action dimension mismatch")


def emd_loss(student: nets.GaussianPolicyOutput,
             teacher: nets.GaussianPolicyOutput) -> ad.Tensor:
    """sum of (mu_s - mu_t)^2 + (sqrt(sigma_s) - sqrt(sigma_t))^2.

    Summed over batch and action dims; the teacher side is detached, so
    gradients reach student parameters only.
    """
    _check_match(student, teacher, "emd_loss")
    dmu = ad.sub(student.mu, ad.Tensor(teacher.mu.values.copy()))
    dsig = ad.sub(ad.sqrt(student.sigma),
                  ad.Tensor(np.sqrt(teacher.sigma.values)))
    return ad.add(ad.reduce_sum(ad.mul(dmu, dmu)),
                  ad.reduce_sum(ad.mul(dsig, dsig)))


def kl_loss(student: nets.GaussianPolicyOutput,
            teacher: nets.GaussianPolicyOutput,
            direction: str = "teacher_ref") -> ad.Tensor:
    """Diagonal-Gaussian KL summed over batch and dims, teacher detached.

    teacher_ref integrates KL(teacher || student); student_ref the
    reverse. Both leave gradients on the student side only.
    """
    _check_match(student, teacher, "kl_loss")
    if direction not in KL_DIRECTIONS:
        raise ValueError(f"unknown KL direction {direction!r}")
    mu_t = teacher.mu.values
    sig_t = teacher.sigma.values
    if direction == "teacher_ref":
        # log(ss/st) + (st^2 + (mt - ms)^2) / (2 ss^2) - 1/2
        diff = ad.sub(ad.Tensor(mu_t.copy()), student.mu)
        num = ad.add(ad.mul(diff, diff), ad.Tensor(sig_t * sig_t))
        den = ad.mul(ad.mul(student.sigma, student.sigma), 2.0)
        const = ad.Tensor(-np.log(sig_t) - 0.5)
        per_dim = ad.add(ad.add(ad.log(student.sigma), const),
                         ad.div(num, den))
    else:
        # log(st/ss) + (ss^2 + (ms - mt)^2) / (2 st^2) - 1/2
        diff = ad.sub(student.mu, ad.Tensor(mu_t.copy()))
        num = ad.add(ad.mul(diff, diff),
                     ad.mul(student.sigma, student.sigma))
        den = ad.Tensor(2.0 * sig_t * sig_t)
        const = ad.Tensor(np.log(sig_t) - 0.5)
        per_dim = ad.add(ad.sub(const, ad.log(student.sigma)),
                         ad.div(num, den))
    return ad.reduce_sum(per_dim)


def _distribution_loss(student, teacher, cfg: DistillConfig) -> ad.Tensor:
    if cfg.loss_kind == "emd":
        return emd_loss(student, teacher)
    return kl_loss(student, teacher, cfg.kl_direction)


# ------------------------------------------------------------ student update

def _teacher_targets(batch, bank: TeacherBank, cfg: DistillConfig
                     ) -> nets.GaussianPolicyOutput | list:
    """Teacher Gaussians for a batch; teachers always see the clean o."""
    clean_obs = [t.o for t in batch]
    if cfg.teacher_routing == "sum_all":
        return [bank.gaussians(sub, clean_obs)
                for sub in bank.subranges()]
    rows_of: dict[int, list[int]] = {}
    for i, t in enumerate(batch):
        rows_of.setdefault(t.subrange_id, []).append(i)
    mu = np.empty((len(batch), 6))
    sigma = np.empty((len(batch), 6))
    for sub in sorted(rows_of):
        rows = rows_of[sub]
        out = bank.gaussians(sub, [clean_obs[i] for i in rows])
        mu[rows] = out.mu.values
        sigma[rows] = out.sigma.values
    return nets.GaussianPolicyOutput(mu=ad.Tensor(mu),
                                     sigma=ad.Tensor(sigma))


def _distill_term(bank: TeacherBank, cfg: DistillConfig):
    def term(batch, student_gauss):
        targets = _teacher_targets(batch, bank, cfg)
        if isinstance(targets, list):
            loss = _distribution_loss(student_gauss, targets[0], cfg)
            for teacher_out in targets[1:]:
                loss = ad.add(loss,
                              _distribution_loss(student_gauss,
                                                 teacher_out, cfg))
        else:
            loss = _distribution_loss(student_gauss, targets, cfg)
        scaled = ad.mul(loss, cfg.beta)
        return scaled, {"distill_loss": float(loss.values),
                        "beta": cfg.beta}
    return term


def distill_update(buffer, state: sac.SacState, bank: TeacherBank,
                   cfg: DistillConfig, sac_cfg: sac.SacConfig, rng) -> dict:
    """One SAC update whose actor objective carries the distill term.

    With beta = 0 the term is skipped entirely, which makes the update
    identical to plain sac_update on the same rng stream. guided_dr
    routes the stored randomized observation to the student; teachers
    read the clean one either way.
    """
    if len(buffer) < sac_cfg.batch:
        raise ValueError("replay buffer smaller than one batch")
    if cfg.guided_dr and not sac_cfg.use_randomized_obs:
        sac_cfg = dataclasses.replace(sac_cfg, use_randomized_obs=True)
    batch = buffer.sample(sac_cfg.batch, rng)
    extra = _distill_term(bank, cfg) if cfg.beta > 0 else None
    return sac.update_from_batch(batch, state, sac_cfg, rng,
                                 extra_actor_term=extra)


def make_update_fn(bank: TeacherBank, cfg: DistillConfig):
    """Adapter matching train_loop's update_fn signature."""
    def update(buffer, state, sac_cfg, rng):
        return distill_update(buffer, state, bank, cfg, sac_cfg, rng)
    return update


def make_pcgrad_update_fn(temps: "TaskTemperatures", n_tasks: int = 16,
                          per_task: int = 4):
    """train_loop adapter; defers until enough task partitions exist."""
    def update(buffer, state, sac_cfg, rng):
        if len(buffer.nonempty_subranges()) < n_tasks:
            return None
        return pcgrad_update(buffer, state, temps, sac_cfg, rng,
                             n_tasks, per_task)
    return update


# ------------------------------------------------------------ PCGrad

def pcgrad_project(grads: list[np.ndarray], rng) -> list[np.ndarray]:
    """Project each gradient out of conflict with the others.

    For every pair with negative dot product, g_i loses its projection
    onto g_j; per task the other tasks are visited in a random order and
    g_i accumulates its corrections sequentially, while the g_j used for
    projection stay the originals.
    """
    originals = [np.asarray(g, dtype=np.float64) for g in grads]
    projected = []
    for i, g in enumerate(originals):
        out = g.copy()
        others = [j for j in range(len(originals)) if j != i]
        order = rng.permutation(len(others))
        for k in order:
            g_j = originals[others[int(k)]]
            dot = float(out @ g_j)
            if dot < 0.0:
                denom = float(g_j @ g_j)
                if denom > 0.0:
                    out -= (dot / denom) * g_j
        projected.append(out)
    return projected


@dataclass
class TaskTemperatures:
    """One entropy temperature per pose sub-range, created on first use."""

    lr: float = 1e-4
    init_alpha: float = 1.0
    log_alphas: dict[int, ad.Tensor] = field(default_factory=dict)
    opts: dict[int, ad.Adam] = field(default_factory=dict)

    def entry(self, subrange_id: int) -> tuple[ad.Tensor, ad.Adam]:
        if subrange_id not in self.log_alphas:
            t = ad.Tensor(np.asarray(np.log(self.init_alpha)))
            self.log_alphas[subrange_id] = t
            self.opts[subrange_id] = ad.Adam([t], lr=self.lr)
        return self.log_alphas[subrange_id], self.opts[subrange_id]

    def alpha(self, subrange_id: int) -> float:
        if subrange_id not in self.log_alphas:
            return self.init_alpha
        return float(np.exp(self.log_alphas[subrange_id].values))


def _flat_grads(params: dict) -> np.ndarray:
    return np.concatenate([params[k].grad.ravel() for k in sorted(params)])


def _assign_grads(params: dict, vec: np.ndarray) -> None:
    offset = 0
    for k in sorted(params):
        p = params[k]
        n = p.values.size
        p.grad = vec[offset:offset + n].reshape(p.values.shape).copy()
        offset += n


def pcgrad_update(buffer, state: sac.SacState, temps: TaskTemperatures,
                  cfg: sac.SacConfig, rng, n_tasks: int = 16,
                  per_task: int = 4) -> dict:
    """Stratified multi-task SAC step with projected actor gradients.

    Draws n_tasks sub-ranges x per_task transitions (64 by default),
    runs one critic regression over the combined batch with per-task
    temperatures in the targets, then, on actor steps, projects each
    task's actor gradient with pcgrad_project before a single Adam step
    on their sum. Each task also owns its temperature update.
    """
    groups = buffer.sample_stratified(n_tasks, per_task, rng)
    ncfg = state.net_cfg

    # critic regression over the concatenated batch, per-task targets
    ys, all_obs, all_actions = [], [], []
    for sub, batch in groups:
        obs, next_obs, actions, rewards, dones = \
            sac._batch_arrays(batch, cfg)
        y = sac.bellman_targets(next_obs, rewards, dones, state, cfg, rng,
                                alpha=temps.alpha(sub))
        ys.append(y)
        all_obs.extend(obs)
        all_actions.append(actions)
    y = np.concatenate(ys)
    actions = np.concatenate(all_actions)
    q1 = sac.critic_values(state.critic1, all_obs, actions,
                           state.critic_kind, ncfg)
    q2 = sac.critic_values(state.critic2, all_obs, actions,
                           state.critic_kind, ncfg)
    d1 = ad.sub(q1, ad.Tensor(y))
    d2 = ad.sub(q2, ad.Tensor(y))
    critic_loss = ad.add(ad.reduce_mean(ad.mul(d1, d1)),
                         ad.reduce_mean(ad.mul(d2, d2)))
    state.opt_critic.zero_grad()
    ad.backward(critic_loss)
    state.opt_critic.step()
    state.critic_steps += 1
    sac.soft_update(state.critic1, state.target1, cfg.tau)
    sac.soft_update(state.critic2, state.target2, cfg.tau)

    diag = {"critic_loss": float(critic_loss.values),
            "actor_stepped": False}
    if state.critic_steps % cfg.actor_delay != 0:
        return diag

    # per-task actor gradients, then conflict projection
    task_grads, entropy_gaps, task_losses = [], [], []
    for sub, batch in groups:
        total, logp, part = sac.actor_objective(
            batch, state, cfg, rng, alpha=temps.alpha(sub))
        state.opt_actor.zero_grad()
        state.opt_critic.zero_grad()
        ad.backward(total)
        task_grads.append(_flat_grads(state.actor))
        entropy_gaps.append((sub,
                             float(np.mean(logp.values)
                                   + cfg.target_entropy)))
        task_losses.append(part["actor_loss"])
    state.opt_actor.zero_grad()
    state.opt_critic.zero_grad()
    projected = pcgrad_project(task_grads, rng)
    _assign_grads(state.actor, np.sum(projected, axis=0))
    state.opt_actor.step()
    state.actor_steps += 1

    for sub, gap in entropy_gaps:
        log_alpha, opt = temps.entry(sub)
        log_alpha.zero_grad()
        loss = ad.mul(log_alpha, -gap)
        ad.backward(loss)
        opt.step()

    diag.update({"actor_stepped": True,
                 "actor_loss": float(np.mean(task_losses)),
                 "mean_alpha": float(np.mean(
                     [temps.alpha(sub) for sub, _ in groups]))})
    return diag
