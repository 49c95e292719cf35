"""Command-line front end: training, distillation, evaluation, baselines,
garment generation, trajectory rendering, and perturbation sweeps.

Every run writes a reproducibility manifest (config hash, seeds, package
version) into its output directory before any compute starts.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from collections import deque

import numpy as np

from . import __version__, baselines, distill, export, sac
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (BASELINE_METHODS, ExperimentConfig, build_env_config,
                     config_digest, config_to_mapping, load_experiment_config)
from .env import DressingEnv, build_garment
from .garment import save_obj_garment

EVAL_COLUMNS = ("pose_id", "garment", "upper_ratio", "whole_ratio", "success")
PERTURB_COLUMNS = ("delta_degrees",) + EVAL_COLUMNS
TRAIN_POSES = 45


class CliError(ValueError):
    """Configuration or usage problem surfaced as exit status 2."""


class MultiSubrangeEnv:
    """Round-robin over per-sub-range environments, keyed by reset seed."""

    def __init__(self, cfg: ExperimentConfig, subranges, seed: int = 0,
                 eval_mode: bool = False):
        if not subranges:
            raise CliError("no pose sub-ranges selected")
        self._subranges = tuple(subranges)
        self._envs = {
            sub: DressingEnv(build_env_config(cfg, sub,
                                              eval_mode=eval_mode),
                             seed=seed)
            for sub in self._subranges}
        self._active = self._envs[self._subranges[0]]

    def reset(self, seed=None):
        if seed is None:
            seed = 0
        pick = np.random.default_rng(seed).integers(len(self._subranges))
        self._active = self._envs[self._subranges[int(pick)]]
        return self._active.reset(seed=seed)

    def step(self, action):
        return self._active.step(action)

    @property
    def cfg(self):
        return self._active.cfg

    @property
    def mesh(self):
        return self._active.mesh


# ------------------------------------------------------------ manifests

def _out_root(cfg: ExperimentConfig) -> str:
    root = os.environ.get("DRESSIM_OUT", "")
    out = cfg.out_dir
    if root and not os.path.isabs(out):
        out = os.path.join(root, out)
    os.makedirs(out, exist_ok=True)
    return out


def write_manifest(out: str, cfg: ExperimentConfig, command: str) -> str:
    path = os.path.join(out, "manifest.json")
    payload = {"command": command,
               "config_hash": config_digest(cfg),
               "seeds": list(cfg.seeds),
               "code_version": __version__,
               "config": config_to_mapping(cfg)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path


def _write_rows(path: str, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in columns})


def _write_summary(out: str, per_seed: dict) -> str:
    """per_seed: column -> list of per-seed values; emits mean and std."""
    path = os.path.join(out, "summary.json")
    summary = {key: {"mean": float(np.mean(vals)),
                     "std": float(np.std(vals)),
                     "values": [float(v) for v in vals]}
               for key, vals in per_seed.items()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path


# ------------------------------------------------------------ training

def _final_metrics(metrics: list) -> dict:
    numeric = {}
    if metrics:
        last = metrics[-1]
        for key, value in last.items():
            if key != "step" and np.isfinite(value):
                numeric[key] = value
    return numeric


def _train_one(cfg: ExperimentConfig, env, eval_env, seed: int,
               out: str, tag: str, *, update_fn=None, state=None):
    """One seeded training run; returns the final SacState and metrics."""
    rng = np.random.default_rng(seed)
    buffer = None
    if state is None and cfg.checkpoint_path:
        loaded = load_checkpoint(cfg.checkpoint_path)
        state, buffer, rng = loaded.state, loaded.buffer, loaded.rng or rng
    if state is None:
        state = sac.make_sac_state(rng, cfg.net, cfg.sac,
                                   policy_kind=cfg.policy,
                                   critic_kind=cfg.critic)
    train_seeds, eval_seeds = sac.pose_split(TRAIN_POSES, cfg.eval_poses,
                                             seed=0)
    ckpt_path = os.path.join(out, f"ckpt_{tag}.ckpt")
    aligned = cfg.sac.eval_every % env.cfg.episode_length == 0

    def checkpoint_fn(st, buf, step):
        save_checkpoint(ckpt_path, st, buffer=buf, rng=rng,
                        extra={"config_hash": config_digest(cfg),
                               "step": step})

    result = sac.train_loop(
        env, state, cfg.sac, rng, cfg.steps, eval_env=eval_env,
        train_seeds=train_seeds, eval_seeds=eval_seeds,
        metrics_path=os.path.join(out, f"metrics_{tag}.csv"),
        checkpoint_fn=checkpoint_fn if aligned else None,
        update_fn=update_fn, buffer=buffer)
    save_checkpoint(ckpt_path, state, buffer=result.buffer, rng=rng,
                    extra={"config_hash": config_digest(cfg),
                           "step": state.env_steps})
    return state, result.metrics


def cmd_train(cfg: ExperimentConfig, out: str) -> int:
    for sub in cfg.subranges:
        per_seed = {}
        for seed in cfg.seeds:
            env = DressingEnv(build_env_config(cfg, sub), seed=seed)
            eval_env = DressingEnv(build_env_config(cfg, sub,
                                                    eval_mode=True),
                                   seed=seed + 10_000)
            tag = f"sub{sub:02d}_seed{seed}"
            _, metrics = _train_one(cfg, env, eval_env, seed, out, tag)
            for key, value in _final_metrics(metrics).items():
                per_seed.setdefault(key, []).append(value)
        if per_seed:
            _write_summary(out, per_seed)
    return 0


def _load_teacher_bank(cfg: ExperimentConfig) -> distill.TeacherBank:
    if not cfg.teacher_bank:
        raise CliError("distillation requires a teacher bank "
                       "(config key teacher_bank)")
    teachers = {}
    for path, sub in cfg.teacher_bank:
        loaded = load_checkpoint(path)
        if loaded.state.net_cfg != cfg.net:
            raise CliError(f"teacher {path} was trained with a different "
                           "network configuration")
        if loaded.state.policy_kind != cfg.policy:
            raise CliError(f"teacher {path} uses policy kind "
                           f"{loaded.state.policy_kind!r}, run wants "
                           f"{cfg.policy!r}")
        teachers[int(sub)] = loaded.state.actor
    return distill.TeacherBank(net_cfg=cfg.net, policy_kind=cfg.policy,
                               teachers=teachers)


def cmd_distill(cfg: ExperimentConfig, out: str) -> int:
    bank = _load_teacher_bank(cfg)
    subranges = bank.subranges()
    per_seed = {}
    for seed in cfg.seeds:
        env = MultiSubrangeEnv(cfg, subranges, seed=seed)
        eval_env = MultiSubrangeEnv(cfg, subranges, seed=seed + 10_000,
                                    eval_mode=True)
        tag = f"student_seed{seed}"
        update_fn = distill.make_update_fn(bank, cfg.distill)
        _, metrics = _train_one(cfg, env, eval_env, seed, out, tag,
                                update_fn=update_fn)
        for key, value in _final_metrics(metrics).items():
            per_seed.setdefault(key, []).append(value)
    if per_seed:
        _write_summary(out, per_seed)
    return 0


# ------------------------------------------------------------ evaluation

def _require_checkpoint(cfg: ExperimentConfig) -> sac.SacState:
    if not cfg.checkpoint_path:
        raise CliError("this command needs config key checkpoint_path")
    return load_checkpoint(cfg.checkpoint_path).state


def _eval_subrange(cfg: ExperimentConfig):
    return cfg.subranges[0] if len(cfg.subranges) == 1 else None


def cmd_eval(cfg: ExperimentConfig, out: str) -> int:
    state = _require_checkpoint(cfg)
    _, eval_seeds = sac.pose_split(TRAIN_POSES, cfg.eval_poses, seed=0)
    rows = []
    for spec in cfg.selected_garments():
        env_cfg = dataclasses.replace(
            build_env_config(cfg, _eval_subrange(cfg), eval_mode=True),
            garments=(spec,))
        env = DressingEnv(env_cfg, seed=0)
        _, garment_rows = sac.evaluate(env, state, cfg.sac, eval_seeds)
        rows.extend(garment_rows)
    _write_rows(os.path.join(out, "eval.csv"), EVAL_COLUMNS, rows)
    return 0


def cmd_perturb_eval(cfg: ExperimentConfig, out: str) -> int:
    state = _require_checkpoint(cfg)
    _, eval_seeds = sac.pose_split(TRAIN_POSES, cfg.eval_poses, seed=0)
    env = DressingEnv(build_env_config(cfg, _eval_subrange(cfg),
                                       eval_mode=True), seed=0)
    rows = []
    means = {}
    for delta in cfg.perturb_degrees:
        ratios = []
        for seed in eval_seeds:
            o, o_rand, info = env.reset(seed=int(seed))
            env.perturb_pose(d_phi1=float(delta), d_phi3=float(delta))
            while True:
                action = sac.select_action(state, o, o_rand, cfg.sac,
                                           rng=None, deterministic=True)
                o, o_rand, _, done, info = env.step(action)
                if done:
                    break
            rows.append({"delta_degrees": float(delta),
                         "pose_id": int(seed),
                         "garment": env.mesh.name,
                         "upper_ratio": float(info["upper_ratio"]),
                         "whole_ratio": float(info["whole_ratio"]),
                         "success": bool(info["success"])})
            ratios.append(float(info["upper_ratio"]))
        means[float(delta)] = float(np.mean(ratios))
    _write_rows(os.path.join(out, "perturb.csv"), PERTURB_COLUMNS, rows)
    with open(os.path.join(out, "perturb_summary.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"mean_upper_ratio": {repr(k): v
                                        for k, v in means.items()}},
                  fh, sort_keys=True, indent=1)
        fh.write("\n")
    return 0


# ------------------------------------------------------------ baselines

def _metric_row(env, seed, info) -> dict:
    return {"pose_id": int(seed), "garment": env.mesh.name,
            "upper_ratio": float(info["upper_ratio"]),
            "whole_ratio": float(info["whole_ratio"]),
            "success": bool(info["success"])}


def _follow_waypoints(env, path, max_translation: float):
    """Greedy tracking of the planned (position, orientation) sequence."""
    targets = [p for p, _ in path.sample_points()]
    idx = 0
    info = {}
    done = False
    while not done:
        gripper = env.gripper_pos
        while idx < len(targets) - 1 and \
                np.linalg.norm(targets[idx] - gripper) < 0.005:
            idx += 1
        delta = targets[idx] - gripper
        action = np.zeros(6)
        action[:3] = np.clip(delta / max_translation, -1.0, 1.0)
        _, _, _, done, info = env.step(action)
    return info


def _run_heuristic(cfg: ExperimentConfig, out: str) -> list:
    _, eval_seeds = sac.pose_split(TRAIN_POSES, cfg.eval_poses, seed=0)
    env = DressingEnv(build_env_config(cfg, _eval_subrange(cfg),
                                       eval_mode=True), seed=0)
    plan_cfg = baselines.HeuristicConfig()
    rows = []
    for seed in eval_seeds:
        _, _, info = env.reset(seed=int(seed))
        try:
            path = baselines.heuristic_plan(env.geom, env.body, plan_cfg)
        except ValueError:
            path = None
        if path is None:           # no plan: hold still, report the episode
            while not env.done:
                _, _, _, _, info = env.step(np.zeros(6))
        else:
            info = _follow_waypoints(env, path,
                                     env.cfg.max_step_translation)
        rows.append(_metric_row(env, seed, info))
    return rows


def _run_haptic_mpc(cfg: ExperimentConfig, out: str) -> list:
    mcfg = baselines.HapticModelConfig()
    train_seeds, eval_seeds = sac.pose_split(TRAIN_POSES, cfg.eval_poses,
                                             seed=0)
    env = DressingEnv(build_env_config(cfg, _eval_subrange(cfg)), seed=0)
    rng = np.random.default_rng(cfg.seeds[0])

    def state_vec(prev, pos, force):
        velocity = pos - prev
        return baselines.make_state_vector(pos, np.zeros(3), velocity,
                                           np.zeros(3), force)

    windows, actions, forces = [], [], []
    n_collect = max(2, min(8, len(train_seeds)))
    for seed in train_seeds[:n_collect]:
        env.reset(seed=int(seed))
        pos = env.gripper_pos
        history = deque([state_vec(pos, pos, 0.0)] * mcfg.history,
                        maxlen=mcfg.history)
        while not env.done:
            action = rng.uniform(-1.0, 1.0, size=6)
            _, _, _, _, info = env.step(action)
            windows.append(np.stack(history))
            actions.append(action)
            forces.append(float(info["force"]))
            prev, pos = pos, env.gripper_pos
            history.append(state_vec(prev, pos, float(info["force"])))
    baselines.save_force_dataset(os.path.join(out, "force_dataset.csv"),
                                 np.asarray(windows), np.asarray(actions),
                                 np.asarray(forces), mcfg)
    model = baselines.train_force_model(
        np.asarray(windows), np.asarray(actions), np.asarray(forces), mcfg,
        rng=np.random.default_rng(cfg.seeds[0]), epochs=300, lr=1e-3,
        batch=64)

    eval_env = DressingEnv(build_env_config(cfg, _eval_subrange(cfg),
                                            eval_mode=True), seed=0)
    rows = []
    for seed in eval_seeds:
        _, _, info = eval_env.reset(seed=int(seed))
        geom = eval_env.geom
        pos = eval_env.gripper_pos
        history = deque([state_vec(pos, pos, 0.0)] * mcfg.history,
                        maxlen=mcfg.history)
        while not eval_env.done:
            along = float((pos - geom.p_elbow)
                          @ (geom.p_finger - geom.p_elbow))
            phase = "forearm" if along > 0 else "upper_arm"
            action = baselines.haptic_mpc_select(
                np.stack(history), geom, phase, model, mcfg, rng)
            _, _, _, _, info = eval_env.step(action)
            prev, pos = pos, eval_env.gripper_pos
            history.append(state_vec(prev, pos, float(info["force"])))
        rows.append(_metric_row(eval_env, seed, info))
    return rows


def cmd_baseline(cfg: ExperimentConfig, out: str) -> int:
    method = cfg.baseline_method
    if method == "heuristic":
        rows = _run_heuristic(cfg, out)
    elif method == "haptic-mpc":
        rows = _run_haptic_mpc(cfg, out)
    elif method == "direct-vector":
        return cmd_train(dataclasses.replace(cfg, policy="vector"), out)
    elif method == "latent-q":
        return cmd_train(dataclasses.replace(cfg, critic="latent"), out)
    elif method == "kl-distill":
        return cmd_distill(
            dataclasses.replace(
                cfg, distill=dataclasses.replace(cfg.distill,
                                                 loss_kind="kl")), out)
    elif method == "pcgrad":
        return _cmd_pcgrad(cfg, out)
    else:
        raise CliError(f"unknown baseline {method!r}")
    _write_rows(os.path.join(out, f"baseline_{method}.csv"),
                EVAL_COLUMNS, rows)
    _write_summary(out, {
        "upper_ratio": [r["upper_ratio"] for r in rows],
        "whole_ratio": [r["whole_ratio"] for r in rows],
        "success": [float(r["success"]) for r in rows]})
    return 0


def _cmd_pcgrad(cfg: ExperimentConfig, out: str) -> int:
    n_tasks = min(16, len(cfg.subranges))
    per_task = max(1, cfg.sac.batch // n_tasks)
    per_seed = {}
    for seed in cfg.seeds:
        env = MultiSubrangeEnv(cfg, cfg.subranges, seed=seed)
        eval_env = MultiSubrangeEnv(cfg, cfg.subranges, seed=seed + 10_000,
                                    eval_mode=True)
        temps = distill.TaskTemperatures(lr=cfg.sac.lr_alpha,
                                         init_alpha=cfg.sac.init_alpha)
        update_fn = distill.make_pcgrad_update_fn(temps, n_tasks=n_tasks,
                                                  per_task=per_task)
        tag = f"pcgrad_seed{seed}"
        _, metrics = _train_one(cfg, env, eval_env, seed, out, tag,
                                update_fn=update_fn)
        for key, value in _final_metrics(metrics).items():
            per_seed.setdefault(key, []).append(value)
    if per_seed:
        _write_summary(out, per_seed)
    return 0


# ------------------------------------------------------------ misc commands

def cmd_gen_garment(cfg: ExperimentConfig, out: str) -> int:
    for spec in cfg.selected_garments():
        mesh = build_garment(spec)
        save_obj_garment(mesh, os.path.join(out, f"{spec.name}.obj"),
                         os.path.join(out, f"{spec.name}.json"))
    return 0


def cmd_render(cfg: ExperimentConfig, out: str) -> int:
    state = _require_checkpoint(cfg)
    env = DressingEnv(build_env_config(cfg, _eval_subrange(cfg),
                                       eval_mode=True), seed=0)

    def act_fn(o, o_rand):
        return sac.select_action(state, o, o_rand, cfg.sac, rng=None,
                                 deterministic=True)

    log = export.record_episode(env, act_fn, seed=int(cfg.seeds[0]))
    export.export_trajectory(log, os.path.join(out, "frames"))
    return 0


# ------------------------------------------------------------ entry point

HANDLERS = {
    "train": cmd_train,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "gen-garment": cmd_gen_garment,
    "render": cmd_render,
    "perturb-eval": cmd_perturb_eval,
}


def run(command: str, cfg: ExperimentConfig) -> int:
    """Execute one subcommand; returns the process exit status."""
    if command not in HANDLERS:
        raise CliError(f"unknown command {command!r}")
    out = _out_root(cfg)
    write_manifest(out, cfg, command)
    return HANDLERS[command](cfg, out)


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    updates = {}
    if args.seed is not None:
        updates["seeds"] = (args.seed,)
    if args.out is not None:
        updates["out_dir"] = args.out
    if args.steps is not None:
        updates["steps"] = args.steps
    if args.subranges is not None:
        updates["subranges"] = tuple(
            int(s) for s in args.subranges.split(",") if s)
    if args.garments is not None:
        updates["garments"] = tuple(
            g for g in args.garments.split(",") if g)
    if args.mode is not None:
        if args.command == "baseline":
            updates["baseline_method"] = args.mode
        elif args.command == "distill":
            if args.mode not in ("plain", "guided"):
                raise CliError("distill --mode must be plain or guided")
            updates["distill"] = dataclasses.replace(
                cfg.distill, guided_dr=args.mode == "guided")
        else:
            raise CliError(
                "--mode only applies to the baseline and distill commands")
    updates["mode"] = args.command
    return dataclasses.replace(cfg, **updates)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dressim",
        description="desk-scale robot-assisted dressing experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in HANDLERS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None,
                       help="TOML or JSON experiment file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--subranges", default=None,
                       help="comma-separated pose sub-range ids")
        p.add_argument("--garments", default=None,
                       help="comma-separated garment names")
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--mode", default=None,
                       help="baseline method, or plain/guided for distill")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = (load_experiment_config(args.config)
               if args.config else ExperimentConfig())
        cfg = _apply_overrides(cfg, args)
        return run(args.command, cfg)
    except (CliError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
