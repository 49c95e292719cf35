"""Checkpoint persistence: training state, replay buffer, and rng.

Single-file format: an 8-byte magic, a version word, a JSON manifest
(array names, dtypes, shapes, plus all scalar metadata), then the raw
array bytes concatenated in manifest order. Nothing in the file depends
on wall-clock state, so saving the same state twice produces identical
bytes.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nets, sac
from .config import build_dataclass
from .env import Transition
from .perception import SegmentedPointCloud

MAGIC = b"DSIMCKPT"
FORMAT_VERSION = 1

_PARAM_GROUPS = ("actor", "critic1", "critic2", "target1", "target2")
_OPT_NAMES = ("actor", "critic", "alpha")
_OBS_STREAMS = ("o", "o_rand", "o_next", "o_rand_next")


@dataclass
class Checkpoint:
    state: sac.SacState
    buffer: sac.ReplayBuffer | None
    rng: np.random.Generator | None
    extra: dict


class _ArrayStore:
    """Ordered name -> array map that serializes to manifest + payload."""

    def __init__(self):
        self.entries = []

    def add(self, name: str, arr: np.ndarray) -> None:
        arr = np.asarray(arr)
        # ascontiguousarray promotes 0-d to 1-d, so keep the true shape
        self.entries.append((name, arr.shape,
                             np.ascontiguousarray(arr)))

    def manifest(self) -> list:
        return [{"name": name, "dtype": arr.dtype.str,
                 "shape": list(shape), "nbytes": arr.nbytes}
                for name, shape, arr in self.entries]

    def payload(self) -> bytes:
        return b"".join(arr.tobytes() for _, _, arr in self.entries)


def _opt_meta(opt: ad.Adam) -> dict:
    return {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
            "eps": opt.eps, "step_count": opt.step_count}


def _pack_obs(store: _ArrayStore, stream: str, obs_list) -> None:
    sizes, points, classes = [], [], []
    for obs in obs_list:
        if obs is None:
            sizes.append(-1)
            continue
        sizes.append(obs.num_points)
        points.append(obs.points)
        classes.append(obs.class_onehot.argmax(axis=1).astype(np.uint8))
    store.add(f"buffer.{stream}.sizes", np.asarray(sizes, dtype=np.int64))
    store.add(f"buffer.{stream}.points",
              np.concatenate(points, axis=0) if points
              else np.zeros((0, 3)))
    store.add(f"buffer.{stream}.classes",
              np.concatenate(classes) if classes
              else np.zeros(0, dtype=np.uint8))


def _unpack_obs(arrays: dict, stream: str) -> list:
    sizes = arrays[f"buffer.{stream}.sizes"]
    points = arrays[f"buffer.{stream}.points"]
    classes = arrays[f"buffer.{stream}.classes"]
    out, offset = [], 0
    eye = np.eye(3, dtype=np.float64)
    for n in sizes:
        if n < 0:
            out.append(None)
            continue
        n = int(n)
        out.append(SegmentedPointCloud(
            points=points[offset:offset + n].copy(),
            class_onehot=eye[classes[offset:offset + n]]))
        offset += n
    return out


def save_checkpoint(path, state: sac.SacState, *,
                    buffer: sac.ReplayBuffer | None = None,
                    rng: np.random.Generator | None = None,
                    extra: dict | None = None) -> None:
    store = _ArrayStore()
    for group in _PARAM_GROUPS:
        params = getattr(state, group)
        for key in sorted(params):
            store.add(f"params.{group}.{key}", params[key].values)
    store.add("log_alpha", state.log_alpha.values)
    for opt_name, opt in zip(_OPT_NAMES, (state.opt_actor, state.opt_critic,
                                          state.opt_alpha)):
        for i, m in enumerate(opt.m):
            store.add(f"opt.{opt_name}.m.{i:04d}", m)
        for i, v in enumerate(opt.v):
            store.add(f"opt.{opt_name}.v.{i:04d}", v)

    meta = {
        "policy_kind": state.policy_kind,
        "critic_kind": state.critic_kind,
        "net": dataclasses.asdict(state.net_cfg),
        "critic_steps": state.critic_steps,
        "actor_steps": state.actor_steps,
        "env_steps": state.env_steps,
        "optims": {name: _opt_meta(opt) for name, opt in
                   zip(_OPT_NAMES, (state.opt_actor, state.opt_critic,
                                    state.opt_alpha))},
        "rng": None if rng is None else rng.bit_generator.state,
        "buffer": None,
        "extra": extra or {},
    }
    if buffer is not None:
        items = buffer._items
        meta["buffer"] = {"capacity": buffer.capacity,
                          "cursor": buffer._cursor}
        store.add("buffer.actions",
                  np.stack([t.action for t in items])
                  if items else np.zeros((0, 6)))
        store.add("buffer.rewards",
                  np.asarray([t.reward for t in items], dtype=np.float64))
        store.add("buffer.dones",
                  np.asarray([t.done for t in items], dtype=np.uint8))
        store.add("buffer.subranges",
                  np.asarray([t.subrange_id for t in items], dtype=np.int64))
        for stream in _OBS_STREAMS:
            _pack_obs(store, stream,
                      [getattr(t, stream) for t in items])

    manifest = json.dumps({"arrays": store.manifest(), "meta": meta},
                          sort_keys=True,
                          separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(manifest)))
        fh.write(manifest)
        fh.write(store.payload())


def _read_envelope(path):
    blob = open(path, "rb").read()
    head = len(MAGIC) + struct.calcsize("<IQ")
    if len(blob) < head or blob[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version, manifest_len = struct.unpack(
        "<IQ", blob[len(MAGIC):head])
    if version != FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format version {version} "
            f"(this build reads {FORMAT_VERSION})")
    if len(blob) < head + manifest_len:
        raise ValueError("truncated checkpoint file")
    manifest = json.loads(blob[head:head + manifest_len].decode("utf-8"))
    payload = blob[head + manifest_len:]
    expected = sum(entry["nbytes"] for entry in manifest["arrays"])
    if len(payload) != expected:
        raise ValueError("truncated checkpoint file")
    arrays, offset = {}, 0
    for entry in manifest["arrays"]:
        raw = payload[offset:offset + entry["nbytes"]]
        offset += entry["nbytes"]
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype=np.dtype(entry["dtype"])).reshape(
            entry["shape"]).copy()
    return manifest["meta"], arrays


def _restore_opt(opt: ad.Adam, meta: dict, arrays: dict, name: str) -> None:
    opt.lr = meta["lr"]
    opt.beta1 = meta["beta1"]
    opt.beta2 = meta["beta2"]
    opt.eps = meta["eps"]
    opt.step_count = meta["step_count"]
    count = len(opt.params)
    moments = [arrays[f"opt.{name}.m.{i:04d}"] for i in range(count)]
    seconds = [arrays[f"opt.{name}.v.{i:04d}"] for i in range(count)]
    for slot, arr in zip(opt.m, moments):
        if slot.shape != arr.shape:
            raise ValueError("optimizer state does not match the parameters")
        slot[...] = arr
    for slot, arr in zip(opt.v, seconds):
        slot[...] = arr


def load_checkpoint(path) -> Checkpoint:
    meta, arrays = _read_envelope(path)
    net_cfg = build_dataclass(nets.PointNetConfig, meta["net"],
                              "checkpoint.net")

    def group(name):
        prefix = f"params.{name}."
        return {key[len(prefix):]: ad.Tensor(arr)
                for key, arr in arrays.items() if key.startswith(prefix)}

    actor, critic1, critic2, target1, target2 = \
        (group(g) for g in _PARAM_GROUPS)
    log_alpha = ad.Tensor(arrays["log_alpha"])
    state = sac.SacState(
        net_cfg=net_cfg, policy_kind=meta["policy_kind"],
        critic_kind=meta["critic_kind"], actor=actor, critic1=critic1,
        critic2=critic2, target1=target1, target2=target2,
        log_alpha=log_alpha,
        opt_actor=ad.Adam(sac._param_list(actor)),
        opt_critic=ad.Adam(sac._param_list(critic1, critic2)),
        opt_alpha=ad.Adam([log_alpha]),
        critic_steps=meta["critic_steps"], actor_steps=meta["actor_steps"],
        env_steps=meta["env_steps"])
    for name, opt in zip(_OPT_NAMES, (state.opt_actor, state.opt_critic,
                                      state.opt_alpha)):
        _restore_opt(opt, meta["optims"][name], arrays, name)

    buffer = None
    if meta["buffer"] is not None:
        buffer = sac.ReplayBuffer(capacity=meta["buffer"]["capacity"])
        streams = {s: _unpack_obs(arrays, s) for s in _OBS_STREAMS}
        actions = arrays["buffer.actions"]
        rewards = arrays["buffer.rewards"]
        dones = arrays["buffer.dones"]
        subranges = arrays["buffer.subranges"]
        items = [Transition(o=streams["o"][i], o_rand=streams["o_rand"][i],
                            action=actions[i], reward=float(rewards[i]),
                            o_next=streams["o_next"][i],
                            o_rand_next=streams["o_rand_next"][i],
                            done=bool(dones[i]),
                            subrange_id=int(subranges[i]))
                 for i in range(len(actions))]
        buffer._items = items
        buffer._cursor = meta["buffer"]["cursor"]
        for i, t in enumerate(items):
            buffer._by_subrange.setdefault(t.subrange_id, set()).add(i)

    rng = None
    if meta["rng"] is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
    return Checkpoint(state=state, buffer=buffer, rng=rng,
                      extra=meta["extra"])
