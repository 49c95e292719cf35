"""Experiment configuration: strict-schema TOML/JSON loading.

Every section maps onto one of the frozen config dataclasses; unknown
keys are rejected with the offending location in the message. Keys may
carry a ``_cm`` or ``_deg`` suffix to supply centimeters or degrees, which
are converted to the meters/radians the dataclasses store.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

import numpy as np
import tomli

from .cloth import SimParams
from .distill import DistillConfig
from .env import EnvConfig, GarmentSpec, default_garment_registry
from .nets import PointNetConfig
from .perception import RandomizerConfig
from .reward import RewardParams
from .sac import CRITIC_KINDS, POLICY_KINDS, SacConfig

MODES = ("train", "distill", "eval", "baseline", "gen-garment", "render",
         "perturb-eval")
BASELINE_METHODS = ("heuristic", "haptic-mpc", "pcgrad", "direct-vector",
                    "latent-q", "kl-distill")


def _convert_key(name: str, value):
    """Resolve unit-suffixed keys onto the underlying field."""
    if name.endswith("_cm"):
        return name[:-3], _scale(value, 0.01)
    if name.endswith("_deg"):
        return name[:-4], _scale(value, float(np.pi) / 180.0)
    return name, value


def _scale(value, factor):
    if isinstance(value, (list, tuple)):
        return type(value)(_scale(v, factor) for v in value)
    return value * factor


def build_dataclass(cls, mapping, where: str):
    """Instantiate cls from a plain mapping, rejecting unknown keys.

    Lists become tuples (the dataclasses store tuples), and nested
    dataclass fields recurse with an extended location string.
    """
    if not isinstance(mapping, dict):
        raise ValueError(f"{where} must be a table, got {type(mapping).__name__}")
    by_name = {f.name: f for f in fields(cls)}
    kwargs = {}
    for raw_key, raw_value in mapping.items():
        key, value = _convert_key(raw_key, raw_value)
        if key not in by_name:
            raise ValueError(f"unknown config key {where}.{raw_key}")
        f = by_name[key]
        nested = _nested_type(f)
        if nested is not None and isinstance(value, dict):
            value = build_dataclass(nested, value, f"{where}.{key}")
        elif isinstance(value, list):
            value = _tupled(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as err:
        raise ValueError(f"bad {where} section: {err}") from None


def _nested_type(f):
    default = f.default
    if default is not dataclasses.MISSING \
            and dataclasses.is_dataclass(default):
        return type(default)
    if f.default_factory is not dataclasses.MISSING:
        produced = f.default_factory()
        if dataclasses.is_dataclass(produced) \
                and not isinstance(produced, tuple):
            return type(produced)
    return None


def _tupled(value):
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: a mode plus every sub-config the run needs."""

    mode: str = "train"
    seeds: tuple[int, ...] = (0, 1, 2)
    out_dir: str = "runs"
    garments: tuple[str, ...] = ()        # names; empty = whole registry
    garment_specs: tuple[GarmentSpec, ...] = ()
    subranges: tuple[int, ...] = (13,)
    steps: int = 200_000
    policy: str = "dense"
    critic: str = "point"
    baseline_method: str = "heuristic"
    teacher_bank: tuple[tuple[str, int], ...] = ()   # (path, subrange)
    checkpoint_path: str = ""
    perturb_degrees: tuple[float, ...] = (0.0, 5.0, 10.0)
    eval_poses: int = 5
    env: EnvConfig = field(default_factory=EnvConfig)
    net: PointNetConfig = field(default_factory=PointNetConfig)
    sac: SacConfig = field(default_factory=SacConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    randomizer: RandomizerConfig = field(default_factory=RandomizerConfig)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of "
                             f"{MODES}")
        if self.baseline_method not in BASELINE_METHODS:
            raise ValueError(
                f"unknown baseline {self.baseline_method!r}; expected one "
                f"of {BASELINE_METHODS}")
        if self.policy not in POLICY_KINDS or self.critic not in CRITIC_KINDS:
            raise ValueError("unknown policy or critic kind")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.eval_poses < 1:
            raise ValueError("eval_poses must be positive")
        registry_names = [s.name for s in self.registry()]
        if len(set(registry_names)) != len(registry_names):
            raise ValueError("duplicate garment names in the registry")
        for name in self.garments:
            if name not in registry_names:
                raise ValueError(f"unknown garment {name!r}; registry has "
                                 f"{registry_names}")
        for sub in self.subranges:
            if not 0 <= sub < 27:
                raise ValueError("subrange ids must lie in [0, 27)")

    def registry(self) -> tuple[GarmentSpec, ...]:
        return default_garment_registry() + self.garment_specs

    def selected_garments(self) -> tuple[GarmentSpec, ...]:
        registry = self.registry()
        if not self.garments:
            return registry
        by_name = {s.name: s for s in registry}
        return tuple(by_name[n] for n in self.garments)


_SECTION_TYPES = {
    "env": EnvConfig,
    "net": PointNetConfig,
    "sac": SacConfig,
    "distill": DistillConfig,
    "randomizer": RandomizerConfig,
}


def parse_experiment_config(mapping: dict,
                            where: str = "config") -> ExperimentConfig:
    if not isinstance(mapping, dict):
        raise ValueError("the experiment config must be a table")
    top_fields = {f.name for f in fields(ExperimentConfig)}
    kwargs = {}
    for raw_key, raw_value in mapping.items():
        key = raw_key
        if key in _SECTION_TYPES:
            kwargs[key] = build_dataclass(_SECTION_TYPES[key], raw_value,
                                          f"{where}.{key}")
        elif key == "garment_specs":
            kwargs[key] = tuple(
                build_dataclass(GarmentSpec, entry,
                                f"{where}.garment_specs[{i}]")
                for i, entry in enumerate(raw_value))
        elif key == "teacher_bank":
            kwargs[key] = tuple(
                (str(entry["path"]), int(entry["subrange"]))
                for entry in raw_value)
        elif key in top_fields:
            kwargs[key] = _tupled(raw_value) \
                if isinstance(raw_value, list) else raw_value
        else:
            raise ValueError(f"unknown config key {where}.{raw_key}")
    cfg = ExperimentConfig(**kwargs)
    # the standalone randomizer section overrides the one nested in env
    if "randomizer" in kwargs:
        cfg = dataclasses.replace(
            cfg, env=dataclasses.replace(cfg.env,
                                         randomizer=kwargs["randomizer"]))
    return cfg


def load_experiment_config(path) -> ExperimentConfig:
    text = open(path, "rb").read()
    name = str(path)
    if name.endswith(".json"):
        mapping = json.loads(text.decode("utf-8"))
    else:
        mapping = tomli.loads(text.decode("utf-8"))
    return parse_experiment_config(mapping)


def _jsonable(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _jsonable(getattr(value, f.name))
                for f in fields(value)}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in sorted(value.items())}
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def config_to_mapping(cfg: ExperimentConfig) -> dict:
    return _jsonable(cfg)


def config_digest(cfg: ExperimentConfig) -> str:
    """Stable content hash used in reproducibility manifests."""
    canon = json.dumps(config_to_mapping(cfg), sort_keys=True,
                       separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def build_env_config(cfg: ExperimentConfig, subrange: int | None, *,
                     eval_mode: bool = False) -> EnvConfig:
    """Env config for one run: selected garments, one pose sub-range."""
    return dataclasses.replace(
        cfg.env, garments=cfg.selected_garments(), subrange=subrange,
        eval_mode=eval_mode)
