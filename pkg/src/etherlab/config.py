"""Structured run configuration: schema-validated nested dataclasses.

Configs load from YAML, reject unknown keys with field-level messages, accept
dotted ``--set section.key=value`` overrides, and serialize back to a dict so
every run directory carries an exact copy of what it ran with.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class EnvConfig:
    room_size: int = 8
    n_distractors: int = 5
    allow_colorless_goals: bool = True
    max_steps: int = 40
    reward_free: bool = False
    render_pixels: bool = True


@dataclass
class NetsConfig:
    vocab_size: int = 64
    goal_hidden: int = 128
    core_hidden: int = 1024
    rg_hidden: int = 128


@dataclass
class AugmentBlock:
    blur_sigma_max: float = 1.2
    jitter_strength: float = 0.3
    translate_frac: float = 0.1
    rotate_degrees: float = 10.0


@dataclass
class RGConfig:
    vocab_size: int = 64
    max_len: int = 10
    distractors: int = 3
    descriptive: bool = False
    descriptive_target_prob: float = 0.5
    tau0: float = 0.2
    beta0: float = 0.01
    hinge_margin: float = 1.0
    batch_size: int = 32
    lr: float = 1e-3
    updates_per_episode: int = 1
    dataset_cap: int = 10_000
    augment: AugmentBlock = field(default_factory=AugmentBlock)


@dataclass
class GroundingConfig:
    weight: float = 1.0
    noise_max: float = 0.2


@dataclass
class ReplayConfig:
    capacity: int = 10_000
    unroll: int = 20
    overlap: int = 10
    priority_exponent: float = 0.9
    is_exponent: float = 0.6
    eta: float = 0.9
    priority_floor: float = 1e-6


@dataclass
class TrainerConfig:
    n_actors: int = 32
    actor_update_interval: int = 1
    n_step: int = 3
    gamma: float = 0.98
    lr: float = 6.25e-5
    adam_eps: float = 1e-12
    target_update_interval: int = 2500
    burn_in: int = 10
    observation_budget: int = 200_000
    batch_size: int = 64
    grad_clip: float = 40.0
    eps_base: float = 0.4
    eps_alpha: float = 7.0
    learn_start: int = 1_000
    updates_per_step: int = 1

    def __post_init__(self):
        if self.burn_in not in (0, 10):
            raise ConfigError(f"trainer.burn_in must be 0 or 10, got {self.burn_in}")
        if self.gamma <= 0 or self.gamma > 1:
            raise ConfigError("trainer.gamma must lie in (0, 1]")


@dataclass
class HindsightConfig:
    strategy: str = "future_k"
    k_her: int = 0
    n_contrastive: int = 4
    theta_sup: float = 0.75
    n_min: int = 32
    theta_rg: float = 0.75
    split_ratio: float = 0.9

    def __post_init__(self):
        if self.strategy not in ("final", "future_k"):
            raise ConfigError(f"hindsight.strategy must be final|future_k, got {self.strategy!r}")


VARIANTS = ("r2d2", "higher_plus", "higher_pp", "ether", "ether_plus")


@dataclass
class RunConfig:
    variant: str = "r2d2"
    seed: int = 0
    eval_interval: int = 10_000
    n_eval_envs: int = 256
    env: EnvConfig = field(default_factory=EnvConfig)
    nets: NetsConfig = field(default_factory=NetsConfig)
    rg: RGConfig = field(default_factory=RGConfig)
    grounding: GroundingConfig = field(default_factory=GroundingConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    hindsight: HindsightConfig = field(default_factory=HindsightConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def uses_speaker(self) -> bool:
        return self.variant != "r2d2"

    @property
    def uses_refgame(self) -> bool:
        return self.variant in ("ether", "ether_plus")

    @property
    def uses_grounding(self) -> bool:
        return self.variant == "ether_plus"

    @property
    def gate_mode(self) -> str:
        return "ether" if self.uses_refgame else "higher"


def _coerce(value, target_type, path: str):
    if dataclasses.is_dataclass(target_type):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {type(value).__name__}")
        return build_dataclass(target_type, value, path)
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if target_type is int:
        if isinstance(value, str):
            try:
                value = int(value)
            except ValueError:
                raise ConfigError(f"{path}: expected an integer, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        if isinstance(value, float):
            if not value.is_integer():
                raise ConfigError(f"{path}: expected an integer, got {value!r}")
            value = int(value)
        return value
    if target_type is float:
        if isinstance(value, str):
            # YAML 1.1 reads bare scientific notation like 1e-8 as a string.
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{path}: expected a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def build_dataclass(cls, data: dict, path: str = ""):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(f"unknown config key {where!r}")
    kwargs = {}
    for name, f in names.items():
        if name not in data:
            continue
        sub_path = f"{path}.{name}" if path else name
        ftype = f.type if not isinstance(f.type, str) else _resolve_type(f.type)
        kwargs[name] = _coerce(data[name], ftype, sub_path)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def _resolve_type(name: str):
    # `from __future__ import annotations` stringifies field types.
    table = {
        "int": int, "float": float, "bool": bool, "str": str,
        "EnvConfig": EnvConfig, "NetsConfig": NetsConfig, "RGConfig": RGConfig,
        "AugmentBlock": AugmentBlock, "GroundingConfig": GroundingConfig,
        "ReplayConfig": ReplayConfig, "TrainerConfig": TrainerConfig,
        "HindsightConfig": HindsightConfig,
    }
    return table.get(name, object)


def apply_override(data: dict, dotted_key: str, raw_value: str) -> None:
    """Apply one ``a.b.c=value`` override onto a nested config dict."""
    parts = dotted_key.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override through non-mapping key {part!r}")
    node[parts[-1]] = yaml.safe_load(raw_value)


def load_config(path=None, overrides=(), seed=None) -> RunConfig:
    data: dict = {}
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config root must be a mapping, got {type(loaded).__name__}")
        data = loaded
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        apply_override(data, key.strip(), value)
    if seed is not None:
        data["seed"] = seed
    return build_dataclass(RunConfig, data)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def dump_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)


def derive_seed(root_seed: int, name: str) -> int:
    """Deterministic per-module seed fan-out from the run seed."""
    digest = hashlib.blake2s(f"{root_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")
