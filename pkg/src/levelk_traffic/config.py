"""Bundled simulation parameters shared by the planners, harness and trainer."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, is_dataclass, replace

from .autonomy import DecisionTreeConfig, StackelbergConfig, TriggerConfig
from .perception import ObservationConfig
from .reward import RewardWeights
from .world import KinematicsConfig, RoadConfig


@dataclass(frozen=True)
class SimConfig:
    road: RoadConfig = field(default_factory=RoadConfig)
    kinematics: KinematicsConfig = field(default_factory=KinematicsConfig)
    observation: ObservationConfig = field(default_factory=ObservationConfig)
    reward: RewardWeights = field(default_factory=RewardWeights)
    stackelberg: StackelbergConfig = field(default_factory=StackelbergConfig)
    decision_tree: DecisionTreeConfig = field(default_factory=DecisionTreeConfig)
    trigger: TriggerConfig = field(default_factory=TriggerConfig)

    def __post_init__(self):
        if self.stackelberg.d_v != self.observation.d_v:
            raise ValueError("stackelberg.d_v must equal observation.d_v")

    def to_dict(self) -> dict:
        return asdict(self)


def config_hash(*configs) -> str:
    """Short stable digest of one or more dataclass configs."""
    payload = [asdict(c) if is_dataclass(c) else c for c in configs]
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# -- run configuration ----------------------------------------------------------

class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


_SIM_SECTIONS = {
    "road": RoadConfig,
    "kinematics": KinematicsConfig,
    "observation": ObservationConfig,
    "reward": RewardWeights,
    "stackelberg": StackelbergConfig,
    "decision_tree": DecisionTreeConfig,
    "trigger": TriggerConfig,
}
# speeds may be given in km/h at the config boundary
_KMH_KEYS = {"v_min_kmh": "v_min", "v_max_kmh": "v_max"}


@dataclass(frozen=True)
class BatchConfig:
    n_c: int = 20
    x0_max: float = 200.0
    t_f: float = 200.0
    controller: str = "decision-tree"
    traffic_mix: tuple = (0.10, 0.60, 0.30)
    episodes: int = 1000
    workers: int = 1

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    training: "object" = None
    batch: BatchConfig = field(default_factory=BatchConfig)
    output_dir: str = "."
    seed: int | None = None

    def to_dict(self) -> dict:
        return {"sim": asdict(self.sim), "training": asdict(self.training),
                "batch": asdict(self.batch), "output_dir": self.output_dir, "seed": self.seed}


def _flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, path + "."))
        else:
            out[path] = value
    return out


def _coerce(value, default):
    if isinstance(default, bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(default, int) and not isinstance(default, bool):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [v for v in value.replace(" ", "").split(",") if v]
        return tuple(float(v) for v in value)
    return value


def _build(cls, values: dict, section: str):
    fields = {f.name: f for f in cls.__dataclass_fields__.values()}
    base = cls()
    kwargs = {}
    for key, value in values.items():
        name = key
        if key in _KMH_KEYS and section == "kinematics":
            name, value = _KMH_KEYS[key], float(value) / 3.6
        if name not in fields:
            raise ConfigError(f"{section}.{key}: unknown field")
        default = getattr(base, name)
        try:
            if default is None:
                kwargs[name] = None if value in ("", "none", "None") else int(value)
            else:
                kwargs[name] = _coerce(value, default)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}.{key}: cannot parse {value!r} ({exc})") from None
    try:
        return cls(**kwargs)
    except ValueError as exc:
        names = [n for n in fields if re.search(rf"\b{n}\b", str(exc))]
        # lead with the fields the caller actually set
        names = sorted(names, key=lambda n: n not in kwargs)
        label = f"{section}.{'/'.join(names)}" if names else section
        raise ConfigError(f"{label}: {exc}") from None


def build_run_config(values: dict | None = None) -> RunConfig:
    """RunConfig from a nested or dotted-key mapping; validates every section."""
    from .learning import TrainingConfig

    flat = _flatten(values or {})
    sections: dict[str, dict] = {}
    top = {}
    for path, value in flat.items():
        head, _, rest = path.partition(".")
        if rest:
            sections.setdefault(head, {})[rest] = value
        else:
            top[head] = value
    known = set(_SIM_SECTIONS) | {"training", "batch"}
    for name in sections:
        if name not in known:
            raise ConfigError(f"{name}: unknown section")
    for name in top:
        if name not in ("output_dir", "seed"):
            raise ConfigError(f"{name}: unknown field")

    parts = {}
    for name, cls in _SIM_SECTIONS.items():
        vals = dict(sections.get(name, {}))
        if name == "decision_tree":
            weights = {k.split(".", 1)[1]: v for k, v in vals.items() if k.startswith("weights.")}
            vals = {k: v for k, v in vals.items() if not k.startswith("weights.")}
            obj = _build(cls, vals, name)
            if weights:
                obj = replace(obj, weights=_build(RewardWeights, weights, "decision_tree.weights"))
            parts[name] = obj
        else:
            parts[name] = _build(cls, vals, name)
    if "d_v" not in sections.get("stackelberg", {}):
        parts["stackelberg"] = replace(parts["stackelberg"], d_v=parts["observation"].d_v)
    try:
        sim = SimConfig(**parts)
    except ValueError as exc:
        raise ConfigError(f"stackelberg.d_v: {exc}") from None
    training = _build(TrainingConfig, sections.get("training", {}), "training")
    batch = _build(BatchConfig, sections.get("batch", {}), "batch")
    mix = batch.traffic_mix
    if len(mix) != 3 or min(mix) < 0 or abs(sum(mix) - 1.0) > 1e-9:
        raise ConfigError("batch.traffic_mix: fractions must be three nonnegative values summing to 1")
    seed = top.get("seed")
    return RunConfig(sim=sim, training=training, batch=batch,
                     output_dir=str(top.get("output_dir", ".")),
                     seed=None if seed is None else int(seed))


def load_config_file(path) -> dict:
    """Parse a TOML config file (dotted keys or sections)."""
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None


def parse_overrides(items) -> dict:
    """``key=value`` strings into a dotted-key mapping."""
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"{item!r}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def merge_dotted(*maps) -> dict:
    merged = {}
    for m in maps:
        merged.update(_flatten(m))
    return merged
