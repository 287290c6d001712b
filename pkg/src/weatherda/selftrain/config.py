"""Training configuration and its ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .scenes import SceneConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 42
    iterations: int = 400
    # source-only steps before adaptation; stands in for a pretrained detector
    pretrain_iterations: int = 0
    batch_size: int = 4  # frames per domain; source:target is 1:1
    optimizer: str = "sgd"  # or "adamw"
    lr: float = 1e-2
    weight_decay: float = 0.01  # adamw only
    lr_schedule: str = "cosine"  # or "constant"
    momentum: float = 0.9
    grad_clip: float = 10.0
    hidden: int = 32
    feature_dim: int = 16
    disc_hidden: int = 64

    alpha_start: float = 0.95
    alpha_end: float = 0.99
    beta: float = 0.9
    gamma: float = 0.5
    lambda_dom: float = 0.1
    lambda_con: float = 0.1
    lambda_box: float = 2.0
    tau: float = 0.07
    ramp_fraction: float = 0.2
    nms_threshold: float = 0.2

    self_training: bool = True
    qddm: bool = True
    target_domains: tuple[str, ...] = ("night", "rain", "haze")
    # weight of the background term on unmatched target queries: "all" (1),
    # "soft" (teacher background prob), "confident" (1 where that prob >= beta,
    # else 0) or "none" (0)
    pseudo_background: str = "soft"
    bev_iou_cost: bool = False
    eval_scenes: int = 200
    # "auto": the teacher when self-training is on (it only exists as part of
    # that component), else the trained detector itself
    eval_model: str = "auto"

    scene: SceneConfig = field(default_factory=SceneConfig)

    def __post_init__(self):
        if isinstance(self.target_domains, str):
            self.target_domains = tuple(s.strip() for s in self.target_domains.split(",") if s.strip())
        self.target_domains = tuple(self.target_domains)
        if self.iterations <= 0:
            raise ConfigError("iterations must be positive")
        if self.pretrain_iterations < 0:
            raise ConfigError("pretrain_iterations must be non-negative")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError("optimizer must be 'adamw' or 'sgd'")
        if self.pseudo_background not in ("all", "soft", "confident", "none"):
            raise ConfigError("pseudo_background must be 'all', 'soft', 'confident' or 'none'")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError("lr_schedule must be 'cosine' or 'constant'")
        if self.eval_model not in ("auto", "teacher", "student"):
            raise ConfigError("eval_model must be 'auto', 'teacher' or 'student'")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def snapshot(self) -> dict:
        d = dataclasses.asdict(self)
        d["target_domains"] = list(self.target_domains)
        d["scene"]["class_freq"] = list(self.scene.class_freq)
        return d


def _coerce(name: str, raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "on", "yes", "1"):
            return True
        if low in ("false", "off", "no", "0"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected a number, got {raw!r}") from None
    if isinstance(default, tuple):
        parts = [p.strip() for p in raw.strip("[]()").split(",") if p.strip()]
        if default and isinstance(default[0], float):
            return tuple(float(p) for p in parts)
        return tuple(p.strip("'\"") for p in parts)
    return raw.strip("'\"")


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return apply_overrides(base or TrainConfig(), pairs)


def apply_overrides(cfg: TrainConfig, pairs: dict[str, str]) -> TrainConfig:
    """Apply string overrides; ``scene.<field>`` keys reach the scene config."""
    top = {f.name: f for f in fields(TrainConfig)}
    scene_fields = {f.name for f in fields(SceneConfig)}
    updates, scene_updates = {}, {}
    for key, raw in pairs.items():
        if key.startswith("scene."):
            sub = key[len("scene."):]
            if sub not in scene_fields:
                raise ConfigError(f"unknown config key {key!r}")
            scene_updates[sub] = _coerce(key, raw, getattr(cfg.scene, sub))
        elif key in top and key != "scene":
            updates[key] = _coerce(key, raw, getattr(cfg, key))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if scene_updates:
        updates["scene"] = dataclasses.replace(cfg.scene, **scene_updates)
    return dataclasses.replace(cfg, **updates)


def load_config(path, overrides: dict[str, str] | None = None) -> TrainConfig:
    cfg = parse_config_text(Path(path).read_text())
    return apply_overrides(cfg, overrides) if overrides else cfg


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        if f.name == "scene":
            continue
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, tuple):
            v = ", ".join(v)
        lines.append(f"{f.name} = {v}")
    for f in fields(SceneConfig):
        v = getattr(cfg.scene, f.name)
        if isinstance(v, tuple):
            v = ", ".join(repr(x) for x in v)
        lines.append(f"scene.{f.name} = {v}")
    return "\n".join(lines) + "\n"
