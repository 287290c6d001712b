"""Four-arm ablation on the source -> night toy task.

Each seed pretrains one source-only detector and adapts it four times:
neither component, self-training only, QDDM only, both. All arms share the
pretrained weights and the held-out night scenes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .config import TrainConfig
from .trainer import eval_model_params, eval_scenes, evaluate_params, pretrain_source, run_training

ARMS = {
    "baseline": (False, False),
    "self_training": (True, False),
    "qddm": (False, True),
    "both": (True, True),
}

ABLATION_DEFAULTS = dict(iterations=600, pretrain_iterations=1000, target_domains=("night",),
                         eval_scenes=150)


def ablation_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**ABLATION_DEFAULTS, **overrides})


@dataclass
class AblationResult:
    seeds: list[int]
    map: dict[str, list[float]] = field(default_factory=dict)  # arm -> per-seed mAP x 100
    seconds: float = 0.0

    def median(self, arm: str) -> float:
        return float(np.median(self.map[arm]))

    def ordering(self) -> dict[str, bool]:
        m = {a: self.median(a) for a in ARMS}
        return {
            "self_training > baseline": m["self_training"] > m["baseline"],
            "qddm > baseline": m["qddm"] > m["baseline"],
            "both >= max(singles)": m["both"] >= max(m["self_training"], m["qddm"]),
            "both - baseline >= 5": m["both"] - m["baseline"] >= 5.0,
        }

    def table(self) -> str:
        rows = [f"{'arm':<14}{'median':>8}  per-seed ({', '.join(map(str, self.seeds))})"]
        for arm in ARMS:
            per = " ".join(f"{v:5.1f}" for v in self.map[arm])
            rows.append(f"{arm:<14}{self.median(arm):8.1f}  {per}")
        return "\n".join(rows)


def run_ablation(seeds: Iterable[int], base: TrainConfig | None = None, progress=None) -> AblationResult:
    base = base or ablation_config()
    seeds = [int(s) for s in seeds]
    result = AblationResult(seeds, {a: [] for a in ARMS})
    started = time.time()
    for seed in seeds:
        cfg = base.replace(seed=seed)
        init = pretrain_source(cfg)
        scenes = eval_scenes(cfg, cfg.target_domains[0])
        for arm, (st, qd) in ARMS.items():
            arm_cfg = cfg.replace(self_training=st, qddm=qd)
            state, _ = run_training(arm_cfg, init_params=init)
            res = evaluate_params(state.detector, eval_model_params(state), scenes)
            result.map[arm].append(100.0 * res.mAP)
        if progress is not None:
            progress(seed, {a: v[-1] for a, v in result.map.items()})
    result.seconds = time.time() - started
    return result
