"""Teacher-student domain-adaptive training loop.

Per iteration: the teacher labels the target batch without recording a
graph, pseudo labels are filtered by NMS and the confidence threshold, the
student is trained on source labels, pseudo labels and the QDDM losses,
the class memory absorbs the batch centers, and finally the teacher moves
towards the student by EMA.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .. import grad as G
from ..core import DomainTag
from ..evalkit import EvalResult, evaluate
from ..geometry import iou_3d, iou_bev
from ..matching import filter_pseudo_labels
from ..qddm import (
    ClassCenters,
    DomainDiscriminator,
    GlobalClassMemory,
    class_centers,
    contrastive_loss,
    domain_adversarial_loss,
    memory_update,
)
from .config import TrainConfig
from .detector import ToyDetector, init_detector_params
from .losses import batched_detection_loss
from .scenes import NUM_CLASSES, ToyScene, make_scene

log = logging.getLogger(__name__)

# scene-id ranges keep the labelled, unlabelled and held-out pools disjoint
SOURCE_POOL = 0
TARGET_POOL = 10_000_000
EVAL_POOL = 20_000_000


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


def ema_update(teacher: Mapping[str, np.ndarray], student: Mapping[str, np.ndarray],
               alpha: float) -> dict[str, np.ndarray]:
    """teacher <- alpha * teacher + (1 - alpha) * student, elementwise."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    out = {}
    for k, t in teacher.items():
        s = np.asarray(getattr(student[k], "value", student[k]))
        if s.shape != t.shape:
            raise ValueError(f"{k}: teacher shape {t.shape} != student shape {s.shape}")
        mixed = alpha * t + (1.0 - alpha) * s
        # pin rounding inside the segment [t, s]
        out[k] = np.clip(mixed, np.minimum(t, s), np.maximum(t, s))
    return out


def schedules(t: float, T: float, lambda_dom: float = 0.1, lambda_con: float = 0.1,
              alpha_start: float = 0.95, alpha_end: float = 0.99,
              ramp_fraction: float = 0.2) -> tuple[float, float, float]:
    """Linear ramp of both loss weights and the EMA coefficient over the first
    ``ramp_fraction`` of training; constant afterwards."""
    if T <= 0:
        raise ValueError("T must be positive")
    if not 0 <= t <= T:
        raise ValueError("t must lie in [0, T]")
    r = min(1.0, t / (ramp_fraction * T)) if ramp_fraction > 0 else 1.0
    alpha = (1.0 - r) * alpha_start + r * alpha_end
    return lambda_dom * r, lambda_con * r, alpha


@dataclass
class TrainerState:
    config: TrainConfig
    detector: ToyDetector
    student: dict[str, G.Node]
    teacher: dict[str, np.ndarray]
    disc: DomainDiscriminator
    memory: GlobalClassMemory
    rng: np.random.Generator
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @property
    def T(self) -> int:
        return self.config.iterations

    def trainable(self) -> dict[str, G.Node]:
        return {**self.student, **self.disc.params}

    def student_values(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.student.items()}


def init_state(cfg: TrainConfig, init_params: Mapping[str, np.ndarray] | None = None) -> TrainerState:
    """Fresh trainer state. The student starts from ``init_params`` if given,
    else from source pretraining when configured, else from random weights;
    the teacher is a copy of the student."""
    rng = np.random.default_rng(cfg.seed)
    det = ToyDetector(cfg.scene)
    init = init_detector_params(rng, cfg.hidden, cfg.feature_dim, det.num_queries)
    if init_params is None and cfg.pretrain_iterations > 0:
        init_params = pretrain_source(cfg)
    if init_params is not None:
        init = {k: np.array(init_params[k], dtype=np.float64) for k in init}
    student = {k: G.parameter(v, k) for k, v in init.items()}
    teacher = {k: v.copy() for k, v in init.items()}
    disc = DomainDiscriminator.init(cfg.feature_dim, cfg.disc_hidden, rng)
    memory = GlobalClassMemory.empty(NUM_CLASSES, cfg.feature_dim)
    return TrainerState(cfg, det, student, teacher, disc, memory, rng)


def _frames(n: int, q: int) -> list[slice]:
    return [slice(i * q, (i + 1) * q) for i in range(n)]


def teacher_pseudo_labels(state: TrainerState, scenes: Sequence[ToyScene]) -> tuple[list[list], np.ndarray]:
    """Filtered teacher labels per frame, plus the teacher's per-query
    background probability."""
    cfg = state.config
    iou_fn = iou_bev if cfg.bev_iou_cost else iou_3d
    with G.no_grad():
        out = state.detector.forward(state.teacher, scenes)
    labels = []
    for i in range(len(scenes)):
        dets = out.frame(i).detections()
        labels.append(filter_pseudo_labels(dets, cfg.beta, cfg.nms_threshold, iou_fn))
    probs = G.softmax(out.logits).value if len(scenes) else np.zeros((0, 1))
    return labels, probs[:, -1]


def train_step(state: TrainerState, src_frames: Sequence[ToyScene],
               tgt_frames: Sequence[ToyScene]) -> tuple[TrainerState, dict]:
    cfg = state.config
    lam_dom, lam_con, alpha = schedules(state.t, state.T, cfg.lambda_dom, cfg.lambda_con,
                                        cfg.alpha_start, cfg.alpha_end, cfg.ramp_fraction)
    use_tgt = bool(tgt_frames) and (cfg.self_training or cfg.qddm)
    metrics: dict = {"iteration": state.t, "lambda_dom": lam_dom, "lambda_con": lam_con,
                     "alpha": alpha}

    pseudo, p_bg = ([], None)
    try:
        if use_tgt and cfg.self_training:
            pseudo, p_bg = teacher_pseudo_labels(state, tgt_frames)
        obj = compute_objective(state, state.student, src_frames, tgt_frames if use_tgt else [],
                                pseudo, p_bg, lam_dom, lam_con)
    except (ValueError, FloatingPointError) as exc:
        # non-finite outputs trip the value-type validators before any loss exists
        if _outputs_finite(state, list(src_frames) + list(tgt_frames)):
            raise
        raise NonFiniteLossError(f"non-finite values at iteration {state.t}: {exc}",
                                 _dump(state, metrics)) from exc
    metrics["n_pseudo"] = sum(len(p) for p in pseudo)
    total, parts, centers = obj.total, obj.parts, obj.centers
    metrics.update(obj.metrics)
    for k, v in parts.items():
        metrics[k] = float(v.value)
    metrics["loss_total"] = float(total.value)
    if not np.isfinite(metrics["loss_total"]):
        raise NonFiniteLossError(f"non-finite loss at iteration {state.t}", _dump(state, metrics))

    params = state.trainable()
    for p in params.values():
        p.zero_grad()
    if total.requires_grad:
        total.backward()
    _step(state, params, cfg)

    for cc in centers:
        state.memory = memory_update(state.memory, cc)
    for w, cc in zip(("src", "tgt"), centers):
        for k in range(NUM_CLASSES):
            metrics[f"n_{w}_{k}"] = cc.counts.get(k, 0)
    for k in range(NUM_CLASSES):
        metrics[f"S_{k}"] = int(state.memory.counts[k])

    state.teacher = ema_update(state.teacher, state.student, alpha)
    state.t += 1
    return state, metrics


def _outputs_finite(state: TrainerState, scenes: Sequence[ToyScene]) -> bool:
    """Whether student and teacher produce finite logits and boxes on ``scenes``."""
    with G.no_grad(), np.errstate(all="ignore"):
        for params in (state.student, state.teacher):
            out = state.detector.forward(params, scenes)
            if not (np.all(np.isfinite(out.logits.value)) and np.all(np.isfinite(out.box_params.value))):
                return False
    return True


def _dump(state: TrainerState, metrics: dict) -> dict:
    return {"iteration": state.t, "metrics": metrics, "student": state.student_values(),
            "teacher": {k: v.copy() for k, v in state.teacher.items()},
            "memory": {"prototypes": state.memory.prototypes.copy(),
                       "counts": state.memory.counts.copy()}}


@dataclass
class Objective:
    total: G.Node
    parts: dict[str, G.Node]  # loss_gt, loss_pseudo, loss_dom, loss_con (weighted)
    centers: list[ClassCenters]
    metrics: dict


def compute_objective(state: TrainerState, student: Mapping, src_frames: Sequence[ToyScene],
                      tgt_frames: Sequence[ToyScene], pseudo: Sequence, p_bg: np.ndarray | None,
                      lam_dom: float, lam_con: float) -> Objective:
    """L_gt + L_pseudo + lam_dom L_dom + lam_con L_con for one batch."""
    cfg = state.config
    q = state.detector.num_queries
    src_out = state.detector.forward(student, src_frames)
    gt = batched_detection_loss(src_out.logits, src_out.box_params, src_out.boxes(),
                                _frames(len(src_frames), q), [s.labels for s in src_frames],
                                cfg.lambda_box)
    loss_gt = gt.total * (1.0 / max(1, len(src_frames)))

    tgt_out = state.detector.forward(student, tgt_frames) if tgt_frames else None
    loss_pseudo = G.Node(0.0)
    if tgt_out is not None and cfg.self_training:
        ps = batched_detection_loss(tgt_out.logits, tgt_out.box_params, tgt_out.boxes(),
                                    _frames(len(tgt_frames), q), pseudo, cfg.lambda_box,
                                    cls_weight=background_weights(cfg, p_bg))
        loss_pseudo = ps.total * (1.0 / len(tgt_frames))

    metrics = {}
    loss_dom = G.Node(0.0)
    loss_con = G.Node(0.0)
    centers: list[ClassCenters] = []
    if cfg.qddm:
        centers.append(class_centers(src_out.query_batch(DomainTag.SOURCE), cfg.gamma))
        if tgt_out is not None:
            centers.append(class_centers(tgt_out.query_batch(tgt_frames[0].domain), cfg.gamma))
        tgt_c = centers[1] if len(centers) > 1 else ClassCenters(DomainTag.NIGHT)
        adv = domain_adversarial_loss(centers[0], tgt_c, state.disc)
        con = contrastive_loss(centers, state.memory, cfg.tau)
        loss_dom, loss_con = adv.value, con.value
        metrics["contrast_skipped"] = len(con.skipped)
    metrics["loss_dom_raw"] = float(loss_dom.value)
    metrics["loss_con_raw"] = float(loss_con.value)

    parts = {"loss_gt": loss_gt, "loss_pseudo": loss_pseudo,
             "loss_dom": loss_dom * lam_dom, "loss_con": loss_con * lam_con}
    total = parts["loss_gt"] + parts["loss_pseudo"] + parts["loss_dom"] + parts["loss_con"]
    return Objective(total, parts, centers, metrics)


def background_weights(cfg: TrainConfig, p_bg: np.ndarray) -> np.ndarray | None:
    """Per-query weight of the background term for unmatched target queries."""
    mode = cfg.pseudo_background
    if mode == "all":
        return None
    if mode == "soft":
        return p_bg
    if mode == "confident":
        return (p_bg >= cfg.beta).astype(np.float64)
    return np.zeros_like(p_bg)


ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def learning_rate(cfg: TrainConfig, t: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + np.cos(np.pi * min(t, cfg.iterations) / cfg.iterations))


def _step(state: TrainerState, params: dict[str, G.Node], cfg: TrainConfig) -> None:
    """Clip by global norm, then AdamW (decoupled weight decay) or SGD with momentum."""
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.value)) for k, p in params.items()}
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    scale = cfg.grad_clip / norm if (cfg.grad_clip > 0 and norm > cfg.grad_clip) else 1.0
    b1, b2 = ADAM_BETAS
    n = state.t + 1
    lr = learning_rate(cfg, state.t)
    for k, p in params.items():
        g = grads[k] * scale
        m = state.velocity.get(k)
        if cfg.optimizer == "sgd":
            m = g if m is None else cfg.momentum * m + g
            state.velocity[k] = m
            p.value = p.value - lr * m
            continue
        v = state.second_moment.get(k)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.velocity[k], state.second_moment[k] = m, v
        update = (m / (1 - b1 ** n)) / (np.sqrt(v / (1 - b2 ** n)) + ADAM_EPS)
        p.value = p.value * (1.0 - lr * cfg.weight_decay) - lr * update


def sample_batch(state: TrainerState) -> tuple[list[ToyScene], list[ToyScene]]:
    """Fresh source and target scenes; the target batch shares one random condition."""
    cfg = state.config
    b = cfg.batch_size
    base = state.t * b
    src = [make_scene(SOURCE_POOL + base + i, DomainTag.SOURCE, cfg.seed, cfg.scene) for i in range(b)]
    domain = DomainTag.parse(cfg.target_domains[int(state.rng.integers(len(cfg.target_domains)))])
    if not (cfg.self_training or cfg.qddm):
        return src, []
    tgt = [make_scene(TARGET_POOL + base + i, domain, cfg.seed, cfg.scene) for i in range(b)]
    return src, tgt


def predict(detector: ToyDetector, params: Mapping, scenes: Sequence[ToyScene]):
    with G.no_grad():
        out = detector.forward(params, scenes)
    return [out.frame(i).detections() for i in range(len(scenes))]


def evaluate_params(detector: ToyDetector, params: Mapping, scenes: Sequence[ToyScene]) -> EvalResult:
    preds = predict(detector, params, scenes)
    return evaluate([(p, s.labels) for p, s in zip(preds, scenes)], NUM_CLASSES)


def eval_scenes(cfg: TrainConfig, domain: DomainTag | str) -> list[ToyScene]:
    return [make_scene(EVAL_POOL + i, domain, cfg.seed, cfg.scene) for i in range(cfg.eval_scenes)]


def pretrain_source(cfg: TrainConfig) -> dict[str, np.ndarray]:
    """Source-only supervised training for ``cfg.pretrain_iterations`` steps.

    The learning rate is annealed to zero so the last iterate is converged.
    """
    base = cfg.replace(iterations=cfg.pretrain_iterations, pretrain_iterations=0,
                       self_training=False, qddm=False, lr_schedule="cosine")
    state, _ = run_training(base)
    return state.student_values()


def run_training(cfg: TrainConfig, callback=None,
                 init_params: Mapping[str, np.ndarray] | None = None) -> tuple[TrainerState, list[dict]]:
    state = init_state(cfg, init_params)
    history = []
    for _ in range(cfg.iterations):
        src, tgt = sample_batch(state)
        state, m = train_step(state, src, tgt)
        history.append(m)
        if callback is not None:
            callback(state, m)
    return state, history


def eval_model_params(state: TrainerState) -> dict:
    cfg = state.config
    if cfg.eval_model == "teacher" or (cfg.eval_model == "auto" and cfg.self_training):
        return state.teacher
    return state.student_values()
