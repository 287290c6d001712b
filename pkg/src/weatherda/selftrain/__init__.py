from .config import ConfigError, TrainConfig, apply_overrides, dump_config, load_config, parse_config_text
from .detector import ToyDetector, box_to_params, init_detector_params, params_to_box
from .losses import batched_detection_loss, box_iou, detection_loss
from .scenes import NUM_CLASSES, SceneConfig, ToyScene, make_scene, make_toy_dataset
from .trainer import (
    NonFiniteLossError,
    TrainerState,
    ema_update,
    background_weights,
    eval_model_params,
    eval_scenes,
    evaluate_params,
    init_state,
    learning_rate,
    predict,
    pretrain_source,
    run_training,
    sample_batch,
    schedules,
    train_step,
)
from .ablation import ARMS, AblationResult, ablation_config, run_ablation
