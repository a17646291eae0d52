"""Modality-balanced multimodal recommendation lab.

A late-fusion ranking backbone, uni-modal teachers trained by input
ablation, generic+specific distillation re-weighted by counterfactual
modality-effect estimates, top-K evaluation per channel, and diagnostics
that expose the imbalance phenomenon at desk scale.
"""

from .backbone import (
    AdamState,
    BatchMargins,
    Gradients,
    ModelParams,
    adam_step,
    backward,
    forward_batch,
    forward_margins,
    gradient_bridge,
    init_params,
    load_checkpoint,
    save_checkpoint,
    score_full,
    score_masked,
)
from .counterfactual import CausalReport, ate, causal_report, ite, reweight, rho
from .data import (
    InteractionData,
    ModalityFeatures,
    SynthConfig,
    TripleBatch,
    compute_feature_means,
    five_core_filter,
    load_interactions,
    sample_bpr_batch,
    sample_generic_batch,
    split,
    synth_generate,
)
from .diagnostics import BridgeConfig, BridgeResult, PilotTrace, run_bridge_experiment, run_pilot
from .errors import ConfigError, DataError, TrainingDiverged
from .evaluation import MetricsReport, evaluate, ndcg_at_k, precision_at_k, rank_topk, recall_at_k
from .losses import LossConfig, bpr_loss, generic_distill, specific_distill, temp_sigmoid, total_loss
from .trainer import EpochTrace, TrainConfig, TrainResult, early_stop_check, train_student, train_teacher

__version__ = "0.1.0"
