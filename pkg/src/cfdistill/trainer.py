"""Teacher and student training loops.

Teachers are trained per modality with every other modality ablated at the
input. The student trains on the ranking loss plus, per modality, a hinge
loss on training triples against the frozen teacher and a tempered cross
entropy on uniformly sampled item pairs, the two combined per modality and
re-weighted by the counterfactual effect estimates of the current batch.
Early stopping watches validation recall with a fixed patience; the best
checkpoint is the one with the highest validation recall, earliest epoch on
ties.
"""

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import losses
from .backbone import (
    AdamState,
    Gradients,
    ModelParams,
    adam_step,
    backward,
    forward_margins,
    init_params,
    save_checkpoint,
)
from .counterfactual import causal_report, uniform_weights
from .data import InteractionData, sample_bpr_batch, sample_generic_batch
from .errors import ConfigError, TrainingDiverged
from .evaluation import FULL_CHANNEL, METRIC_NAMES, evaluate
from .seeding import substream


@dataclass
class TrainConfig:
    """Hyperparameters of one training run."""

    lr: float = 0.001
    batch_size: int = 1024
    l2_coeff: float = 1e-4
    lambda_g: float = 1.0
    lambda_kd: float = 0.1
    tau: float = 0.1
    dim: int = 64
    max_epochs: int = 200
    patience: int = 10
    eval_k: int = 20
    seed: int = 0
    sd_variant: str = "hinge"
    enable_reweight: bool = True
    enable_generic: bool = True
    log_causal: bool = False

    def validate(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.l2_coeff < 0:
            raise ConfigError(f"l2_coeff must be nonnegative, got {self.l2_coeff}")
        if self.dim < 1 or self.eval_k < 1:
            raise ConfigError("dim and eval_k must be positive")
        losses.LossConfig(self.lambda_g, self.lambda_kd, self.tau, self.sd_variant).validate()

    def hyperparameter_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochTrace:
    """One epoch of logged numbers: mean batch losses, mean weights, metrics."""

    epoch: int
    losses: dict
    lambdas: dict
    val: dict  # channel -> {recall, ndcg, precision}

    def to_json_dict(self) -> dict:
        return {"epoch": self.epoch, "losses": self.losses, "lambdas": self.lambdas, "val": self.val}


@dataclass
class TrainResult:
    params: ModelParams
    best_epoch: int
    traces: list = field(default_factory=list)


def early_stop_check(history, patience: int) -> tuple:
    """(stop, best_epoch): stop once the best epoch is `patience` epochs old.

    The best epoch is the argmax of the history; ties keep the earliest.
    """
    if patience < 1:
        raise ValueError("patience must be >= 1")
    history = list(history)
    if not history:
        return False, -1
    best_epoch = int(np.argmax(history))
    return (len(history) - 1) - best_epoch >= patience, best_epoch


def batches_per_epoch(data: InteractionData, batch_size: int) -> int:
    return max(1, math.ceil(data.n_train_interactions / batch_size))


def l2_penalty(params: ModelParams, coeff: float, users, items, modalities, out: Gradients = None) -> float:
    """coeff * sum of squared entries over the tensors touched by the batch.

    Touched rows of the user/item/preference embeddings plus the full
    projection matrices of the active modalities. Row indices must already
    be deduplicated. If `out` is given, 2 * coeff * theta is accumulated
    into it.
    """
    if coeff < 0:
        raise ConfigError(f"l2 coefficient must be nonnegative, got {coeff}")
    if coeff == 0:
        return 0.0
    value = float(np.sum(params.user_embed[users] ** 2)) + float(np.sum(params.item_embed[items] ** 2))
    for m in modalities:
        value += float(np.sum(params.pref[m][users] ** 2)) + float(np.sum(params.proj[m] ** 2))
    if out is not None:
        out.user_embed[users] += 2.0 * coeff * params.user_embed[users]
        out.item_embed[items] += 2.0 * coeff * params.item_embed[items]
        for m in modalities:
            out.pref[m][users] += 2.0 * coeff * params.pref[m][users]
            out.proj[m] += 2.0 * coeff * params.proj[m]
    return coeff * value


class TraceLogger:
    """Appends one row per epoch to trace.csv and trace.jsonl."""

    def __init__(self, out_dir, modalities, channels):
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.columns = ["epoch", "loss_bpr"]
        for m in modalities:
            self.columns += [f"loss_sd_{m}", f"loss_gd_{m}"]
        self.columns.append("loss_total")
        self.columns += [f"lambda_{m}" for m in modalities]
        for ch in channels:
            self.columns += [f"val_{ch}_{metric}" for metric in METRIC_NAMES]
        self.csv_path = os.path.join(out_dir, "trace.csv")
        self.jsonl_path = os.path.join(out_dir, "trace.jsonl")
        with open(self.csv_path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow(self.columns)
        open(self.jsonl_path, "w", encoding="utf-8").close()

    def append(self, trace: EpochTrace):
        flat = {"epoch": trace.epoch}
        for key, value in trace.losses.items():
            flat[f"loss_{key}".replace(":", "_")] = repr(value)
        for m, value in trace.lambdas.items():
            flat[f"lambda_{m}"] = repr(value)
        for ch, metrics in trace.val.items():
            for metric, value in metrics.items():
                flat[f"val_{ch}_{metric}"] = repr(value)
        with open(self.csv_path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow([flat.get(c, "") for c in self.columns])
        with open(self.jsonl_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(trace.to_json_dict(), sort_keys=True) + "\n")


def _touched_indices(*batches):
    users = np.unique(np.concatenate([b.users for b in batches]))
    items = np.unique(np.concatenate([np.concatenate([b.items_i, b.items_j]) for b in batches]))
    return users, items


def _val_metrics(params, features, data, config, channels) -> dict:
    report = evaluate(params, features, data, "val", k=config.eval_k, channels=channels)
    return {ch: report.per_channel[ch].as_dict() for ch in channels}


def train_teacher(
    data: InteractionData,
    features: dict,
    modality: str,
    config: TrainConfig,
    out_dir=None,
) -> TrainResult:
    """Train a uni-modal teacher: all other modalities ablated at the input."""
    config.validate()
    if modality not in features:
        raise ConfigError(f"no features for modality '{modality}'")
    feature_dims = {m: f.dim for m, f in features.items()}
    params = init_params(data.n_users, data.n_items, config.dim, feature_dims, config.seed)
    state = AdamState.init(params)
    rng = substream(config.seed, "sampling")
    keep = frozenset({modality})
    n_batches = batches_per_epoch(data, config.batch_size)
    channels = [modality]
    logger = TraceLogger(out_dir, modalities=[], channels=channels) if out_dir else None
    meta = {"kind": "teacher", "modality": modality, "seed": config.seed,
            "hyperparameters": config.hyperparameter_dict()}

    history, traces = [], []
    best_params = params.copy()
    for epoch in range(config.max_epochs):
        bpr_sum = total_sum = 0.0
        for b in range(n_batches):
            batch = sample_bpr_batch(data, config.batch_size, rng)
            margins = forward_margins(params, features, batch, keep)
            bpr_value, dmargin = losses.bpr_loss(margins)
            grads = backward(params, features, batch, [(keep, dmargin)])
            users, items = _touched_indices(batch)
            l2_value = l2_penalty(params, config.l2_coeff, users, items, [modality], out=grads)
            total = bpr_value + l2_value
            if not np.isfinite(total):
                raise TrainingDiverged(f"teacher '{modality}' loss diverged at epoch {epoch} batch {b}")
            adam_step(params, grads, state, config.lr)
            bpr_sum += bpr_value
            total_sum += total
        val = _val_metrics(params, features, data, config, channels)
        recall = val[modality]["recall"]
        improved = not history or recall > max(history)
        history.append(recall)
        trace = EpochTrace(
            epoch=epoch,
            losses={"bpr": bpr_sum / n_batches, "total": total_sum / n_batches},
            lambdas={},
            val=val,
        )
        traces.append(trace)
        if logger:
            logger.append(trace)
        if improved:
            best_params = params.copy()
            if out_dir:
                save_checkpoint(os.path.join(out_dir, f"teacher_{modality}.ckpt"), best_params, meta)
        stop, best_epoch = early_stop_check(history, config.patience)
        if stop:
            break
    return TrainResult(params=best_params, best_epoch=best_epoch, traces=traces)


def train_student(
    data: InteractionData,
    features: dict,
    teachers: dict,
    config: TrainConfig,
    out_dir=None,
) -> TrainResult:
    """Train the multimodal student.

    With lambda_kd == 0 every distillation step is skipped and the loop is a
    plain ranking-loss run; supplying teachers then changes nothing, so the
    baseline is the same code path, not a separate one. Disabling the
    generic loss or the re-weighting degenerates the objective the same way.
    """
    config.validate()
    mods = sorted(features)
    distill = config.lambda_kd > 0
    if distill:
        for m in mods:
            if m not in (teachers or {}):
                raise ConfigError(f"missing teacher for modality '{m}'")
        if config.enable_reweight and len(mods) < 2:
            raise ConfigError("re-weighting needs at least two modalities; pass enable_reweight=False")
    use_generic = distill and config.enable_generic
    sd_fn = losses.specific_variant(config.sd_variant)

    feature_dims = {m: f.dim for m, f in features.items()}
    params = init_params(data.n_users, data.n_items, config.dim, feature_dims, config.seed)
    state = AdamState.init(params)
    rng = substream(config.seed, "sampling")
    n_batches = batches_per_epoch(data, config.batch_size)
    channels = [FULL_CHANNEL] + mods
    logger = TraceLogger(out_dir, modalities=mods, channels=channels) if out_dir else None
    causal_fh = None
    if out_dir and config.log_causal:
        causal_fh = open(os.path.join(out_dir, "causal.jsonl"), "w", encoding="utf-8")
    meta = {"kind": "student", "seed": config.seed, "hyperparameters": config.hyperparameter_dict()}

    history, traces = [], []
    best_params = params.copy()
    teacher_snapshot = {m: teachers[m] for m in mods} if distill else {}
    try:
        for epoch in range(config.max_epochs):
            loss_sums = {"bpr": 0.0, "total": 0.0}
            for m in mods:
                loss_sums[f"sd:{m}"] = 0.0
                loss_sums[f"gd:{m}"] = 0.0
            lambda_sums = dict.fromkeys(mods, 0.0)
            for b in range(n_batches):
                batch = sample_bpr_batch(data, config.batch_size, rng)
                gbatch = sample_generic_batch(data, config.batch_size, rng) if use_generic else None
                margins_full = forward_margins(params, features, batch, None)
                bpr_value, g_bpr = losses.bpr_loss(margins_full)
                passes = [(None, g_bpr)]
                generic_passes = []
                modality_losses = dict.fromkeys(mods, 0.0)
                weights = {}
                if distill:
                    student_sd, teacher_sd = {}, {}
                    sd_vals, sd_grads = {}, {}
                    for m in mods:
                        student_sd[m] = forward_margins(params, features, batch, {m})
                        teacher_sd[m] = forward_margins(teacher_snapshot[m], features, batch, {m})
                        sd_vals[m], sd_grads[m] = sd_fn(teacher_sd[m], student_sd[m], config.tau)
                    if config.enable_reweight:
                        without = {
                            m: forward_margins(params, features, batch, set(mods) - {m}) for m in mods
                        }
                        report = causal_report(margins_full, without, teacher_sd)
                        weights = report.lambda_weights
                        if causal_fh:
                            record = {"epoch": epoch, "batch": b}
                            record.update(report.to_json_dict())
                            causal_fh.write(json.dumps(record, sort_keys=True) + "\n")
                    else:
                        weights = uniform_weights(mods) if len(mods) > 1 else {m: 1.0 for m in mods}
                    gd_vals, gd_grads = {}, {}
                    if use_generic:
                        for m in mods:
                            gs = forward_margins(params, features, gbatch, {m})
                            gt = forward_margins(teacher_snapshot[m], features, gbatch, {m})
                            gd_vals[m], gd_grads[m] = losses.generic_distill(gt, gs, config.tau)
                    for m in mods:
                        gd = gd_vals.get(m, 0.0)
                        modality_losses[m] = losses.modality_loss(
                            sd_vals[m], gd, config.lambda_g if use_generic else 0.0
                        )
                        scale = config.lambda_kd * weights[m]
                        passes.append(({m}, scale * sd_grads[m]))
                        if use_generic:
                            generic_passes.append(({m}, scale * config.lambda_g * gd_grads[m]))
                        loss_sums[f"sd:{m}"] += sd_vals[m]
                        loss_sums[f"gd:{m}"] += gd
                        lambda_sums[m] += weights[m]
                grads = backward(params, features, batch, passes)
                if generic_passes:
                    backward(params, features, gbatch, generic_passes, out=grads)
                touched = (batch, gbatch) if gbatch is not None else (batch,)
                users, items = _touched_indices(*touched)
                l2_value = l2_penalty(params, config.l2_coeff, users, items, mods, out=grads)
                total = losses.total_loss(bpr_value, modality_losses, weights, config.lambda_kd) if distill \
                    else bpr_value
                total += l2_value
                if not np.isfinite(total):
                    raise TrainingDiverged(f"student loss diverged at epoch {epoch} batch {b}")
                adam_step(params, grads, state, config.lr)
                loss_sums["bpr"] += bpr_value
                loss_sums["total"] += total
            val = _val_metrics(params, features, data, config, channels)
            recall = val[FULL_CHANNEL]["recall"]
            improved = not history or recall > max(history)
            history.append(recall)
            trace = EpochTrace(
                epoch=epoch,
                losses={k: v / n_batches for k, v in loss_sums.items()},
                lambdas={m: lambda_sums[m] / n_batches if distill else 0.0 for m in mods},
                val=val,
            )
            traces.append(trace)
            if logger:
                logger.append(trace)
            if improved:
                best_params = params.copy()
                if out_dir:
                    save_checkpoint(os.path.join(out_dir, "student.ckpt"), best_params, meta)
            stop, best_epoch = early_stop_check(history, config.patience)
            if stop:
                break
    finally:
        if causal_fh:
            causal_fh.close()
    return TrainResult(params=best_params, best_epoch=best_epoch, traces=traces)


def derive_config(config: TrainConfig, **overrides) -> TrainConfig:
    """Copy of a config with some fields replaced."""
    return replace(config, **overrides)
