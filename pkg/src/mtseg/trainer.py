"""Mean-teacher training engine.

The student is trained by gradient descent; the teacher is an exponential
moving average of student weights, updated once per optimizer step right
after the step, and never receives gradients.  Adaptation batches are
half labeled source slices, half unlabeled target slices.  Each slice
gets its own spatial transform: the student sees transformed inputs,
while teacher predictions on clean inputs are transformed afterwards so
the consistency loss compares aligned maps.  An ablation run is an
adaptation run with the consistency weight pinned to zero, which leaves
the teacher a pure weight average.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .augment import apply_transform, sample_transform
from .config import ExperimentConfig
from .data import (DataError, batch_images, batch_masks, labeled_batches,
                   mixed_batches)
from .losses import LossKind, combined_objective, dice_loss
from .metrics import aggregate, evaluate_batch
from .optim import (ScheduleConfig, adam_step, clone_adam,
                    consistency_weight_at_epoch, init_adam, lr_at_epoch)
from .rng import stream
from .tensor import Tensor
from .unet import UNetConfig, build, forward

EPOCH_LOG_COLUMNS = ("epoch", "task_loss", "consistency_loss", "lr", "gamma",
                     "val_dice", "val_miou", "val_precision", "val_recall",
                     "val_specificity", "val_hausdorff")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, step, task, consistency):
        super().__init__(
            f"non-finite loss at epoch {epoch} step {step}: "
            f"task={task} consistency={consistency}")
        self.epoch = epoch
        self.step = step


def ema_update(teacher, student, alpha):
    """teacher <- alpha * teacher + (1 - alpha) * student, in place.
    alpha=0 copies the student exactly; alpha=1 freezes the teacher."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"ema_update: alpha must be in [0, 1], got {alpha}")
    t_names, s_names = teacher.names(), student.names()
    if t_names != s_names:
        raise ValueError("ema_update: teacher/student parameter names differ")
    for name in t_names:
        ema_update_array(teacher[name].data, student[name].data, alpha)


def ema_update_array(avg, new, alpha):
    """In-place EMA on raw arrays; also serves averaged-prediction use."""
    if avg.shape != new.shape:
        raise ValueError(f"ema_update_array: shapes {avg.shape} vs {new.shape}")
    avg *= alpha
    avg += (1.0 - alpha) * new


def ema_alpha_schedule(epoch, rampup_epochs, early=0.99, late=0.999):
    """Shorter teacher memory during ramp-up, longer afterwards."""
    return early if epoch < rampup_epochs else late


@dataclass
class StepReport:
    task_loss: float
    consistency_loss: float
    total_loss: float
    lr: float
    gamma: float
    ema_alpha: float


@dataclass
class TrainState:
    student: object
    teacher: object
    adam: object
    epoch: int = 0
    step: int = 0
    global_step: int = 0


@dataclass
class TrainResult:
    state: TrainState
    log_rows: list
    best_student: object
    best_teacher: object
    best_adam: object
    best_epoch: int
    best_global_step: int
    best_val_dice: float
    diverged: bool
    effective_config: ExperimentConfig


def effective_config(cfg):
    """Normalize the run mode: an EMA ablation is exactly an adaptation
    run with gamma pinned to zero, so both produce identical outputs."""
    if cfg.mode == "ablate_ema":
        return replace(cfg, mode="adapt", gamma_max=0.0)
    return cfg


def model_config(cfg):
    return UNetConfig(depth=cfg.depth, base_channels=cfg.base_channels,
                      groups=cfg.groups, dropout_rate=cfg.dropout_rate)


def schedule_config(cfg):
    return ScheduleConfig(alpha_lr=cfg.alpha_lr, rampup_epochs=cfg.rampup_epochs,
                          total_epochs=cfg.total_epochs, gamma_max=cfg.gamma_max)


def init_state(cfg):
    student = build(model_config(cfg), cfg.seed)
    teacher = student.clone(requires_grad=False)
    adam = init_adam(student, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.l2_lambda)
    return TrainState(student=student, teacher=teacher, adam=adam)


def _augment_samples(samples, rng, with_masks, draw_offset=0):
    specs = [sample_transform(rng, draw_id=draw_offset + i) for i in range(len(samples))]
    imgs = np.stack([apply_transform(spec, s.image, "bilinear")
                     for spec, s in zip(specs, samples)])
    masks = None
    if with_masks:
        masks = np.stack([apply_transform(spec, s.mask, "nearest")
                          for spec, s in zip(specs, samples)])
    return specs, imgs.astype(np.float32), masks


def train_step(state, batch, cfg, sched):
    """One optimizer step on one batch.  For baseline runs the batch is a
    list of labeled samples; otherwise it is (source, target)."""
    epoch, step = state.epoch, state.step
    lr = lr_at_epoch(epoch, sched)
    aug_rng = stream(cfg.seed, "augment", epoch, step)
    drop_rng = stream(cfg.seed, "dropout", epoch, step)
    alpha = ema_alpha_schedule(epoch, sched.rampup_epochs,
                               cfg.ema_alpha_early, cfg.ema_alpha_late)

    if cfg.mode == "baseline":
        _, imgs, masks = _augment_samples(batch, aug_rng, with_masks=True)
        probs, _ = forward(state.student, Tensor(imgs), training=True, drop_rng=drop_rng)
        task = dice_loss(probs, Tensor(masks))
        gamma = 0.0
        consistency_value = 0.0
        total = task
    else:
        source, target = batch
        n_src = len(source)
        _, src_imgs, src_masks = _augment_samples(source, aug_rng, with_masks=True)
        tgt_specs, tgt_imgs, _ = _augment_samples(target, aug_rng, with_masks=False,
                                                  draw_offset=n_src)
        student_in = Tensor(np.concatenate([src_imgs, tgt_imgs]))
        probs, _ = forward(state.student, student_in, training=True, drop_rng=drop_rng)
        probs_src = T.slice_rows(probs, 0, n_src)
        probs_tgt = T.slice_rows(probs, n_src, n_src + len(target))
        task = dice_loss(probs_src, Tensor(src_masks))

        with T.no_grad():
            teacher_probs, _ = forward(state.teacher, Tensor(batch_images(target)),
                                       training=False)
        aligned = np.stack([apply_transform(spec, teacher_probs.data[i], "bilinear")
                            for i, spec in enumerate(tgt_specs)])
        gamma = consistency_weight_at_epoch(epoch, sched)
        loss_kind = LossKind(cfg.consistency_loss, cfg.tversky_alpha, cfg.tversky_beta)
        consistency = loss_kind(probs_tgt, Tensor(aligned.astype(np.float32)))
        consistency_value = consistency.item()
        if not (math.isfinite(task.item()) and math.isfinite(consistency_value)):
            raise TrainingDiverged(epoch, step, task.item(), consistency_value)
        total = combined_objective(task, consistency, gamma)

    task_value = task.item()
    if not math.isfinite(task_value) or not math.isfinite(total.item()):
        raise TrainingDiverged(epoch, step, task_value, consistency_value)

    state.student.zero_grads()
    total.backward()
    adam_step(state.student, state.adam, lr)
    ema_update(state.teacher, state.student, alpha)
    state.step += 1
    state.global_step += 1
    return StepReport(task_loss=task_value, consistency_loss=consistency_value,
                      total_loss=total.item(), lr=lr, gamma=gamma, ema_alpha=alpha)


def predict_probs(params, samples, eval_batch=24):
    """Eval-mode probability maps [N,1,H,W] for a list of samples."""
    outs = []
    for i in range(0, len(samples), eval_batch):
        chunk = samples[i:i + eval_batch]
        with T.no_grad():
            probs, _ = forward(params, Tensor(batch_images(chunk)), training=False)
        outs.append(probs.data)
    return np.concatenate(outs)


def evaluate_params(params, samples, tau, eval_batch=24):
    if not samples:
        raise DataError("evaluate_params: empty sample list")
    probs = predict_probs(params, samples, eval_batch)
    return aggregate(evaluate_batch(probs, batch_masks(samples), tau))


def _target_pool(split, cfg):
    if cfg.adaptation_domain == 4:
        return split.target_unlabeled
    return [replace(s, mask=None) for s in split.validation]


def train_loop(split, cfg):
    """Full training run: per-epoch batch iteration, per-epoch validation
    of the consumed model (teacher for adaptation, student for baseline),
    CSV-ready log rows, and best-validation snapshots.  Divergence stops
    training but preserves the log."""
    cfg = effective_config(cfg)
    sched = schedule_config(cfg)
    state = init_state(cfg)
    target = _target_pool(split, cfg) if cfg.mode == "adapt" else None
    tau = cfg.resolved_threshold()

    log_rows = []
    best = None
    best_dice = -math.inf
    diverged = False
    for epoch in range(cfg.total_epochs):
        state.epoch = epoch
        state.step = 0
        if cfg.mode == "baseline":
            batches = labeled_batches(split.train_labeled, cfg.batch_size, cfg.seed, epoch)
        else:
            batches = mixed_batches(split.train_labeled, target, cfg.batch_size,
                                    cfg.seed, epoch)
        task_sum = 0.0
        cons_sum = 0.0
        lr = gamma = 0.0
        try:
            for batch in batches:
                report = train_step(state, batch, cfg, sched)
                task_sum += report.task_loss
                cons_sum += report.consistency_loss
                lr, gamma = report.lr, report.gamma
        except TrainingDiverged:
            diverged = True

        eval_params = state.teacher if cfg.mode == "adapt" else state.student
        record = evaluate_params(eval_params, split.validation, tau, cfg.eval_batch)
        log_rows.append({
            "epoch": epoch,
            "task_loss": task_sum / len(batches),
            "consistency_loss": cons_sum / len(batches),
            "lr": lr,
            "gamma": gamma,
            "val_dice": record.dice,
            "val_miou": record.miou,
            "val_precision": record.precision,
            "val_recall": record.recall,
            "val_specificity": record.specificity,
            "val_hausdorff": record.hausdorff,
        })
        if record.dice > best_dice:
            best_dice = record.dice
            best = (state.student.clone(), state.teacher.clone(),
                    clone_adam(state.adam), epoch, state.global_step)
        if diverged:
            break

    return TrainResult(state=state, log_rows=log_rows,
                       best_student=best[0], best_teacher=best[1],
                       best_adam=best[2], best_epoch=best[3],
                       best_global_step=best[4], best_val_dice=best_dice,
                       diverged=diverged, effective_config=cfg)
