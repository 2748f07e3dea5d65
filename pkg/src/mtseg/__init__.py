"""Mean-teacher self-ensembling for unsupervised domain adaptation of
2-D binary segmentation, built on a small numpy reverse-mode autodiff
engine."""

from .augment import TransformSpec, align_pair, apply_transform, sample_transform
from .config import ExperimentConfig, config_from_text, config_to_text
from .data import DataSplit, DomainSpec, SliceSample, generate_corpus, make_split
from .losses import (ce_consistency, combined_objective, dice_loss,
                     mse_consistency, score_orientation_probe, tversky_loss)
from .metrics import (MetricsRecord, aggregate, confusion_metrics, hausdorff,
                      threshold_predictions)
from .optim import (AdamState, ScheduleConfig, adam_step,
                    consistency_weight_at_epoch, init_adam, lr_at_epoch)
from .tensor import Tensor, grad_check, no_grad
from .trainer import (TrainResult, TrainState, ema_alpha_schedule, ema_update,
                      train_loop, train_step)
from .unet import ModelParams, UNetConfig, build, export_features, forward

__version__ = "0.1.0"
