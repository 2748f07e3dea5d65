"""Experiment configuration and its line-based text format.

Files hold one `key = value` pair per line; `#` starts a comment and
blank lines are ignored.  Unknown keys are rejected.  Serialization uses
repr for floats, so write -> parse -> write is lossless.

Working defaults are desk scale (60 epochs, ramp-up 15) so every run
fits a CPU budget; the full-scale protocol from the source setup is 350
epochs with ramp-up 50 and is documented in the README rather than
encoded here.
"""

import dataclasses
from dataclasses import dataclass

MODES = ("baseline", "adapt", "ablate_ema")
CONSISTENCY_CHOICES = ("mse", "dice", "ce")

# Evaluation thresholds when the config leaves threshold_tau unset: plain
# supervised models binarize at 0.99, adapted/ablation models at 0.9.
BASELINE_TAU = 0.99
ADAPTED_TAU = 0.9


class ConfigError(ValueError):
    """Malformed config text or invalid field value."""


@dataclass
class ExperimentConfig:
    seed: int = 0
    mode: str = "baseline"
    adaptation_domain: int = 4

    depth: int = 3
    base_channels: int = 16
    groups: int = 8
    dropout_rate: float = 0.5

    batch_size: int = 12
    alpha_lr: float = 1e-3
    rampup_epochs: int = 15
    total_epochs: int = 60
    beta1: float = 0.99
    beta2: float = 0.999
    adam_eps: float = 1e-8
    l2_lambda: float = 6e-4

    consistency_loss: str = "mse"
    gamma_max: float = 10.0
    tversky_alpha: float = 0.5
    tversky_beta: float = 0.5
    ema_alpha_early: float = 0.99
    ema_alpha_late: float = 0.999

    threshold_tau: float = None
    eval_batch: int = 24

    subjects_per_domain: int = 20
    slices_per_subject: int = 10
    image_size: int = 32
    repeats: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.adaptation_domain not in (3, 4):
            raise ConfigError(f"adaptation_domain must be 3 or 4, got {self.adaptation_domain}")
        if self.consistency_loss not in CONSISTENCY_CHOICES:
            raise ConfigError(
                f"consistency_loss must be one of {CONSISTENCY_CHOICES}, "
                f"got {self.consistency_loss!r}")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if not 0 < self.rampup_epochs <= self.total_epochs:
            raise ConfigError(
                f"need 0 < rampup_epochs <= total_epochs, got "
                f"{self.rampup_epochs}/{self.total_epochs}")
        if self.threshold_tau is not None and not 0.0 < self.threshold_tau < 1.0:
            raise ConfigError(f"threshold_tau must be in (0, 1), got {self.threshold_tau}")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")

    def resolved_threshold(self):
        if self.threshold_tau is not None:
            return self.threshold_tau
        return BASELINE_TAU if self.mode == "baseline" else ADAPTED_TAU


def _format_value(value):
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(field, text):
    if text == "none":
        return None
    try:
        if field.type in ("int", int):
            return int(text)
        if field.type in ("float", float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {field.name}: {text!r}") from exc
    return text


def config_to_text(cfg):
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}"
             for f in dataclasses.fields(cfg)]
    return "\n".join(lines) + "\n"


def config_from_text(text):
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(fields[key], val)
    return ExperimentConfig(**values)


def load_config(path):
    with open(path) as fh:
        return config_from_text(fh.read())


def save_config(cfg, path):
    with open(path, "w") as fh:
        fh.write(config_to_text(cfg))
