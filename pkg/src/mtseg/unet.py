"""Small U-Net for binary segmentation of single-channel slices.

Each encoder/decoder block is two 3x3 convolutions, each followed by
group norm and ReLU.  Downsampling is 2x2 max pooling, upsampling is
nearest-neighbour doubling followed by a channel concat with the skip
feature, and the head is a single 1x1 convolution producing one logit
map.  The default configuration (depth 3) has exactly 15 learnable
convolution layers: 6 encoder + 2 bottleneck + 6 decoder + 1 head.
Dropout acts once, on the bottleneck output.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import stream
from .resample import bilinear_resize
from .tensor import ShapeError, Tensor

FEATURE_SIZE = 16  # exported feature maps are resized to 16x16 = 256 values


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 16
    groups: int = 8
    dropout_rate: float = 0.5
    in_channels: int = 1

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels % self.groups:
            raise ValueError(
                f"base_channels {self.base_channels} not divisible by groups {self.groups}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def encoder_channels(self, level):
        return self.base_channels * 2 ** (level - 1)

    @property
    def bottleneck_channels(self):
        return self.base_channels * 2 ** self.depth


class ModelParams:
    """Named parameter tensors in fixed build order, plus their config."""

    def __init__(self, config, tensors):
        self.config = config
        self._tensors = dict(tensors)

    def __getitem__(self, name):
        return self._tensors[name]

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self):
        return list(self._tensors)

    def zero_grads(self):
        for t in self._tensors.values():
            t.grad = None

    def set_requires_grad(self, flag):
        for t in self._tensors.values():
            t.requires_grad = flag

    def clone(self, requires_grad=False):
        copies = {n: Tensor(t.data.copy(), requires_grad=requires_grad)
                  for n, t in self._tensors.items()}
        return ModelParams(self.config, copies)

    def astype(self, dtype, requires_grad=True):
        copies = {n: Tensor(t.data.astype(dtype), requires_grad=requires_grad)
                  for n, t in self._tensors.items()}
        return ModelParams(self.config, copies)

    def size(self):
        return sum(t.data.size for t in self._tensors.values())


def _block_specs(config):
    """(prefix, in_channels, out_channels) for every two-conv block."""
    specs = []
    prev = config.in_channels
    for level in range(1, config.depth + 1):
        c = config.encoder_channels(level)
        specs.append((f"enc{level}", prev, c))
        prev = c
    specs.append(("bottleneck", prev, config.bottleneck_channels))
    prev = config.bottleneck_channels
    for level in range(config.depth, 0, -1):
        c = config.encoder_channels(level)
        specs.append((f"dec{level}", prev + c, c))
        prev = c
    return specs


def build(config, seed, dtype=np.float32, requires_grad=True):
    """Initialize parameters: He-scaled normal kernels (std sqrt(2/fan_in)),
    zero biases, unit group-norm gains."""
    rng = stream(seed, "init")
    tensors = {}

    def conv(prefix, cin, cout, k):
        fan_in = cin * k * k
        kernel = rng.standard_normal((cout, cin, k, k)) * math.sqrt(2.0 / fan_in)
        tensors[f"{prefix}.kernel"] = Tensor(kernel.astype(dtype), requires_grad=requires_grad)
        tensors[f"{prefix}.bias"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=requires_grad)

    def norm(prefix, c):
        tensors[f"{prefix}.gamma"] = Tensor(np.ones(c, dtype=dtype), requires_grad=requires_grad)
        tensors[f"{prefix}.beta"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=requires_grad)

    for prefix, cin, cout in _block_specs(config):
        conv(f"{prefix}.conv1", cin, cout, 3)
        norm(f"{prefix}.gn1", cout)
        conv(f"{prefix}.conv2", cout, cout, 3)
        norm(f"{prefix}.gn2", cout)
    conv("head", config.encoder_channels(1), 1, 1)
    return ModelParams(config, tensors)


def _block(params, prefix, x, groups):
    for i in (1, 2):
        x = T.conv2d(x, params[f"{prefix}.conv{i}.kernel"],
                     params[f"{prefix}.conv{i}.bias"], stride=1, padding=1)
        x = T.group_norm(x, groups, params[f"{prefix}.gn{i}.gamma"],
                         params[f"{prefix}.gn{i}.beta"])
        x = T.relu(x)
    return x


def forward(params, x, training=False, drop_rng=None):
    """Run the network on x [N, C, H, W]; returns (probs, logits), both
    [N, 1, H, W].  Spatial dims must be divisible by 2**depth."""
    cfg = params.config
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"forward: expected [N,{cfg.in_channels},H,W], got {x.shape}")
    n, _, h, w = x.shape
    div = 2 ** cfg.depth
    if h % div or w % div:
        raise ShapeError(f"forward: spatial dims {h}x{w} not divisible by {div}")
    if training and cfg.dropout_rate > 0 and drop_rng is None:
        raise ValueError("forward: training mode with dropout needs drop_rng")

    skips = []
    for level in range(1, cfg.depth + 1):
        x = _block(params, f"enc{level}", x, cfg.groups)
        skips.append(x)
        x = T.max_pool2x2(x)
    x = _block(params, "bottleneck", x, cfg.groups)
    x = T.dropout(x, cfg.dropout_rate, drop_rng, training)
    for level in range(cfg.depth, 0, -1):
        x = T.upsample_nearest2x(x)
        x = T.concat_channels(x, skips[level - 1])
        x = _block(params, f"dec{level}", x, cfg.groups)
    logits = T.conv2d(x, params["head.kernel"], params["head.bias"], stride=1, padding=0)
    return T.sigmoid(logits), logits


def export_features(params, x):
    """Per-slice 256-vector: the pre-sigmoid logit map bilinearly resized
    to 16x16 and flattened.  Deterministic (eval mode, no dropout)."""
    with T.no_grad():
        _, logits = forward(params, x, training=False)
    n = logits.shape[0]
    feats = bilinear_resize(logits.data, FEATURE_SIZE, FEATURE_SIZE)
    return feats.reshape(n, FEATURE_SIZE * FEATURE_SIZE)


def conv_layer_count(params):
    return sum(1 for name in params.names() if name.endswith(".kernel"))
