"""Spatial transforms shared by inputs, labels and teacher predictions.

A TransformSpec is applied as horizontal flip, then rotation about the
image center, then integer translation, always with zero fill.  Images
and soft prediction maps resample bilinearly; binary masks use nearest
neighbour so they stay binary.  The identity spec reproduces the input
bit for bit, and integer translations with zero rotation act as exact
pixel permutations with zero fill.
"""

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, no_grad

ROTATION_LIMIT_DEG = 15.0
TRANSLATE_LIMIT_PX = 4


@dataclass(frozen=True)
class TransformSpec:
    rotation_deg: float
    translate_px: tuple  # (tx, ty): column shift, row shift
    hflip: bool
    draw_id: int = 0

    def __post_init__(self):
        if abs(self.rotation_deg) > ROTATION_LIMIT_DEG:
            raise ValueError(f"rotation {self.rotation_deg} outside +-{ROTATION_LIMIT_DEG} deg")
        tx, ty = self.translate_px
        if tx != int(tx) or ty != int(ty):
            raise ValueError(f"translations must be integers, got {self.translate_px}")
        if max(abs(tx), abs(ty)) > TRANSLATE_LIMIT_PX:
            raise ValueError(f"translation {self.translate_px} outside +-{TRANSLATE_LIMIT_PX} px")
        object.__setattr__(self, "translate_px", (int(tx), int(ty)))

    def serialize(self):
        tx, ty = self.translate_px
        return f"hflip={int(self.hflip)} rot={self.rotation_deg!r} tx={tx} ty={ty}"


def parse_transform(line):
    fields = dict(tok.split("=", 1) for tok in line.split())
    return TransformSpec(
        rotation_deg=float(fields["rot"]),
        translate_px=(int(fields["tx"]), int(fields["ty"])),
        hflip=bool(int(fields["hflip"])),
    )


def identity_transform():
    return TransformSpec(rotation_deg=0.0, translate_px=(0, 0), hflip=False)


def sample_transform(rng, draw_id=0):
    """Draw rotation, translation and flip uniformly from their ranges."""
    rot = float(rng.uniform(-ROTATION_LIMIT_DEG, ROTATION_LIMIT_DEG))
    tx = int(rng.integers(-TRANSLATE_LIMIT_PX, TRANSLATE_LIMIT_PX + 1))
    ty = int(rng.integers(-TRANSLATE_LIMIT_PX, TRANSLATE_LIMIT_PX + 1))
    hflip = bool(rng.random() < 0.5)
    return TransformSpec(rotation_deg=rot, translate_px=(tx, ty), hflip=hflip, draw_id=draw_id)


def _source_coords(spec, h, w):
    """Source-pixel coordinates for each output pixel under the inverse
    of flip -> rotate -> translate."""
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    tx, ty = spec.translate_px
    rows = rows - ty
    cols = cols - tx
    if spec.rotation_deg:
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        th = math.radians(spec.rotation_deg)
        ct, st = math.cos(th), math.sin(th)
        y, x = rows - cy, cols - cx
        rows = -x * st + y * ct + cy
        cols = x * ct + y * st + cx
    if spec.hflip:
        cols = (w - 1) - cols
    return rows, cols


def _gather_bilinear(img, rows, cols):
    h, w = img.shape[-2:]
    r0 = np.floor(rows)
    c0 = np.floor(cols)
    wr = rows - r0
    wc = cols - c0
    r0 = r0.astype(np.intp)
    c0 = c0.astype(np.intp)
    out = np.zeros(img.shape[:-2] + rows.shape, dtype=np.float64)
    for dr, wrow in ((0, 1.0 - wr), (1, wr)):
        for dc, wcol in ((0, 1.0 - wc), (1, wc)):
            rr, cc = r0 + dr, c0 + dc
            inb = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            rs = np.clip(rr, 0, h - 1)
            cs = np.clip(cc, 0, w - 1)
            out += img[..., rs, cs] * (wrow * wcol * inb)
    return out


def _gather_nearest(img, rows, cols):
    h, w = img.shape[-2:]
    rr = np.rint(rows).astype(np.intp)
    cc = np.rint(cols).astype(np.intp)
    inb = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    rs = np.clip(rr, 0, h - 1)
    cs = np.clip(cc, 0, w - 1)
    return img[..., rs, cs] * inb


def apply_transform(spec, img, interpolation="bilinear"):
    """Resample img (trailing two axes are H, W) under spec with zero fill.

    Accepts numpy arrays or Tensors; Tensor input returns a constant
    Tensor, since the transform is never differentiated through.
    """
    as_tensor = isinstance(img, Tensor)
    arr = img.data if as_tensor else np.asarray(img)
    h, w = arr.shape[-2:]
    rows, cols = _source_coords(spec, h, w)
    if interpolation == "bilinear":
        out = _gather_bilinear(arr, rows, cols)
    elif interpolation == "nearest":
        out = _gather_nearest(arr, rows, cols)
    else:
        raise ValueError(f"unknown interpolation {interpolation!r}")
    out = out.astype(arr.dtype, copy=False)
    return Tensor(out) if as_tensor else out


def align_pair(x_target, spec, student_forward, teacher_forward):
    """Consistency pair for one unlabeled input under a shared transform.

    Returns (student(g(x)), g(teacher(x))): the student sees the
    transformed input, while the teacher prediction on the clean input is
    transformed afterwards so both live in the same frame.  Only the
    student branch carries gradients.
    """
    x_aug = apply_transform(spec, x_target, interpolation="bilinear")
    student_out = student_forward(x_aug)
    with no_grad():
        teacher_out = teacher_forward(x_target)
    aligned = apply_transform(spec, teacher_out.data, interpolation="bilinear")
    return student_out, Tensor(aligned)
