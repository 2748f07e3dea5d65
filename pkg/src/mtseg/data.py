"""Synthetic four-domain corpus of 2-D slices with binary masks.

Every slice shows a bright elliptical cord with an inner butterfly-shaped
structure (two overlapping lobes); the butterfly is the foreground class.
Geometry is jittered per subject and per slice, and the ground-truth mask
is taken from the clean geometry before any intensity corruption, so the
mask is invariant to the domain's appearance parameters.  Each domain
then applies its own gain/offset, low-order polynomial bias field,
Gaussian blur, resolution degradation (blur-downsample-upsample) and
additive noise.

Domain roles are fixed: 1 and 2 are labeled training domains, 3 is the
validation domain, and domain 4 is split at the subject level into an
unlabeled adaptation pool (first half of the sorted subject ids) and a
held-out labeled test set.
"""

import csv
import math
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .resample import bilinear_resize
from .rng import stream

SOURCE_DOMAINS = (1, 2)
VALIDATION_DOMAIN = 3
TARGET_DOMAIN = 4

SUBJECTS_PER_DOMAIN = 20
SLICES_PER_SUBJECT = 10
IMAGE_SIZE = 32

MANIFEST_COLUMNS = ("domain_id", "subject_id", "slice_index", "image_path", "mask_path")


class DataError(ValueError):
    """Corpus-level consistency problem (mismatched pair, bad mask, ...)."""


class PgmError(ValueError):
    """Malformed PGM file."""


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    intensity_gain: float
    intensity_offset: float
    noise_sigma: float
    blur_sigma: float
    bias_field_amp: float
    resolution_scale: float


DEFAULT_DOMAINS = (
    DomainSpec(1, intensity_gain=1.00, intensity_offset=0.00, noise_sigma=0.015,
               blur_sigma=0.4, bias_field_amp=0.05, resolution_scale=1.0),
    DomainSpec(2, intensity_gain=1.12, intensity_offset=0.05, noise_sigma=0.020,
               blur_sigma=0.5, bias_field_amp=0.08, resolution_scale=1.0),
    DomainSpec(3, intensity_gain=0.82, intensity_offset=-0.04, noise_sigma=0.030,
               blur_sigma=0.8, bias_field_amp=0.15, resolution_scale=1.5),
    DomainSpec(4, intensity_gain=0.45, intensity_offset=0.30, noise_sigma=0.080,
               blur_sigma=1.6, bias_field_amp=0.40, resolution_scale=2.0),
)


@dataclass
class SliceSample:
    image: np.ndarray          # [1,H,W] float32 in [0,1]
    mask: np.ndarray | None    # [1,H,W] float32 in {0,1}; None when unlabeled
    domain_id: int
    subject_id: int
    slice_index: int


# -- geometry --------------------------------------------------------------

def _ellipse(rows, cols, cy, cx, ry, rx, angle):
    y = rows - cy
    x = cols - cx
    ct, st = math.cos(angle), math.sin(angle)
    u = x * ct + y * st
    v = -x * st + y * ct
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _subject_shape(geo, size):
    s = size / 32.0
    return {
        "cy": size / 2.0 + geo.uniform(-1.5, 1.5),
        "cx": size / 2.0 + geo.uniform(-1.5, 1.5),
        "angle": geo.uniform(-0.35, 0.35),
        "cord_rx": s * geo.uniform(9.5, 11.5),
        "cord_ry": s * geo.uniform(6.6, 8.4),
        "lobe_sep": s * geo.uniform(2.8, 3.8),
        "lobe_a": s * geo.uniform(2.5, 3.2),
        "lobe_b": s * geo.uniform(1.8, 2.3),
        "lobe_tilt": geo.uniform(-0.25, 0.25),
        "fg_level": geo.uniform(0.82, 0.88),
        "cord_level": geo.uniform(0.45, 0.51),
        "bg_level": geo.uniform(0.10, 0.14),
    }


def _render_slice(shape, geo, size):
    """Clean image and mask for one slice; geometry only, no corruption."""
    rows, cols = np.meshgrid(np.arange(size, dtype=np.float64),
                             np.arange(size, dtype=np.float64), indexing="ij")
    f = geo.uniform(0.9, 1.1)
    cy = shape["cy"] + geo.uniform(-0.6, 0.6)
    cx = shape["cx"] + geo.uniform(-0.6, 0.6)
    angle = shape["angle"] + geo.uniform(-0.06, 0.06)

    cord = _ellipse(rows, cols, cy, cx, shape["cord_ry"] * f, shape["cord_rx"] * f, angle)

    sep = shape["lobe_sep"] * f
    dy, dx = sep * math.sin(angle), sep * math.cos(angle)
    la, lb = shape["lobe_a"] * f, shape["lobe_b"] * f
    tilt = shape["lobe_tilt"]
    left = _ellipse(rows, cols, cy - dy, cx - dx, lb, la, angle + tilt)
    right = _ellipse(rows, cols, cy + dy, cx + dx, lb, la, angle - tilt)
    butterfly = left | right

    img = np.full((size, size), shape["bg_level"], dtype=np.float64)
    img[cord] = shape["cord_level"]
    img[butterfly] = shape["fg_level"]
    return img, butterfly.astype(np.float32)


# -- domain corruption -----------------------------------------------------

def _bias_field(rng, size, amp):
    u, v = np.meshgrid(np.linspace(-1.0, 1.0, size), np.linspace(-1.0, 1.0, size),
                       indexing="ij")
    a1, a2, a3, a4 = rng.uniform(-1.0, 1.0, size=4)
    poly = a1 * u + a2 * v + a3 * u * v + a4 * (u * u - v * v)
    return 1.0 + amp * poly / 2.0


def _corrupt(img, spec, rng):
    size = img.shape[0]
    out = spec.intensity_gain * img + spec.intensity_offset
    if spec.bias_field_amp:
        out = out * _bias_field(rng, size, spec.bias_field_amp)
    if spec.blur_sigma:
        out = gaussian_filter(out, sigma=spec.blur_sigma)
    if spec.resolution_scale > 1.0:
        low = max(2, int(round(size / spec.resolution_scale)))
        out = bilinear_resize(bilinear_resize(out, low, low), size, size)
    if spec.noise_sigma:
        out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def generate_domain(spec, seed, n_subjects=SUBJECTS_PER_DOMAIN,
                    slices_per_subject=SLICES_PER_SUBJECT, size=IMAGE_SIZE):
    """All slices for one domain.  Geometry streams are keyed only by
    (seed, domain_id, subject), so two specs sharing a domain_id produce
    identical masks regardless of their appearance parameters."""
    samples = []
    for subject in range(n_subjects):
        geo = stream(seed, "geo", spec.domain_id, subject)
        intensity = stream(seed, "intensity", spec.domain_id, subject)
        shape = _subject_shape(geo, size)
        for idx in range(slices_per_subject):
            clean, mask = _render_slice(shape, geo, size)
            img = _corrupt(clean, spec, intensity)
            samples.append(SliceSample(image=img[None], mask=mask[None],
                                       domain_id=spec.domain_id, subject_id=subject,
                                       slice_index=idx))
    return samples


def generate_corpus(seed, domains=DEFAULT_DOMAINS, n_subjects=SUBJECTS_PER_DOMAIN,
                    slices_per_subject=SLICES_PER_SUBJECT, size=IMAGE_SIZE):
    return {spec.domain_id: generate_domain(spec, seed, n_subjects, slices_per_subject, size)
            for spec in domains}


# -- PGM I/O ---------------------------------------------------------------

def write_pgm(path, arr01):
    """Write values in [0, 1] as an 8-bit binary PGM (P5, maxval 255)."""
    arr = np.asarray(arr01)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise PgmError(f"write_pgm: need a 2-D array, got shape {arr.shape}")
    q = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(q.tobytes())


def _read_pgm_raw(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(blob):
            ch = blob[pos:pos + 1]
            if ch == b"#":
                nl = blob.find(b"\n", pos)
                pos = len(blob) if nl < 0 else nl + 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmError(f"{path}: malformed PGM header (unexpected end)")
        return blob[start:pos]

    if token() != b"P5":
        raise PgmError(f"{path}: malformed PGM header (not binary P5)")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError as exc:
        raise PgmError(f"{path}: malformed PGM header ({exc})") from exc
    if w < 1 or h < 1:
        raise PgmError(f"{path}: malformed PGM header (bad dimensions {w}x{h})")
    if maxval != 255:
        raise PgmError(f"{path}: unsupported maxval {maxval}, expected 255")
    pos += 1  # single whitespace byte after maxval
    raster = blob[pos:pos + w * h]
    if len(raster) != w * h:
        raise PgmError(f"{path}: truncated raster, expected {w * h} bytes, got {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w)


def read_pgm(path):
    """Load an 8-bit PGM as float32 in [0, 1]."""
    return _read_pgm_raw(path).astype(np.float32) / 255.0


def load_pair(image_path, mask_path, domain_id, subject_id=0, slice_index=0):
    """Load an image and optional mask as one sample.  Masks must be
    strictly two-valued (0/255) and are binarized at 128."""
    img = read_pgm(image_path)
    mask = None
    if mask_path:
        raw = _read_pgm_raw(mask_path)
        if raw.shape != img.shape:
            raise DataError(
                f"image/mask dimensions differ: {img.shape} vs {raw.shape} "
                f"({image_path}, {mask_path})")
        values = np.unique(raw)
        if not np.isin(values, (0, 255)).all():
            raise DataError(f"{mask_path}: mask has non-binary values {values[:8].tolist()}")
        mask = (raw >= 128).astype(np.float32)[None]
    return SliceSample(image=img[None], mask=mask, domain_id=domain_id,
                       subject_id=subject_id, slice_index=slice_index)


# -- corpus on disk --------------------------------------------------------

def unlabeled_subject_ids(subject_ids):
    """First half of the sorted subject ids: the adaptation pool rule."""
    ids = sorted(set(subject_ids))
    return set(ids[:len(ids) // 2])


def save_corpus(corpus, out_dir):
    """Write every slice as PGM pairs plus a manifest.csv.  Domain-4 pool
    subjects get no mask file: their labels never leave the generator."""
    rows = []
    pool = unlabeled_subject_ids([s.subject_id for s in corpus.get(TARGET_DOMAIN, [])])
    for domain_id in sorted(corpus):
        ddir = os.path.join(out_dir, f"domain{domain_id}")
        os.makedirs(ddir, exist_ok=True)
        for s in sorted(corpus[domain_id], key=lambda s: (s.subject_id, s.slice_index)):
            base = f"s{s.subject_id:02d}_{s.slice_index:02d}"
            img_rel = os.path.join(f"domain{domain_id}", base + ".pgm")
            write_pgm(os.path.join(out_dir, img_rel), s.image)
            mask_rel = ""
            hide = domain_id == TARGET_DOMAIN and s.subject_id in pool
            if s.mask is not None and not hide:
                mask_rel = os.path.join(f"domain{domain_id}", base + "_mask.pgm")
                write_pgm(os.path.join(out_dir, mask_rel), s.mask)
            rows.append((domain_id, s.subject_id, s.slice_index, img_rel, mask_rel))
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    return manifest


def load_corpus(manifest_path):
    root = os.path.dirname(os.path.abspath(manifest_path))
    corpus = {}
    with open(manifest_path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != MANIFEST_COLUMNS:
            raise DataError(f"manifest columns {header} != {MANIFEST_COLUMNS}")
        for domain_id, subject_id, slice_index, img_rel, mask_rel in reader:
            sample = load_pair(
                os.path.join(root, img_rel),
                os.path.join(root, mask_rel) if mask_rel else None,
                int(domain_id), int(subject_id), int(slice_index))
            corpus.setdefault(int(domain_id), []).append(sample)
    for samples in corpus.values():
        samples.sort(key=lambda s: (s.subject_id, s.slice_index))
    return corpus


# -- split and batching ----------------------------------------------------

@dataclass
class DataSplit:
    train_labeled: list
    validation: list
    target_unlabeled: list
    test: list


def make_split(corpus):
    """Fixed-role split; the domain-4 pool/test subject sets are disjoint
    halves, and pool samples carry no masks."""
    for d in SOURCE_DOMAINS + (VALIDATION_DOMAIN, TARGET_DOMAIN):
        if d not in corpus or not corpus[d]:
            raise DataError(f"corpus is missing domain {d}")
    train = [s for d in SOURCE_DOMAINS for s in corpus[d]]
    if any(s.mask is None for s in train):
        raise DataError("source-domain samples must be labeled")
    validation = list(corpus[VALIDATION_DOMAIN])

    target = corpus[TARGET_DOMAIN]
    pool_ids = unlabeled_subject_ids([s.subject_id for s in target])
    pool, test = [], []
    for s in target:
        if s.subject_id in pool_ids:
            pool.append(replace(s, mask=None))
        else:
            if s.mask is None:
                raise DataError(f"test subject {s.subject_id} in domain {TARGET_DOMAIN} "
                                "has no mask")
            test.append(s)
    if not pool or not test:
        raise DataError("domain-4 subject split produced an empty partition")
    return DataSplit(train_labeled=train, validation=validation,
                     target_unlabeled=pool, test=test)


def _chunks(seq, size):
    return [seq[i:i + size] for i in range(0, len(seq), size)]


def labeled_batches(samples, batch_size, seed, epoch):
    """Source-only batches; one epoch visits every sample exactly once."""
    if not samples:
        raise DataError("labeled_batches: empty sample list")
    rng = stream(seed, "shuffle-source", epoch)
    perm = rng.permutation(len(samples))
    return [[samples[i] for i in chunk] for chunk in _chunks(perm.tolist(), batch_size)]


def mixed_batches(source, target, batch_size, seed, epoch):
    """Half-source, half-target batches.  One epoch is a single pass over
    the source set; target samples cycle through independent reshuffles.
    Both halves shrink together on the final partial batch."""
    if batch_size < 2 or batch_size % 2:
        raise DataError(f"mixed_batches: batch_size must be even and >= 2, got {batch_size}")
    if not source or not target:
        raise DataError("mixed_batches: empty source or target partition")
    half = batch_size // 2
    src_rng = stream(seed, "shuffle-source", epoch)
    tgt_rng = stream(seed, "shuffle-target", epoch)
    src_order = src_rng.permutation(len(source)).tolist()
    tgt_order = []
    while len(tgt_order) < len(src_order):
        tgt_order.extend(tgt_rng.permutation(len(target)).tolist())
    batches = []
    for src_chunk in _chunks(src_order, half):
        tgt_chunk = tgt_order[len(batches) * half:len(batches) * half + len(src_chunk)]
        batches.append(([source[i] for i in src_chunk], [target[i] for i in tgt_chunk]))
    return batches


def batch_images(samples):
    return np.stack([s.image for s in samples]).astype(np.float32)


def batch_masks(samples):
    if any(s.mask is None for s in samples):
        raise DataError("batch_masks: sample without mask")
    return np.stack([s.mask for s in samples]).astype(np.float32)
