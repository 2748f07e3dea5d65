"""Binary checkpoint format.

Layout (all integers little-endian):

    magic   8 bytes  b"MTDA0001" (4-byte family tag + 4-digit version)
    count   u32      number of named tensors
    tensor  repeated count times:
        name_len u16, name utf-8, rank u8, dims u32 * rank,
        payload float32 * prod(dims)

Student, teacher and Adam moment tensors are stored under "student/",
"teacher/", "adam/m/", "adam/v/" prefixes.  Scalars (epoch, step counts)
ride along as rank-0 tensors and the config snapshot is embedded as a
rank-1 tensor of byte values, so the whole run state round-trips through
the one format.  Save -> load -> save reproduces the file bit for bit.
"""

import struct

import numpy as np

from .config import config_from_text, config_to_text
from .optim import AdamState
from .unet import ModelParams

MAGIC_FAMILY = b"MTDA"
VERSION = b"0001"


class CheckpointError(RuntimeError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class Truncated(CheckpointError):
    pass


def _pack_tensor(name, arr):
    arr = np.asarray(arr, order="C")
    if arr.dtype != np.float32:
        raise CheckpointError(f"checkpoint tensors must be float32, {name} is {arr.dtype}")
    encoded = name.encode("utf-8")
    parts = [struct.pack("<H", len(encoded)), encoded,
             struct.pack("<B", arr.ndim)]
    parts.extend(struct.pack("<I", d) for d in arr.shape)
    parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path, student, teacher, adam, epoch, global_step, cfg):
    tensors = []
    for prefix, params in (("student", student), ("teacher", teacher)):
        for name, t in params.items():
            tensors.append((f"{prefix}/{name}", t.data))
    for moment in ("m", "v"):
        for name, arr in getattr(adam, moment).items():
            tensors.append((f"adam/{moment}/{name}", arr))
    tensors.append(("meta/epoch", np.float32(epoch)))
    tensors.append(("meta/global_step", np.float32(global_step)))
    tensors.append(("meta/adam_t", np.float32(adam.t)))
    text = config_to_text(cfg).encode("utf-8")
    tensors.append(("meta/config_text", np.frombuffer(text, dtype=np.uint8).astype(np.float32)))

    with open(path, "wb") as fh:
        fh.write(MAGIC_FAMILY + VERSION)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            fh.write(_pack_tensor(name, arr))


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise Truncated(f"{self.path}: truncated checkpoint "
                            f"(wanted {n} bytes at offset {self.pos})")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out


def read_tensors(path):
    """Raw name -> float32 array mapping from a checkpoint file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    magic = r.take(8)
    if magic[:4] != MAGIC_FAMILY:
        raise BadMagic(f"{path}: not a checkpoint (magic {magic[:4]!r})")
    if magic[4:] != VERSION:
        raise VersionMismatch(
            f"{path}: unsupported version {magic[4:]!r}, expected {VERSION!r}")
    (count,) = struct.unpack("<I", r.take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", r.take(2))
        name = r.take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", r.take(1))
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        size = int(np.prod(dims)) if rank else 1
        payload = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
        tensors[name] = payload.copy()
    if r.pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.pos} trailing bytes")
    return tensors


def load_checkpoint(path):
    """Returns (student, teacher, adam, epoch, global_step, cfg)."""
    from .tensor import Tensor
    from .trainer import model_config

    tensors = read_tensors(path)
    try:
        text = bytes(tensors.pop("meta/config_text").astype(np.uint8)).decode("utf-8")
        epoch = int(tensors.pop("meta/epoch"))
        global_step = int(tensors.pop("meta/global_step"))
        adam_t = int(tensors.pop("meta/adam_t"))
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing entry {exc}") from exc
    cfg = config_from_text(text)
    ucfg = model_config(cfg)

    def collect(prefix, requires_grad):
        found = {name[len(prefix):]: Tensor(arr, requires_grad=requires_grad)
                 for name, arr in tensors.items() if name.startswith(prefix)}
        if not found:
            raise CheckpointError(f"{path}: no tensors under {prefix!r}")
        return found

    student = ModelParams(ucfg, collect("student/", True))
    teacher = ModelParams(ucfg, collect("teacher/", False))
    adam = AdamState(t=adam_t, beta1=cfg.beta1, beta2=cfg.beta2,
                     eps=cfg.adam_eps, l2_lambda=cfg.l2_lambda)
    for name in student.names():
        adam.m[name] = tensors[f"adam/m/{name}"]
        adam.v[name] = tensors[f"adam/v/{name}"]
    return student, teacher, adam, epoch, global_step, cfg
