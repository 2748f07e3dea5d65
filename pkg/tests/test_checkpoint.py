import numpy as np
import pytest

from mtseg.checkpoint import (
    BadMagic,
    CheckpointError,
    Truncated,
    VersionMismatch,
    load_checkpoint,
    read_tensors,
    save_checkpoint,
)
from mtseg.config import ExperimentConfig
from mtseg.optim import init_adam
from mtseg.trainer import init_state, effective_config


def tiny_cfg(**kw):
    base = dict(mode="adapt", base_channels=4, groups=2, depth=2,
                total_epochs=4, rampup_epochs=2, image_size=16)
    base.update(kw)
    return effective_config(ExperimentConfig(**base))


@pytest.fixture
def saved(tmp_path):
    cfg = tiny_cfg()
    state = init_state(cfg)
    path = tmp_path / "run.bin"
    save_checkpoint(path, state.student, state.teacher, state.adam,
                    epoch=3, global_step=41, cfg=cfg)
    return path, state, cfg


def test_save_load_restores_everything(saved):
    path, state, cfg = saved
    student, teacher, adam, epoch, global_step, cfg2 = load_checkpoint(path)
    assert epoch == 3 and global_step == 41
    assert cfg2 == cfg
    for name in state.student.names():
        assert np.array_equal(student[name].data, state.student[name].data)
        assert np.array_equal(teacher[name].data, state.teacher[name].data)
        assert np.array_equal(adam.m[name], state.adam.m[name])
        assert np.array_equal(adam.v[name], state.adam.v[name])
    assert adam.t == state.adam.t
    assert all(t.requires_grad for _, t in student.items())
    assert not any(t.requires_grad for _, t in teacher.items())


def test_save_load_save_is_bitwise(saved, tmp_path):
    path, state, cfg = saved
    student, teacher, adam, epoch, global_step, cfg2 = load_checkpoint(path)
    second = tmp_path / "again.bin"
    save_checkpoint(second, student, teacher, adam, epoch, global_step, cfg2)
    assert path.read_bytes() == second.read_bytes()


def test_scalars_stored_rank_zero(saved):
    path, _, _ = saved
    tensors = read_tensors(path)
    assert tensors["meta/epoch"].shape == ()
    assert tensors["meta/adam_t"].shape == ()
    assert tensors["meta/config_text"].ndim == 1


def test_bad_magic(tmp_path, saved):
    path, _, _ = saved
    blob = path.read_bytes()
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(BadMagic):
        read_tensors(bad)


def test_version_mismatch(tmp_path, saved):
    path, _, _ = saved
    blob = path.read_bytes()
    bad = tmp_path / "newer.bin"
    bad.write_bytes(blob[:4] + b"0002" + blob[8:])
    with pytest.raises(VersionMismatch):
        read_tensors(bad)


def test_truncated(tmp_path, saved):
    path, _, _ = saved
    blob = path.read_bytes()
    bad = tmp_path / "cut.bin"
    bad.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(Truncated):
        read_tensors(bad)


def test_trailing_bytes_rejected(tmp_path, saved):
    path, _, _ = saved
    bad = tmp_path / "padded.bin"
    bad.write_bytes(path.read_bytes() + b"\x00\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        read_tensors(bad)


def test_float64_payload_rejected(tmp_path):
    from mtseg.checkpoint import _pack_tensor
    with pytest.raises(CheckpointError, match="float32"):
        _pack_tensor("x", np.zeros(3, dtype=np.float64))


def test_missing_meta_entry(tmp_path, saved):
    import struct
    path, state, cfg = saved
    # rebuild the file without the meta/epoch record
    from mtseg.checkpoint import MAGIC_FAMILY, VERSION, _pack_tensor
    tensors = read_tensors(path)
    tensors.pop("meta/epoch")
    bad = tmp_path / "missing.bin"
    with open(bad, "wb") as fh:
        fh.write(MAGIC_FAMILY + VERSION)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            fh.write(_pack_tensor(name, arr))
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(bad)
