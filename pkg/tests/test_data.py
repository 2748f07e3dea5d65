import os
from dataclasses import replace

import numpy as np
import pytest

from mtseg.data import (
    DEFAULT_DOMAINS,
    DataError,
    PgmError,
    batch_images,
    batch_masks,
    generate_corpus,
    generate_domain,
    labeled_batches,
    load_corpus,
    load_pair,
    make_split,
    mixed_batches,
    read_pgm,
    save_corpus,
    unlabeled_subject_ids,
    write_pgm,
)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(seed=0, n_subjects=6, slices_per_subject=4)


@pytest.fixture(scope="module")
def full_corpus():
    return generate_corpus(seed=0)


def key(s):
    return (s.domain_id, s.subject_id, s.slice_index)


# -- generator properties ----------------------------------------------

def test_default_domain_ids():
    assert tuple(d.domain_id for d in DEFAULT_DOMAINS) == (1, 2, 3, 4)


def test_shapes_and_ranges(corpus):
    for samples in corpus.values():
        for s in samples:
            assert s.image.shape == (1, 32, 32)
            assert s.mask.shape == (1, 32, 32)
            assert s.image.dtype == np.float32
            assert 0.0 <= s.image.min() and s.image.max() <= 1.0
            assert set(np.unique(s.mask)).issubset({0.0, 1.0})


def test_foreground_fraction_bounds(full_corpus):
    fracs = [s.mask.mean() for samples in full_corpus.values() for s in samples]
    assert min(fracs) >= 0.01
    assert max(fracs) <= 0.12


def test_domain_mean_intensities_separate(full_corpus):
    means = {d: np.mean([s.image.mean() for s in samples])
             for d, samples in full_corpus.items()}
    ids = sorted(means)
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            assert abs(means[a] - means[b]) > 0.05, (a, b, means)


def test_generation_is_seed_deterministic():
    a = generate_corpus(seed=4, n_subjects=2, slices_per_subject=2)
    b = generate_corpus(seed=4, n_subjects=2, slices_per_subject=2)
    for d in a:
        for s1, s2 in zip(a[d], b[d]):
            assert np.array_equal(s1.image, s2.image)
            assert np.array_equal(s1.mask, s2.mask)


def test_masks_invariant_to_appearance_params():
    # same domain_id, very different appearance: identical geometry
    spec = DEFAULT_DOMAINS[0]
    bright = replace(spec, intensity_gain=1.0, noise_sigma=0.0, blur_sigma=0.0)
    dark = replace(spec, intensity_gain=0.3, intensity_offset=0.4, noise_sigma=0.1)
    sa = generate_domain(bright, seed=2, n_subjects=2, slices_per_subject=3)
    sb = generate_domain(dark, seed=2, n_subjects=2, slices_per_subject=3)
    for s1, s2 in zip(sa, sb):
        assert np.array_equal(s1.mask, s2.mask)
        assert not np.array_equal(s1.image, s2.image)


def test_slices_within_subject_vary(corpus):
    samples = [s for s in corpus[1] if s.subject_id == 0]
    masks = [s.mask for s in samples]
    assert any(not np.array_equal(masks[0], m) for m in masks[1:])


# -- PGM I/O -------------------------------------------------------------

def test_pgm_round_trip_after_quantization(tmp_path, rng):
    img = rng.random((32, 32)).astype(np.float32)
    p = tmp_path / "x.pgm"
    write_pgm(p, img)
    back = read_pgm(p)
    # first write quantizes; a second round trip is exact
    q = np.round(img * 255.0) / 255.0
    assert np.allclose(back, q, atol=1e-7)
    p2 = tmp_path / "y.pgm"
    write_pgm(p2, back)
    assert np.array_equal(read_pgm(p2), back)
    assert p.read_bytes()[:2] == b"P5"


def test_pgm_header_with_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5 # binary\n# size next\n2 2\n255\n" + bytes([0, 128, 255, 64]))
    img = read_pgm(p)
    assert img.shape == (2, 2)
    assert img[0, 1] == pytest.approx(128 / 255)


def test_pgm_rejections(tmp_path):
    cases = {
        "ascii.pgm": b"P2\n2 2\n255\n0 1 2 3",
        "maxval.pgm": b"P5\n2 2\n65535\n" + bytes(8),
        "truncated.pgm": b"P5\n4 4\n255\n" + bytes(7),
        "empty.pgm": b"",
        "dims.pgm": b"P5\n0 2\n255\n",
    }
    for name, blob in cases.items():
        p = tmp_path / name
        p.write_bytes(blob)
        with pytest.raises(PgmError):
            read_pgm(p)


def test_load_pair_validations(tmp_path, rng):
    img = tmp_path / "img.pgm"
    write_pgm(img, rng.random((8, 8)))
    small = tmp_path / "small.pgm"
    write_pgm(small, np.ones((4, 4)))
    with pytest.raises(DataError, match="dimensions"):
        load_pair(img, small, domain_id=1)
    gray = tmp_path / "gray.pgm"
    write_pgm(gray, np.full((8, 8), 0.5))
    with pytest.raises(DataError, match="non-binary"):
        load_pair(img, gray, domain_id=1)
    s = load_pair(img, None, domain_id=2, subject_id=3, slice_index=4)
    assert s.mask is None and key(s) == (2, 3, 4)


# -- corpus on disk -------------------------------------------------------

def test_save_load_round_trip(tmp_path, corpus):
    manifest = save_corpus(corpus, tmp_path)
    assert os.path.basename(manifest) == "manifest.csv"
    back = load_corpus(manifest)
    assert sorted(back) == sorted(corpus)
    for d in corpus:
        assert [key(s) for s in back[d]] == [key(s) for s in sorted(
            corpus[d], key=lambda s: (s.subject_id, s.slice_index))]
        for s1, s2 in zip(sorted(corpus[d], key=lambda s: (s.subject_id, s.slice_index)),
                          back[d]):
            q = np.round(s1.image * 255.0) / 255.0
            assert np.allclose(s2.image, q, atol=1e-7)


def test_pool_masks_hidden_on_disk(tmp_path, corpus):
    manifest = save_corpus(corpus, tmp_path)
    pool = unlabeled_subject_ids([s.subject_id for s in corpus[4]])
    assert pool == {0, 1, 2}
    back = load_corpus(manifest)
    for s in back[4]:
        if s.subject_id in pool:
            assert s.mask is None
            assert not os.path.exists(tmp_path / f"domain4/s{s.subject_id:02d}_{s.slice_index:02d}_mask.pgm")
        else:
            assert s.mask is not None


def test_manifest_column_check(tmp_path, corpus):
    manifest = save_corpus(corpus, tmp_path)
    text = open(manifest).read().splitlines()
    text[0] = "a,b,c,d,e"
    open(manifest, "w").write("\n".join(text))
    with pytest.raises(DataError, match="columns"):
        load_corpus(manifest)


# -- split ------------------------------------------------------------------

def test_split_roles(full_corpus):
    split = make_split(full_corpus)
    assert len(split.train_labeled) == 400
    assert len(split.validation) == 200
    assert len(split.target_unlabeled) == 100
    assert len(split.test) == 100
    assert {s.domain_id for s in split.train_labeled} == {1, 2}
    assert {s.domain_id for s in split.validation} == {3}
    assert all(s.mask is None for s in split.target_unlabeled)
    assert all(s.mask is not None for s in split.test)
    pool_subjects = {s.subject_id for s in split.target_unlabeled}
    test_subjects = {s.subject_id for s in split.test}
    assert pool_subjects == set(range(10))
    assert test_subjects == set(range(10, 20))
    assert not pool_subjects & test_subjects


def test_split_missing_domain(full_corpus):
    broken = dict(full_corpus)
    del broken[3]
    with pytest.raises(DataError, match="missing domain"):
        make_split(broken)


# -- batching ----------------------------------------------------------------

def test_labeled_batches_cover_each_sample_once(corpus):
    samples = corpus[1]
    batches = labeled_batches(samples, 4, seed=0, epoch=0)
    seen = [key(s) for b in batches for s in b]
    assert sorted(seen) == sorted(key(s) for s in samples)
    assert len(batches[0]) == 4


def test_labeled_batches_reshuffle_by_epoch(corpus):
    samples = corpus[1]
    b0 = labeled_batches(samples, 4, seed=0, epoch=0)
    b0_again = labeled_batches(samples, 4, seed=0, epoch=0)
    b1 = labeled_batches(samples, 4, seed=0, epoch=1)
    flat = lambda bs: [key(s) for b in bs for s in b]
    assert flat(b0) == flat(b0_again)
    assert flat(b0) != flat(b1)


def test_mixed_batches_structure(corpus):
    src = corpus[1][:10]
    tgt = corpus[4][:3]
    batches = mixed_batches(src, tgt, 8, seed=1, epoch=0)
    src_seen = [key(s) for b in batches for s in b[0]]
    assert sorted(src_seen) == sorted(key(s) for s in src)
    for source_half, target_half in batches:
        assert len(source_half) == len(target_half)
    # one pass over source: 10 = 4 + 4 + 2, final batch shrinks both halves
    assert [len(b[0]) for b in batches] == [4, 4, 2]
    tgt_seen = [key(s) for b in batches for s in b[1]]
    assert set(tgt_seen) <= {key(s) for s in tgt}
    assert len(tgt_seen) == 10


def test_mixed_batches_target_cycles_with_reshuffle(corpus):
    src = corpus[1][:12]
    tgt = corpus[4][:4]
    batches = mixed_batches(src, tgt, 8, seed=3, epoch=0)
    tgt_seen = [key(s) for b in batches for s in b[1]]
    # 12 draws over a pool of 4: three full passes, each a permutation
    for start in range(0, 12, 4):
        assert sorted(tgt_seen[start:start + 4]) == sorted(key(s) for s in tgt)


def test_mixed_batches_validation(corpus):
    with pytest.raises(DataError):
        mixed_batches(corpus[1], corpus[4], 7, seed=0, epoch=0)
    with pytest.raises(DataError):
        mixed_batches([], corpus[4], 8, seed=0, epoch=0)


def test_batch_stacks(corpus):
    imgs = batch_images(corpus[1][:5])
    masks = batch_masks(corpus[1][:5])
    assert imgs.shape == (5, 1, 32, 32) and imgs.dtype == np.float32
    assert masks.shape == (5, 1, 32, 32)
    unlabeled = replace(corpus[1][0], mask=None)
    with pytest.raises(DataError):
        batch_masks([unlabeled])
