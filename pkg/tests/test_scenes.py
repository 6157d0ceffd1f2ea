import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mincam import rng as rngmod
from mincam.errors import ConfigError, FormatError
from mincam.scenes import (HEADER_SIZE, Dataset, SceneSpec, generate_batch, generate_dataset, generate_scene,
                           illumination, read_dataset, read_header, write_header)

SPEC = SceneSpec()


def test_empty_scene_is_lit_background():
    spec = SceneSpec(count_range=(0, 0))
    s = generate_scene(7, 3, spec)
    assert s.label == 0
    # replay the draws that follow the count
    rng = rngmod.substream(7, rngmod.DATA, 3)
    rng.integers(0, 1)
    amp = rng.uniform(*spec.illumination_amplitude_range)
    freq = rng.uniform(*spec.illumination_frequency_range)
    orient, phase = rng.uniform(0, 2 * np.pi), rng.uniform(0, 2 * np.pi)
    expected = np.clip(spec.background * illumination(32, 32, amp, freq, orient, phase), 0, 1)
    np.testing.assert_array_equal(s.image, expected)


def test_scene_is_deterministic():
    a, b = generate_scene(11, 42, SPEC), generate_scene(11, 42, SPEC)
    assert a.label == b.label
    assert np.array_equal(a.image, b.image)
    c = generate_scene(11, 43, SPEC)
    assert not np.array_equal(a.image, c.image)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 10**6))
def test_scene_values_and_label_range(seed, index):
    s = generate_scene(seed, index, SPEC)
    assert s.image.shape == (32, 32)
    assert 0 <= s.label <= 10
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0


def test_patches_are_brighter_than_background():
    spec = SceneSpec(count_range=(1, 1), illumination_amplitude_range=(0.0, 0.0))
    s = generate_scene(0, 0, spec)
    bright = s.image > spec.background
    side = int(np.sqrt(bright.sum()))
    assert side * side == bright.sum()
    assert 0.15 * 32 - 1 <= side <= 0.20 * 32 + 1


def test_label_histogram_uniform():
    _, labels = generate_batch(2024, 0, 10_000, SPEC)
    counts = np.bincount(labels, minlength=11)
    assert stats.chisquare(counts).pvalue > 0.01


def test_spec_validation():
    with pytest.raises(ConfigError):
        SceneSpec(count_range=(3, 2))
    with pytest.raises(ConfigError):
        SceneSpec(count_range=(0, 11))
    with pytest.raises(ConfigError):
        SceneSpec(patch_brightness_range=(0.5, 1.5))
    with pytest.raises(ConfigError):
        SceneSpec(illumination_amplitude_range=(0.0, 1.0))


def test_spec_dict_roundtrip():
    assert SceneSpec.from_dict(SPEC.to_dict()) == SPEC
    assert SPEC.digest() == SceneSpec().digest()
    assert SPEC.digest() != SceneSpec(background=0.1).digest()


# ----------------------------------------------------------------- file I/O


def test_single_record_roundtrip(tmp_path):
    path = generate_dataset(5, 1, SPEC, tmp_path / "one.msyn")
    assert path.stat().st_size == HEADER_SIZE + 1 + 4 * 32 * 32
    samples = list(read_dataset(path))
    assert len(samples) == 1
    ref = generate_scene(5, 0, SPEC)
    assert samples[0].label == ref.label
    np.testing.assert_array_equal(samples[0].image, ref.image.astype(np.float32))


def test_roundtrip_hundred(tmp_path):
    path = generate_dataset(6, 100, SPEC, tmp_path / "d.msyn", chunk=32)
    images, labels = generate_batch(6, 0, 100, SPEC)
    got = list(read_dataset(path))
    assert [s.label for s in got] == labels.tolist()
    np.testing.assert_array_equal(np.stack([s.image for s in got]), images)
    ds = Dataset(path)
    assert len(ds) == 100 and ds.shape == (32, 32)
    np.testing.assert_array_equal(ds.labels, labels)
    np.testing.assert_array_equal(ds.images([3, 50]), images[[3, 50]])
    h = read_header(path)
    assert (h.n, h.seed, h.spec_digest) == (100, 6, SPEC.digest())


def test_generation_byte_identical(tmp_path):
    a = generate_dataset(8, 50, SPEC, tmp_path / "a.msyn")
    b = generate_dataset(8, 50, SPEC, tmp_path / "b.msyn", chunk=7)
    assert a.read_bytes() == b.read_bytes()


def test_split_seeds_disjoint():
    seeds = [rngmod.derive_seed(0, rngmod.DATA, i) for i in range(3)]
    seen = {}
    for split, seed in enumerate(seeds):
        images, _ = generate_batch(seed, 0, 1000, SPEC)
        for img in images:
            h = hashlib.sha256(img.tobytes()).hexdigest()
            assert seen.setdefault(h, split) == split
    assert len(seen) > 2900  # only blank scenes may repeat within a split


def test_empty_body_gives_empty_iterator(tmp_path):
    path = tmp_path / "empty.msyn"
    with open(path, "wb") as fh:
        write_header(fh, 32, 32, 0, 1, SPEC)
    assert list(read_dataset(path)) == []
    assert len(Dataset(path)) == 0


def corrupt(path, offset, data):
    raw = bytearray(path.read_bytes())
    raw[offset:offset + len(data)] = data
    path.write_bytes(bytes(raw))


@pytest.mark.parametrize("offset, data, where", [
    (0, b"XXXX", 0),
    (4, (9).to_bytes(2, "little"), 4),
    (10, (7).to_bytes(8, "little"), 10),
])
def test_format_errors_report_offset(tmp_path, offset, data, where):
    path = generate_dataset(1, 3, SPEC, tmp_path / "d.msyn")
    corrupt(path, offset, data)
    with pytest.raises(FormatError) as info:
        list(read_dataset(path))
    assert info.value.offset == where
    assert str(path) in str(info.value)


def test_truncated_file(tmp_path):
    path = generate_dataset(1, 3, SPEC, tmp_path / "d.msyn")
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(FormatError):
        Dataset(path)
    path.write_bytes(b"MSY")
    with pytest.raises(FormatError):
        read_header(path)


def test_io_failure_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    target = blocker / "sub" / "d.msyn"
    with pytest.raises(OSError) as info:
        generate_dataset(1, 1, SPEC, target)
    assert str(target) in str(info.value)
