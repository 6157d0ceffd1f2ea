"""Seeded generator for the synthetic patch-counting scenes.

A scene is a dark background with ``n`` bright axis-aligned square
patches (later patches drawn on top of earlier ones) multiplied by a
smooth sinusoidal illumination field.  The label is ``n``.

Dataset file layout (little-endian)::

    offset  size  field
    0       4     magic b"MSYN"
    4       2     version (uint16, currently 1)
    6       2     H (uint16)
    8       2     W (uint16)
    10      8     n, number of records (uint64)
    18      8     seed (uint64)
    26      32    SHA-256 of the canonical JSON of the SceneSpec
    58      ...   n records of {label: uint8, image: H*W float32 row-major}
"""

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, FormatError

MAGIC = b"MSYN"
VERSION = 1
_HEADER = struct.Struct("<4sHHHQQ32s")
HEADER_SIZE = _HEADER.size


@dataclass(frozen=True)
class SceneSpec:
    height: int = 32
    width: int = 32
    count_range: tuple[int, int] = (0, 10)
    patch_size_range: tuple[float, float] = (0.15, 0.20)
    patch_brightness_range: tuple[float, float] = (0.6, 1.0)
    background: float = 0.05
    illumination_amplitude_range: tuple[float, float] = (0.0, 0.2)
    illumination_frequency_range: tuple[float, float] = (0.25, 1.0)

    def __post_init__(self):
        lo, hi = self.count_range
        if not (0 <= lo <= hi <= 10):
            raise ConfigError(f"count_range must be a sub-range of [0, 10], got {self.count_range}")
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"grid must be at least 1x1, got {self.height}x{self.width}")
        for name in ("patch_size_range", "patch_brightness_range", "illumination_frequency_range",
                     "illumination_amplitude_range"):
            a, b = getattr(self, name)
            if a > b:
                raise ConfigError(f"{name} is empty: {(a, b)}")
        for name in ("patch_size_range", "patch_brightness_range"):
            a, b = getattr(self, name)
            if a < 0 or b > 1:
                raise ConfigError(f"{name} must lie within [0, 1], got {(a, b)}")
        if not 0 <= self.background <= 1:
            raise ConfigError(f"background must lie in [0, 1], got {self.background}")
        a, b = self.illumination_amplitude_range
        if a < 0 or b >= 1:
            raise ConfigError(f"illumination amplitude must lie in [0, 1), got {(a, b)}")
        if self.illumination_frequency_range[0] < 0:
            raise ConfigError("illumination frequency must be non-negative")

    @property
    def num_classes(self):
        return self.count_range[1] + 1

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("count_range", "patch_size_range", "patch_brightness_range",
                    "illumination_amplitude_range", "illumination_frequency_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def digest(self):
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).digest()


@dataclass
class SceneSample:
    image: np.ndarray
    label: int


_grid_cache = {}


def _grid(h, w):
    key = (h, w)
    if key not in _grid_cache:
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        _grid_cache[key] = (xs + 0.5, ys + 0.5)
    return _grid_cache[key]


def illumination(h, w, amplitude, frequency, orientation, phase):
    """``1 + a sin(2 pi f (x cos phi + y sin phi) / W + psi)``; positive for a < 1."""
    xs, ys = _grid(h, w)
    arg = 2 * np.pi * frequency * (xs * np.cos(orientation) + ys * np.sin(orientation)) / w + phase
    return 1.0 + amplitude * np.sin(arg)


def generate_scene(seed, index, spec):
    """Deterministic scene number ``index`` of the stream keyed by ``seed``."""
    rng = rngmod.substream(seed, rngmod.DATA, index)
    h, w = spec.height, spec.width
    lo, hi = spec.count_range
    n = int(rng.integers(lo, hi + 1))
    image = np.full((h, w), spec.background)
    for _ in range(n):
        side = max(1, min(w, h, int(round(rng.uniform(*spec.patch_size_range) * w))))
        y0 = int(rng.integers(0, h - side + 1))
        x0 = int(rng.integers(0, w - side + 1))
        image[y0:y0 + side, x0:x0 + side] = rng.uniform(*spec.patch_brightness_range)
    amp = rng.uniform(*spec.illumination_amplitude_range)
    freq = rng.uniform(*spec.illumination_frequency_range)
    orient = rng.uniform(0.0, 2 * np.pi)
    phase = rng.uniform(0.0, 2 * np.pi)
    image *= illumination(h, w, amp, freq, orient, phase)
    np.clip(image, 0.0, 1.0, out=image)
    return SceneSample(image, n)


def generate_batch(seed, start, count, spec):
    """Images (float32) and labels for indices ``start .. start+count-1``."""
    images = np.empty((count, spec.height, spec.width), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        s = generate_scene(seed, start + i, spec)
        images[i] = s.image
        labels[i] = s.label
    return images, labels


# ------------------------------------------------------------------ file I/O


def _record_dtype(h, w):
    return np.dtype([("label", "u1"), ("image", "<f4", (h, w))])


def write_header(fh, h, w, n, seed, spec):
    fh.write(_HEADER.pack(MAGIC, VERSION, h, w, n, int(seed) & (2**64 - 1), spec.digest()))


def generate_dataset(seed, n, spec, path, chunk=1024):
    """Stream ``n`` scenes into ``path``; memory use is independent of ``n``."""
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    path = Path(path)
    dtype = _record_dtype(spec.height, spec.width)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".part")
        with open(tmp, "wb") as fh:
            write_header(fh, spec.height, spec.width, n, seed, spec)
            for start in range(0, n, chunk):
                count = min(chunk, n - start)
                images, labels = generate_batch(seed, start, count, spec)
                rec = np.empty(count, dtype=dtype)
                rec["label"] = labels
                rec["image"] = images
                fh.write(rec.tobytes())
        tmp.replace(path)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write dataset: {exc.strerror}", str(path)) from exc
    return path


@dataclass(frozen=True)
class DatasetHeader:
    version: int
    height: int
    width: int
    n: int
    seed: int
    spec_digest: bytes


def read_header(path):
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"truncated header ({len(raw)} of {HEADER_SIZE} bytes)", offset=len(raw), path=path)
    magic, version, h, w, n, seed, digest = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0, path=path)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4, path=path)
    if h == 0 or w == 0:
        raise FormatError(f"invalid grid {h}x{w}", offset=6, path=path)
    header = DatasetHeader(version, h, w, n, seed, digest)
    expected = HEADER_SIZE + n * _record_dtype(h, w).itemsize
    size = path.stat().st_size
    if size != expected:
        raise FormatError(
            f"length field says {n} records ({expected} bytes) but file has {size} bytes",
            offset=10, path=path)
    return header


def read_dataset(path):
    """Yield :class:`SceneSample` records in stored order."""
    header = read_header(path)
    dtype = _record_dtype(header.height, header.width)
    with open(path, "rb") as fh:
        fh.seek(HEADER_SIZE)
        for i in range(header.n):
            raw = fh.read(dtype.itemsize)
            if len(raw) != dtype.itemsize:
                raise FormatError("truncated record", offset=HEADER_SIZE + i * dtype.itemsize, path=path)
            rec = np.frombuffer(raw, dtype=dtype)[0]
            yield SceneSample(rec["image"].astype(np.float64), int(rec["label"]))


class Dataset:
    """Memory-mapped view of a dataset file (images stay float32 on disk)."""

    def __init__(self, path):
        self.path = Path(path)
        self.header = read_header(self.path)
        h, w = self.header.height, self.header.width
        if self.header.n:
            self._rec = np.memmap(self.path, dtype=_record_dtype(h, w), mode="r",
                                  offset=HEADER_SIZE, shape=(self.header.n,))
            self.labels = np.asarray(self._rec["label"], dtype=np.int64)
        else:
            self._rec = np.zeros(0, dtype=_record_dtype(h, w))
            self.labels = np.zeros(0, dtype=np.int64)

    def __len__(self):
        return self.header.n

    @property
    def shape(self):
        return (self.header.height, self.header.width)

    def images(self, idx):
        return np.asarray(self._rec["image"][idx], dtype=np.float64)


class ArrayDataset:
    """In-memory dataset with the same interface as :class:`Dataset`."""

    def __init__(self, images, labels):
        self._images = np.asarray(images)
        self.labels = np.asarray(labels, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self._images.shape[1:]

    def images(self, idx):
        return np.asarray(self._images[idx], dtype=np.float64)


def make_dataset(seed, n, spec):
    images, labels = generate_batch(seed, 0, n, spec)
    return ArrayDataset(images, labels)
