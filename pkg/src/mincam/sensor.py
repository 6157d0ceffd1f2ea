"""Differentiable freeform-pixel camera layer.

Each freeform pixel is a photodetector behind a transmittance mask.  On a
discrete grid shared by the scene and the masks the measurement chain is::

    p_d = dA * sum((I * b) . M . d)        optics: blur, mask, vignetting
    p_n = G p_d + n_r + n_q                gain, read and quantization noise
    p_f = leaky_clip(p_n, p_max, alpha)    saturation with a small slope

``dA = 1 / (H W)`` so a white scene through a fully open mask with no
optics yields ``p_d = 1``.  Gain, noise and saturation are in volts.
"""

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class Geometry:
    mask_size_mm: float = 16.0
    standoff_mm: float = 11.4
    active_area_mm: float = 0.88

    def cell_mm(self, n):
        return self.mask_size_mm / n


@dataclass(frozen=True)
class SensorConfig:
    """Physical constants of the measurement chain.

    ``gain`` is the number of volts produced by one normalized unit of
    collected energy.  It is the product of the amplifier transimpedance
    (V/A) and ``photocurrent_per_unit`` (A per unit of ``p_d``), the
    exposure conversion factor.
    """

    transimpedance: float = 1e7
    photocurrent_per_unit: float = 5e-9
    sigma_r: float = 400e-6
    adc_bits: int = 16
    p_max: float = 3.2
    alpha: float = 0.01
    blur_width: int | None = None
    vignette_exponent: float = 4.0
    mask_range: tuple[float, float] = (0.01, 0.67)
    geometry: Geometry | None = field(default_factory=Geometry)
    noise_enabled: bool = True
    clip_enabled: bool = True

    def __post_init__(self):
        lo, hi = self.mask_range
        if not 0.0 < lo < hi <= 1.0:
            raise ConfigError(f"mask_range must satisfy 0 < lo < hi <= 1, got {self.mask_range}")
        if not 0.0 < self.alpha <= 0.2:
            raise ConfigError(f"alpha must lie in (0, 0.2], got {self.alpha}")
        if self.sigma_r < 0:
            raise ConfigError(f"sigma_r must be non-negative, got {self.sigma_r}")
        if self.p_max <= 0:
            raise ConfigError(f"p_max must be positive, got {self.p_max}")
        if not (isinstance(self.adc_bits, int) and 1 <= self.adc_bits <= 24):
            raise ConfigError(f"adc_bits must be an integer in [1, 24], got {self.adc_bits}")
        if self.vignette_exponent < 0:
            raise ConfigError(f"vignette_exponent must be >= 0, got {self.vignette_exponent}")
        if self.blur_width is not None and (self.blur_width < 1 or self.blur_width % 2 == 0):
            raise ConfigError(f"blur_width must be a positive odd integer, got {self.blur_width}")
        if self.gain <= 0:
            raise ConfigError("gain (transimpedance * photocurrent_per_unit) must be positive")

    @property
    def gain(self):
        return self.transimpedance * self.photocurrent_per_unit

    @property
    def p_lsb(self):
        return self.p_max / (2 ** self.adc_bits - 1)

    def blur_cells(self, n):
        """Odd blur width in grid cells for an ``n``-cell wide mask."""
        if self.blur_width is not None:
            return self.blur_width
        if self.geometry is None:
            return 1
        ratio = self.geometry.active_area_mm / self.geometry.cell_mm(n)
        width = max(1, math.ceil(ratio - 1e-9))
        return width if width % 2 else width + 1

    def ideal(self):
        """The bare linear projection: unit gain, no optics, noise or clipping."""
        return dataclasses.replace(
            self, transimpedance=1.0, photocurrent_per_unit=1.0, blur_width=1,
            vignette_exponent=0.0, noise_enabled=False, clip_enabled=False)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("geometry") is not None:
            d["geometry"] = Geometry(**d["geometry"])
        if "mask_range" in d:
            d["mask_range"] = tuple(d["mask_range"])
        return cls(**d)


# Dim-scene exposure: a white scene through a clear full-field mask gives
# 5 nA into the 1e7 V/A amplifier (0.05 V).  A typical synthetic scene
# through a freshly initialized mask then sits a few read-noise standard
# deviations above zero, so masks must open up to be useful.
HARDWARE = SensorConfig()

# Brighter exposure and nearly unrestricted transmittance.
PHOTODETECTOR = SensorConfig(photocurrent_per_unit=3e-8, mask_range=(1e-3, 1.0))

PRESETS = {"hardware": HARDWARE, "photodetector": PHOTODETECTOR}


def preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown sensor preset {name!r}; choose from {sorted(PRESETS)}") from None


# --------------------------------------------------------------------- masks


def _logit(p):
    return np.log(p) - np.log1p(-p)


class MaskBank:
    """Masks of ``K`` freeform pixels on an ``H x W`` grid.

    Trainable banks hold unconstrained parameters ``M_t``; the
    transmittance is ``t_lo + (t_hi - t_lo) * sigmoid(M_t)``.  Fixed banks
    (baseline cameras) hold transmittances directly.
    """

    def __init__(self, params=None, mask_range=(0.01, 0.67), fixed=None, trainable=True):
        lo, hi = mask_range
        if not lo < hi:
            raise ConfigError(f"invalid transmittance range {mask_range}")
        self.mask_range = (float(lo), float(hi))
        if (params is None) == (fixed is None):
            raise ConfigError("MaskBank needs exactly one of params or fixed")
        if params is not None:
            params = np.asarray(params, dtype=np.float64)
            if params.ndim != 3 or params.shape[0] < 1:
                raise DimensionError(f"mask parameters must be K x H x W, got {params.shape}")
            self.params = ad.Tensor(params, requires_grad=trainable)
            self.fixed = None
        else:
            fixed = np.asarray(fixed, dtype=np.float64)
            if fixed.ndim != 3 or fixed.shape[0] < 1:
                raise DimensionError(f"fixed masks must be K x H x W, got {fixed.shape}")
            self.params = None
            self.fixed = fixed

    @property
    def shape(self):
        return (self.params.values if self.params is not None else self.fixed).shape

    @property
    def k(self):
        return self.shape[0]

    @property
    def trainable(self):
        return self.params is not None and self.params.requires_grad

    def transmittance(self):
        """Transmittance as a graph node (differentiable w.r.t. ``M_t``)."""
        if self.fixed is not None:
            return ad.Tensor(self.fixed)
        return mask_transmittance(self.params, self.mask_range)

    def values(self):
        return self.transmittance().values

    def with_range(self, mask_range):
        if self.fixed is not None:
            return MaskBank(fixed=self.fixed, mask_range=mask_range)
        return MaskBank(self.params.values.copy(), mask_range, trainable=self.trainable)

    def frozen(self):
        if self.fixed is not None:
            return self
        return MaskBank(self.params.values.copy(), self.mask_range, trainable=False)

    @classmethod
    def from_transmittance(cls, m, mask_range, trainable=True):
        """Bank whose derived transmittance equals ``m`` (strictly inside the range)."""
        lo, hi = mask_range
        m = np.asarray(m, dtype=np.float64)
        if np.any(m <= lo) or np.any(m >= hi):
            raise ConfigError(f"transmittances must lie strictly inside {mask_range}")
        return cls(_logit((m - lo) / (hi - lo)), mask_range, trainable=trainable)


def mask_transmittance(m_t, mask_range):
    lo, hi = mask_range
    if not lo < hi:
        raise ConfigError(f"invalid transmittance range {mask_range}")
    return ad.add(ad.scale(ad.sigmoid(m_t), hi - lo), lo)


def box_mask_bank(resolution, height, width, t_hi, t_lo=0.0):
    """Fixed masks of a traditional ``R x R`` camera: ``t_hi`` inside each
    block, ``t_lo`` (default opaque) elsewhere."""
    r = int(resolution)
    if r < 1 or height % r or width % r:
        raise ConfigError(f"resolution {r} must divide the grid {height}x{width}")
    bh, bw = height // r, width // r
    masks = np.full((r * r, height, width), float(t_lo))
    for i in range(r):
        for j in range(r):
            masks[i * r + j, i * bh:(i + 1) * bh, j * bw:(j + 1) * bw] = t_hi
    return MaskBank(fixed=masks, mask_range=(float(t_lo), float(t_hi)) if t_lo < t_hi else (0.0, 1.0))


# -------------------------------------------------------------------- optics


def vignette_profile(r_mm, standoff_mm, k):
    return np.cos(np.arctan(np.asarray(r_mm, dtype=np.float64) / standoff_mm)) ** k


def build_vignette(height, width, geometry, k):
    """Directional response ``cos(theta)**k`` sampled on the mask grid.

    Samples span the mask edge to edge (the outermost samples sit on the
    mask border), with the peak at the geometric centre.
    """
    if k < 0:
        raise ConfigError(f"vignette exponent must be >= 0, got {k}")
    if k == 0 or geometry is None:
        return np.ones((height, width))
    half = geometry.mask_size_mm / 2
    ys = np.linspace(-half, half, height) if height > 1 else np.zeros(1)
    xs = np.linspace(-half, half, width) if width > 1 else np.zeros(1)
    r = np.hypot(ys[:, None], xs[None, :])
    return vignette_profile(r, geometry.standoff_mm, k)


def blur_kernel(width):
    if width < 1 or width % 2 == 0:
        raise ConfigError(f"blur width must be a positive odd integer, got {width}")
    return np.full((width, width), 1.0 / (width * width))


def leaky_clip(p_n, p_max, alpha):
    return ad.leaky_clip(p_n, p_max, alpha)


def sample_noise(rng, shape, cfg):
    """Additive read plus quantization noise, in volts."""
    read = rng.normal(0.0, cfg.sigma_r, size=shape) if cfg.sigma_r > 0 else np.zeros(shape)
    quant = rng.uniform(0.0, cfg.p_lsb, size=shape)
    return read + quant


class Optics:
    """Constant optical terms (blur kernel and mask-weighted vignette) for
    one grid size and sensor configuration."""

    def __init__(self, height, width, cfg):
        self.height, self.width = height, width
        self.kernel = blur_kernel(cfg.blur_cells(width))
        self.vignette = build_vignette(height, width, cfg.geometry, cfg.vignette_exponent)


def pixel_forward(scenes, bank, cfg, rng=None, noise=None, optics=None, keep=None):
    """Measurements ``p_f`` of every pixel for a batch of scenes.

    ``scenes`` is ``B x H x W``.  Noise, when enabled, is drawn from ``rng``
    unless an explicit ``B x K`` ``noise`` array is given; it enters the
    graph as a constant.  ``keep`` optionally zeroes the measurements of
    removed pixels (a length-K 0/1 vector).
    """
    scenes = np.asarray(scenes.values if isinstance(scenes, ad.Tensor) else scenes, dtype=np.float64)
    if scenes.ndim == 2:
        scenes = scenes[None]
    b, h, w = scenes.shape
    k, mh, mw = bank.shape
    if (h, w) != (mh, mw):
        raise DimensionError(f"scene resolution {h}x{w} does not match mask resolution {mh}x{mw}")
    if optics is None or (optics.height, optics.width) != (h, w):
        optics = Optics(h, w, cfg)

    img = ad.Tensor(scenes)
    if optics.kernel.shape[0] > 1:
        img = ad.conv2d_fixed(img, optics.kernel)
    flat = ad.reshape(img, (b, h * w))

    m = bank.transmittance()
    if cfg.vignette_exponent != 0:
        m = ad.mul(m, ad.Tensor(np.broadcast_to(optics.vignette, (k, h, w))))
    weights = ad.transpose(ad.reshape(m, (k, h * w)))
    p = ad.scale(ad.matmul(flat, weights), cfg.gain / (h * w))

    if cfg.noise_enabled:
        if noise is None:
            if rng is None:
                raise ConfigError("noise is enabled but neither rng nor noise was given")
            noise = sample_noise(rng, (b, k), cfg)
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != (b, k):
            raise DimensionError(f"noise must be {(b, k)}, got {noise.shape}")
        p = ad.add(p, ad.Tensor(noise))
    if cfg.clip_enabled:
        p = ad.leaky_clip(p, cfg.p_max, cfg.alpha)
    if keep is not None:
        p = ad.mul(p, ad.Tensor(np.broadcast_to(np.asarray(keep, dtype=np.float64), (b, k))))
    return p


# -------------------------------------------------------------------- export


def export_masks(bank, out_dir, experiment_id="", seed=0, prefix="mask"):
    """Write one 8-bit binary PGM per pixel plus a ``masks.txt`` manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = bank.mask_range
    m = bank.values()
    k, h, w = m.shape
    paths = []
    for j in range(k):
        levels = np.clip(np.round(255.0 * (m[j] - lo) / (hi - lo)), 0, 255).astype(np.uint8)
        path = out / f"{prefix}_{j:03d}.pgm"
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(levels.tobytes())
        paths.append(path)
    manifest = {
        "k": k, "height": h, "width": w, "range": [lo, hi],
        "experiment": experiment_id, "seed": int(seed),
        "files": [p.name for p in paths],
    }
    with open(out / "masks.txt", "w") as fh:
        for key, val in manifest.items():
            fh.write(f"{key}: {json.dumps(val)}\n")
    return paths


def read_pgm(path):
    """Read an 8-bit binary PGM written by :func:`export_masks`."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w)
