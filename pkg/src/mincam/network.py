"""MLP inference head that maps pixel measurements to a count."""

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class MlpConfig:
    input_width: int = 4
    hidden: tuple[int, ...] = (128, 128)
    leak: float = 0.01
    head: str = "classification"
    num_classes: int = 11

    def __post_init__(self):
        if self.input_width < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError(f"layer widths must be >= 1, got {self.input_width} and {self.hidden}")
        if self.head not in ("classification", "regression"):
            raise ConfigError(f"head must be 'classification' or 'regression', got {self.head!r}")
        if self.head == "classification" and self.num_classes < 2:
            raise ConfigError(f"classification needs at least 2 classes, got {self.num_classes}")
        if not 0 < self.leak < 1:
            raise ConfigError(f"leak slope must lie in (0, 1), got {self.leak}")

    @property
    def output_width(self):
        return self.num_classes if self.head == "classification" else 1

    def widths(self):
        return [self.input_width, *self.hidden, self.output_width]

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


class Network:
    """Weights ``W_i`` (fan_in x fan_out) and biases ``b_i`` of each layer.

    ``input_shift`` and ``input_scale`` are a fixed (non-trainable)
    standardization applied to the measurements before the first layer.
    """

    def __init__(self, cfg, weights, biases, input_shift=None, input_scale=None):
        self.cfg = cfg
        self.weights = [ad.Tensor(w, requires_grad=True) for w in weights]
        self.biases = [ad.Tensor(b, requires_grad=True) for b in biases]
        widths = cfg.widths()
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (widths[i], widths[i + 1]) or b.shape != (widths[i + 1],):
                raise DimensionError(f"layer {i} has shapes {w.shape}/{b.shape}, expected "
                                     f"{(widths[i], widths[i + 1])}/{(widths[i + 1],)}")
        k = cfg.input_width
        self.input_shift = np.zeros(k) if input_shift is None else np.asarray(input_shift, dtype=np.float64)
        self.input_scale = np.ones(k) if input_scale is None else np.asarray(input_scale, dtype=np.float64)

    def parameters(self):
        """Named trainable tensors in a fixed order."""
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"net.w{i}"] = w
            out[f"net.b{i}"] = b
        return out

    def state(self):
        state = {name: t.values.copy() for name, t in self.parameters().items()}
        state["net.input_shift"] = self.input_shift.copy()
        state["net.input_scale"] = self.input_scale.copy()
        return state

    @classmethod
    def from_state(cls, cfg, state):
        n = len(cfg.widths()) - 1
        return cls(cfg, [state[f"net.w{i}"] for i in range(n)], [state[f"net.b{i}"] for i in range(n)],
                   state.get("net.input_shift"), state.get("net.input_scale"))

    def copy(self):
        return Network.from_state(self.cfg, self.state())

    def set_standardization(self, measurements):
        """Fix the input standardization from a sample of measurements."""
        x = np.asarray(measurements, dtype=np.float64)
        self.input_shift = x.mean(axis=0)
        std = x.std(axis=0)
        self.input_scale = 1.0 / np.where(std > 0, std, 1.0)


def init_network(cfg, rng):
    """Uniform fan-based (Glorot) weights, zero biases."""
    weights, biases = [], []
    widths = cfg.widths()
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Network(cfg, weights, biases)


def forward(net, measurements):
    """affine -> leaky ReLU -> ... -> affine head."""
    x = ad.as_tensor(measurements)
    if x.values.ndim != 2 or x.shape[1] != net.cfg.input_width:
        raise DimensionError(f"expected batch x {net.cfg.input_width} measurements, got {x.shape}")
    x = ad.mul(ad.add(x, ad.Tensor(np.broadcast_to(-net.input_shift, x.shape))),
               ad.Tensor(np.broadcast_to(net.input_scale, x.shape)))
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        x = ad.add_rowvec(ad.matmul(x, w), b)
        if i < last:
            x = ad.leaky_relu(x, net.cfg.leak)
    return x


def predict_count(outputs, count_range=(0, 10)):
    """Argmax class (ties to the lowest index) for logits, or the rounded
    and clamped value for a single regression output."""
    out = np.asarray(outputs.values if isinstance(outputs, ad.Tensor) else outputs, dtype=np.float64)
    if out.ndim == 1:
        out = out[None]
    lo, hi = count_range
    if out.shape[1] == 1:
        v = out[:, 0]
        rounded = np.sign(v) * np.floor(np.abs(v) + 0.5)
        return np.clip(rounded, lo, hi).astype(np.int64)
    return np.argmax(out, axis=1).astype(np.int64)
