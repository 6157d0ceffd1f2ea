"""Joint training of masks and inference network."""

import dataclasses
import hashlib
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .errors import ConfigError, DimensionError, DivergenceError, FormatError
from .network import MlpConfig, Network, forward, init_network, predict_count
from .scenes import SceneSpec
from .sensor import MaskBank, Optics, SensorConfig, pixel_forward, sample_noise

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    mask_lr: float | None = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    max_epochs: int = 30
    patience: int = 10
    seed: int = 0
    mask_init_range: tuple[float, float] = (0.08, 0.12)
    freeze_masks: bool = False
    sensor_model_in_training: bool = True
    standardize_inputs: bool = True

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError(f"Adam betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.lr < 0 or (self.mask_lr is not None and self.mask_lr < 0):
            raise ConfigError("learning rates must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size and patience must be >= 1 and max_epochs >= 0")
        lo, hi = self.mask_init_range
        if not lo < hi:
            raise ConfigError(f"mask_init_range is empty: {self.mask_init_range}")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "mask_init_range" in d:
            d["mask_init_range"] = tuple(d["mask_init_range"])
        return cls(**d)


# ---------------------------------------------------------------- mask init


def init_masks(k, height, width, mask_range, init_range=(0.08, 0.12), rng=None):
    """Bank whose transmittances are drawn from ``Uniform(init_range)``."""
    lo, hi = mask_range
    a, b = init_range
    if not lo < a < b < hi:
        raise ConfigError(f"mask init range {init_range} must lie strictly inside {mask_range}")
    u = rng.uniform(a, b, size=(k, height, width))
    return MaskBank.from_transmittance(u, mask_range)


# --------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, t, cfg, lrs=None):
    """One in-place Adam update of each named parameter array.

    ``params`` and ``grads`` map names to arrays; ``lrs`` optionally maps
    names to per-parameter learning rates (default ``cfg.lr``).
    """
    if t < 1:
        raise ConfigError(f"Adam step counter starts at 1, got {t}")
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise DimensionError(f"gradient of {name} has shape {g.shape}, parameter {theta.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(theta), np.zeros_like(theta)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        lr = cfg.lr if lrs is None else lrs.get(name, cfg.lr)
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    state.t = t
    return params, state


# --------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    sensor: SensorConfig
    mlp: MlpConfig
    train: TrainConfig
    network: dict
    mask_params: np.ndarray | None = None
    fixed_masks: np.ndarray | None = None
    mask_range: tuple = (0.01, 0.67)
    spec: SceneSpec | None = None
    keep: np.ndarray | None = None
    epoch: int = 0
    metrics: dict = field(default_factory=dict)
    val_noise_seed: int = 0
    rng_digest: str = ""

    def bank(self, trainable=False):
        if self.fixed_masks is not None:
            return MaskBank(fixed=self.fixed_masks.copy(), mask_range=self.mask_range)
        return MaskBank(self.mask_params.copy(), self.mask_range, trainable=trainable)

    def net(self):
        return Network.from_state(self.mlp, self.network)

    def effective_sensor(self):
        return self.sensor if self.train.sensor_model_in_training else self.sensor.ideal()


CKPT_MAGIC = b"MCKP"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHI")


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(ckpt, path):
    """Write ``ckpt`` as {magic, version, header length, JSON header, float64 blobs}."""
    blobs = {name: np.asarray(a, dtype="<f8") for name, a in sorted(ckpt.network.items())}
    if ckpt.mask_params is not None:
        blobs["masks.params"] = np.asarray(ckpt.mask_params, dtype="<f8")
    if ckpt.fixed_masks is not None:
        blobs["masks.fixed"] = np.asarray(ckpt.fixed_masks, dtype="<f8")
    if ckpt.keep is not None:
        blobs["masks.keep"] = np.asarray(ckpt.keep, dtype="<f8")
    table, offset = [], 0
    for name, arr in blobs.items():
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = {
        "configs": {
            "sensor": ckpt.sensor.to_dict(),
            "mlp": ckpt.mlp.to_dict(),
            "train": ckpt.train.to_dict(),
            "spec": ckpt.spec.to_dict() if ckpt.spec is not None else None,
        },
        "mask_range": list(ckpt.mask_range),
        "epoch": ckpt.epoch,
        "metrics": ckpt.metrics,
        "val_noise_seed": ckpt.val_noise_seed,
        "rng_digest": ckpt.rng_digest,
        "blobs": table,
    }
    text = _canonical(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(text)))
        fh.write(text)
        for arr in blobs.values():
            fh.write(arr.tobytes())
    tmp.replace(path)
    return path


def read_checkpoint_header(path):
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _CKPT_HEAD.size:
        raise FormatError("truncated checkpoint header", offset=len(data), path=path)
    magic, version, hlen = _CKPT_HEAD.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0, path=path)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4, path=path)
    start = _CKPT_HEAD.size
    if len(data) < start + hlen:
        raise FormatError("truncated checkpoint header", offset=len(data), path=path)
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}", offset=start, path=path) from None
    return header, data, start + hlen


def load_checkpoint(path):
    header, data, base = read_checkpoint_header(path)
    blobs = {}
    for entry in header["blobs"]:
        lo = base + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(data):
            raise FormatError(f"blob {entry['name']} is truncated", offset=len(data), path=path)
        blobs[entry["name"]] = np.frombuffer(data[lo:hi], dtype="<f8").reshape(entry["shape"]).copy()
    cfg = header["configs"]
    network = {k: v for k, v in blobs.items() if k.startswith("net.")}
    return Checkpoint(
        sensor=SensorConfig.from_dict(cfg["sensor"]),
        mlp=MlpConfig.from_dict(cfg["mlp"]),
        train=TrainConfig.from_dict(cfg["train"]),
        network=network,
        mask_params=blobs.get("masks.params"),
        fixed_masks=blobs.get("masks.fixed"),
        mask_range=tuple(header["mask_range"]),
        spec=SceneSpec.from_dict(cfg["spec"]) if cfg["spec"] is not None else None,
        keep=blobs.get("masks.keep"),
        epoch=header["epoch"],
        metrics=header["metrics"],
        val_noise_seed=header["val_noise_seed"],
        rng_digest=header["rng_digest"],
    )


def summarize_checkpoint(path):
    header, _, _ = read_checkpoint_header(path)
    cfg = header["configs"]
    lines = [
        f"checkpoint: {path}",
        f"epoch: {header['epoch']}",
        f"pixels: {cfg['mlp']['input_width']}",
        f"hidden: {cfg['mlp']['hidden']}  head: {cfg['mlp']['head']}",
        f"mask range: {header['mask_range']}",
        f"sensor model in training: {cfg['train']['sensor_model_in_training']}",
    ]
    lines += [f"{k}: {v}" for k, v in sorted(header["metrics"].items()) if not isinstance(v, list)]
    lines.append(f"blobs: {', '.join(b['name'] for b in header['blobs'])}")
    return "\n".join(lines)


# ---------------------------------------------------------------- measuring


def fixed_noise(noise_seed, n, k, cfg):
    """Per-sample noise for evaluation; row i belongs to sample i."""
    if not cfg.noise_enabled:
        return None
    return sample_noise(rngmod.substream(noise_seed, rngmod.EVAL_NOISE), (n, k), cfg)


def measure(dataset, bank, cfg, noise_seed=0, keep=None, batch_size=2048, optics=None):
    """Measurements (n x K) of a whole dataset with per-sample fixed noise."""
    n = len(dataset)
    k = bank.k
    noise = fixed_noise(noise_seed, n, k, cfg)
    h, w = dataset.shape
    optics = optics or Optics(h, w, cfg)
    bank = bank.frozen()
    out = np.empty((n, k))
    for s in range(0, n, batch_size):
        idx = np.arange(s, min(n, s + batch_size))
        nz = noise[idx] if noise is not None else None
        out[idx] = pixel_forward(dataset.images(idx), bank, cfg, noise=nz, optics=optics, keep=keep).values
    return out


def _loss(net, outputs, labels):
    if net.cfg.head == "classification":
        return ad.softmax_cross_entropy(outputs, labels)
    target = ad.Tensor(np.asarray(labels, dtype=np.float64)[:, None])
    return ad.mse_loss(outputs, target)


def score(net, measurements, labels, count_range=(0, 10), batch_size=8192):
    """Loss, RMSE, accuracy and confusion of ``net`` on fixed measurements."""
    n = len(labels)
    preds = np.empty(n, dtype=np.int64)
    loss_sum = 0.0
    for s in range(0, n, batch_size):
        sl = slice(s, min(n, s + batch_size))
        out = forward(net, ad.Tensor(measurements[sl]))
        loss_sum += _loss(net, out, labels[sl]).item() * (sl.stop - sl.start)
        preds[sl] = predict_count(out, count_range)
    return metrics_from_predictions(preds, labels, count_range) | {"loss": loss_sum / max(n, 1)}


def metrics_from_predictions(preds, labels, count_range=(0, 10)):
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    err = (preds - labels).astype(np.float64)
    c = count_range[1] + 1
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (np.clip(labels, 0, c - 1), np.clip(preds, 0, c - 1)), 1)
    return {
        "rmse": float(np.sqrt(np.mean(err ** 2))) if len(err) else 0.0,
        "accuracy": float(np.mean(err == 0)) if len(err) else 0.0,
        "confusion": confusion.tolist(),
    }


def evaluate(checkpoint, dataset, noise_seed):
    """Test metrics of a checkpoint; deterministic given ``noise_seed``."""
    bank = checkpoint.bank()
    net = checkpoint.net()
    if bank.shape[1:] != tuple(dataset.shape):
        raise DimensionError(f"checkpoint grid {bank.shape[1:]} does not match data {dataset.shape}")
    cfg = checkpoint.effective_sensor()
    x = measure(dataset, bank, cfg, noise_seed, keep=checkpoint.keep)
    count_range = checkpoint.spec.count_range if checkpoint.spec is not None else (0, checkpoint.mlp.num_classes - 1)
    return score(net, x, dataset.labels, count_range)


# ------------------------------------------------------------------ training


def _digest(*parts):
    return hashlib.sha256(_canonical(list(parts)).encode("utf-8")).hexdigest()[:16]


def train(train_set, val_set, spec, sensor_cfg, mlp_cfg, train_cfg, bank=None, net=None,
          keep=None, progress=None):
    """Train masks and network; return the best-validation checkpoint.

    ``bank`` and ``net`` start from given values when provided (``net`` is
    trained in place on a copy).  ``keep`` zeroes removed pixels.
    """
    h, w = spec.height, spec.width
    if tuple(train_set.shape) != (h, w) or tuple(val_set.shape) != (h, w):
        raise DimensionError(f"datasets {train_set.shape}/{val_set.shape} do not match grid {h}x{w}")
    seed = train_cfg.seed
    if bank is None:
        bank = init_masks(mlp_cfg.input_width, h, w, sensor_cfg.mask_range, train_cfg.mask_init_range,
                          rngmod.substream(seed, rngmod.MASK_INIT))
    if bank.k != mlp_cfg.input_width:
        raise DimensionError(f"bank has {bank.k} pixels but the network expects {mlp_cfg.input_width}")
    if bank.fixed is None:
        bank = MaskBank(bank.params.values.copy(), bank.mask_range,
                        trainable=not train_cfg.freeze_masks)
    model_cfg = sensor_cfg if train_cfg.sensor_model_in_training else sensor_cfg.ideal()
    optics = Optics(h, w, model_cfg)
    val_noise_seed = rngmod.derive_seed(seed, rngmod.EVAL_NOISE, 0)

    if net is None:
        net = init_network(mlp_cfg, rngmod.substream(seed, rngmod.NET_INIT))
        if train_cfg.standardize_inputs:
            probe = np.arange(min(len(train_set), 4096))
            x0 = measure(_Subset(train_set, probe), bank, model_cfg, val_noise_seed, keep, optics=optics)
            net.set_standardization(x0)
    else:
        net = net.copy()

    params = dict(net.parameters())
    lrs = {}
    if bank.trainable:
        params["masks.params"] = bank.params
        lrs["masks.params"] = train_cfg.mask_lr if train_cfg.mask_lr is not None else train_cfg.lr

    count_range = spec.count_range

    def snapshot(epoch, metrics):
        return Checkpoint(
            sensor=sensor_cfg, mlp=mlp_cfg, train=train_cfg, network=net.state(),
            mask_params=bank.params.values.copy() if bank.fixed is None else None,
            fixed_masks=bank.fixed.copy() if bank.fixed is not None else None,
            mask_range=bank.mask_range, spec=spec,
            keep=None if keep is None else np.asarray(keep, dtype=np.float64).copy(),
            epoch=epoch, metrics=metrics, val_noise_seed=val_noise_seed,
            rng_digest=_digest(seed, val_noise_seed, epoch))

    def validate():
        x = measure(val_set, bank, model_cfg, val_noise_seed, keep, optics=optics)
        m = score(net, x, val_set.labels, count_range)
        return {"val_rmse": m["rmse"], "val_loss": m["loss"], "val_accuracy": m["accuracy"]}

    best = snapshot(0, validate())
    best_key = (best.metrics["val_rmse"], best.metrics["val_loss"])
    stale = 0
    state = AdamState()
    n = len(train_set)
    bs = train_cfg.batch_size
    for epoch in range(1, train_cfg.max_epochs + 1):
        t0 = time.perf_counter()
        perm = rngmod.substream(seed, rngmod.SHUFFLE, epoch).permutation(n)
        noise_rng = rngmod.substream(seed, rngmod.TRAIN_NOISE, epoch)
        total, seen = 0.0, 0
        for s in range(0, n, bs):
            idx = np.sort(perm[s:s + bs])
            labels = train_set.labels[idx]
            x = pixel_forward(train_set.images(idx), bank, model_cfg, rng=noise_rng, optics=optics, keep=keep)
            loss = _loss(net, forward(net, x), labels)
            lv = loss.item()
            if not np.isfinite(lv):
                diag = snapshot(epoch, {"diverged": True, "loss": repr(lv)})
                raise DivergenceError(f"non-finite training loss at epoch {epoch}, batch {s // bs}", diag)
            for p in params.values():
                p.zero_grad()
            ad.backward(loss)
            adam_step({k: p.values for k, p in params.items()}, {k: p.grad for k, p in params.items()},
                      state, state.t + 1, train_cfg, lrs)
            total += lv * len(idx)
            seen += len(idx)
        metrics = validate()
        metrics["train_loss"] = total / max(seen, 1)
        # wall time stays out of the checkpoint so re-runs are bit-identical
        seconds = time.perf_counter() - t0
        log.info("epoch %d train_loss %.4f val_rmse %.4f val_loss %.4f (%.1fs)", epoch, metrics["train_loss"],
                 metrics["val_rmse"], metrics["val_loss"], seconds)
        if progress is not None:
            progress(epoch, dict(metrics, epoch_seconds=seconds))
        key = (metrics["val_rmse"], metrics["val_loss"])
        if key < best_key:
            best, best_key, stale = snapshot(epoch, metrics), key, 0
        else:
            stale += 1
            if stale >= train_cfg.patience:
                break
    best.metrics["final_epoch"] = epoch if train_cfg.max_epochs else 0
    return best


class _Subset:
    def __init__(self, data, idx):
        self.data, self.idx = data, np.asarray(idx)
        self.labels = data.labels[self.idx]
        self.shape = data.shape

    def __len__(self):
        return len(self.idx)

    def images(self, idx):
        return self.data.images(self.idx[idx])
