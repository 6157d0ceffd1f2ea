"""Config-driven runs: camera sweeps, the sensor-model ablation and pruning.

Output layout under the output root (``--out``, ``MINCAM_OUT`` or the
config's ``output_dir``)::

    data-<data digest>/{train,val,test}.msyn
    <digest>/<kind>/<run>/checkpoint.mckp     run = k004, r02, ...
    <digest>/<kind>/<run>/masks/mask_000.pgm
    <digest>/<kind>/results.csv
    <digest>/<kind>/results.json              rows plus timings

``<digest>`` hashes every setting that affects results, so different
configs never share a directory and re-running a config resumes it.
Datasets depend only on the scene spec, sizes and seed and are shared.
"""

import concurrent.futures
import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

from . import rng as rngmod
from .errors import ConfigError, DataError
from .pruning import greedy_prune
from .scenes import Dataset, generate_dataset
from .sensor import box_mask_bank, export_masks
from .trainer import evaluate, load_checkpoint, save_checkpoint, train

log = logging.getLogger(__name__)

CSV_HEADER = ["kind", "k_or_res", "pixel_count", "test_rmse", "test_acc", "seed", "checkpoint"]
SPLITS = {"train": 0, "val": 1, "test": 2}


@dataclass
class ResultRow:
    kind: str
    k_or_res: int
    pixel_count: int
    test_rmse: float
    test_acc: float
    seed: int
    checkpoint: str
    train_time: float = 0.0
    trained: bool = False

    def csv_fields(self):
        return [self.kind, self.k_or_res, self.pixel_count, repr(self.test_rmse), repr(self.test_acc),
                self.seed, self.checkpoint]


def write_results(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow(r.csv_fields())
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump([dataclasses.asdict(r) for r in rows], fh, indent=1)
    return path


def read_results(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise DataError(f"{path}: unexpected CSV header {header}")
        return [ResultRow(k, int(kr), int(pc), float(r), float(a), int(s), c)
                for k, kr, pc, r, a, s, c in reader]


class Runner:
    """Executes the runs described by an :class:`ExperimentConfig`."""

    def __init__(self, cfg, out=None, threads=1, deterministic=True):
        self.cfg = cfg
        self.out = cfg.output_root(out)
        self.root = self.out / cfg.digest()
        self.threads = 1 if deterministic else max(1, int(threads))
        self.sensor = cfg.sensor_config()
        self._data = {}

    # ---------------------------------------------------------------- data

    def data_path(self, split):
        base = Path(self.cfg.data.dir) if self.cfg.data.dir else self.out / f"data-{self.cfg.data_digest()}"
        return base / f"{split}.msyn"

    def split_seed(self, split):
        return rngmod.derive_seed(self.cfg.seed, rngmod.DATA, SPLITS[split])

    def ensure_data(self):
        sizes = {"train": self.cfg.data.train, "val": self.cfg.data.val, "test": self.cfg.data.test}
        for split, n in sizes.items():
            path = self.data_path(split)
            if path.exists():
                header = Dataset(path).header
                if header.n == n and header.seed == self.split_seed(split) and \
                        header.spec_digest == self.cfg.scene.digest():
                    continue
                if not self.cfg.data.generate:
                    raise DataError(f"{path} does not match the configured {split} split")
            elif not self.cfg.data.generate:
                raise DataError(f"dataset {path} is missing and generation is disabled")
            log.info("generating %s split (%d scenes) -> %s", split, n, path)
            generate_dataset(self.split_seed(split), n, self.cfg.scene, path)
        return {split: self.data_path(split) for split in sizes}

    def dataset(self, split):
        if split not in self._data:
            self.ensure_data()
            self._data[split] = Dataset(self.data_path(split))
        return self._data[split]

    # ---------------------------------------------------------------- runs

    def run_seed(self, kind, key):
        return rngmod.derive_seed(self.cfg.seed, f"run/{kind}/{key}")

    def test_noise_seed(self):
        return rngmod.derive_seed(self.cfg.seed, rngmod.EVAL_NOISE, SPLITS["test"])

    def _train_cfg(self, kind, key, **changes):
        return dataclasses.replace(self.cfg.train, seed=self.run_seed(kind, key), **changes)

    def _finish(self, kind, key, pixel_count, ckpt, run_dir, started, trained):
        path = run_dir / "checkpoint.mckp"
        if trained:
            save_checkpoint(ckpt, path)
            if ckpt.mask_params is not None or kind == "baseline":
                export_masks(ckpt.bank(), run_dir / "masks", f"{self.root.name}/{kind}/{run_dir.name}",
                             ckpt.train.seed)
        m = evaluate(ckpt, self.dataset("test"), self.test_noise_seed())
        return ResultRow(kind, key, pixel_count, m["rmse"], m["accuracy"], self.cfg.seed,
                         str(path), round(time.perf_counter() - started, 3), trained)

    def train_one(self, kind, key):
        """Train (or reload) one mincam (``kind='mincam'``, key=K) or
        baseline (``kind='baseline'``, key=R) camera."""
        started = time.perf_counter()
        run_dir = self.root / f"{kind}_sweep" / (f"k{key:03d}" if kind == "mincam" else f"r{key:02d}")
        path = run_dir / "checkpoint.mckp"
        if path.exists():
            return self._finish(kind, key, key if kind == "mincam" else key * key,
                                load_checkpoint(path), run_dir, started, False)
        spec = self.cfg.scene
        train_set, val_set = self.dataset("train"), self.dataset("val")
        if kind == "mincam":
            k, bank = key, None
        else:
            k = key * key
            bank = box_mask_bank(key, spec.height, spec.width, self.sensor.mask_range[1])
        ckpt = train(train_set, val_set, spec, self.sensor, self.cfg.mlp_config(k),
                     self._train_cfg(kind, key), bank=bank)
        return self._finish(kind, key, k, ckpt, run_dir, started, True)

    def _sweep(self, kind, keys):
        out = self.root / f"{kind}_sweep" / "results.csv"
        self.ensure_data()
        rows = []
        if self.threads > 1:
            with concurrent.futures.ProcessPoolExecutor(self.threads) as pool:
                futures = [pool.submit(_train_one_remote, self.cfg, self.out, kind, key) for key in keys]
                for f in futures:
                    rows.append(f.result())
                    write_results(rows, out)
        else:
            for key in keys:
                rows.append(self.train_one(kind, key))
                write_results(rows, out)
        return rows

    def run_mincam_sweep(self):
        return self._sweep("mincam", self.cfg.pixel_counts)

    def run_baseline_sweep(self):
        return self._sweep("baseline", self.cfg.baseline_resolutions)

    def run_ablation_no_sensor(self):
        """Arm A: masks trained on the bare projection, then frozen while a
        fresh network is trained with the full sensor model.  Arm B: both
        trained with the sensor model."""
        k = self.cfg.ablation_k
        spec = self.cfg.scene
        base = self.root / "ablation_no_sensor"
        train_set, val_set = self.dataset("train"), self.dataset("val")
        mlp = self.cfg.mlp_config(k)
        rows = []

        started = time.perf_counter()
        a_path = base / "arm_a" / "checkpoint.mckp"
        if a_path.exists():
            ckpt_a, trained = load_checkpoint(a_path), False
        else:
            stage1 = train(train_set, val_set, spec, self.sensor, mlp,
                           self._train_cfg("ablation-a", k, sensor_model_in_training=False))
            save_checkpoint(stage1, base / "arm_a_masks" / "checkpoint.mckp")
            ckpt_a = train(train_set, val_set, spec, self.sensor, mlp,
                           self._train_cfg("ablation-a-retrain", k, freeze_masks=True), bank=stage1.bank())
            trained = True
        row = self._finish("ablation_no_sensor", k, k, ckpt_a, base / "arm_a", started, trained)
        rows.append(row)

        started = time.perf_counter()
        b_path = base / "arm_b" / "checkpoint.mckp"
        if b_path.exists():
            ckpt_b, trained = load_checkpoint(b_path), False
        else:
            ckpt_b = train(train_set, val_set, spec, self.sensor, mlp, self._train_cfg("ablation-b", k))
            trained = True
        rows.append(self._finish("ablation_sensor", k, k, ckpt_b, base / "arm_b", started, trained))

        write_results(rows, base / "results.csv")
        summary = {"k": k, "rmse_no_sensor": rows[0].test_rmse, "rmse_sensor": rows[1].test_rmse,
                   "ratio": rows[0].test_rmse / rows[1].test_rmse if rows[1].test_rmse > 0 else math.inf}
        with open(base / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=1)
        return rows, summary

    def run_prune(self):
        pc = self.cfg.prune
        base = self.root / "prune"
        if pc.checkpoint:
            ckpt = load_checkpoint(pc.checkpoint)
        else:
            ckpt = load_checkpoint(Path(self.train_one("mincam", pc.k).checkpoint))
        trace = greedy_prune(ckpt, self.dataset("val"), pc.target_k, train_set=self.dataset("train"),
                             finetune_epochs=pc.finetune_epochs)
        trace.write_csv(base / "trace.csv")
        rows = []
        k0 = ckpt.bank().k
        for step, c in enumerate(trace.checkpoints, start=1):
            remaining = k0 - step
            started = time.perf_counter()
            rows.append(self._finish("prune", remaining, remaining, c, base / f"step{step:03d}", started, True))
        write_results(rows, base / "results.csv")
        return trace, rows

    def run(self):
        kind = self.cfg.kind
        if kind == "mincam_sweep":
            return self.run_mincam_sweep()
        if kind == "baseline_sweep":
            return self.run_baseline_sweep()
        if kind == "ablation_no_sensor":
            return self.run_ablation_no_sensor()
        if kind == "prune":
            return self.run_prune()
        raise ConfigError(f"unknown experiment kind {kind!r}")


def _train_one_remote(cfg, out, kind, key):
    return Runner(cfg, out=out, deterministic=True).train_one(kind, key)


# ------------------------------------------------------------------ tables


def plot_data(csv_paths, out_path=None):
    """Plot-ready rows (series, log2 pixel count, pixel count, RMSE) and the
    crossover report for one or more results CSVs."""
    rows = []
    for p in csv_paths:
        rows.extend(read_results(p))
    if not rows:
        raise ConfigError("plot-data needs at least one result row")
    table = []
    for r in rows:
        series = "baseline" if r.kind == "baseline" else r.kind
        table.append((series, math.log2(r.pixel_count), r.pixel_count, r.test_rmse))
    table.sort(key=lambda t: (t[0], t[2]))
    report = crossover(rows)
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["series", "log2_pixels", "pixel_count", "test_rmse"])
            for t in table:
                w.writerow([t[0], f"{t[1]:.6g}", t[2], repr(t[3])])
    return table, report


def crossover(rows, reference_resolution=32):
    """Smallest mincam pixel count whose RMSE is at most the baseline RMSE at
    ``reference_resolution`` (or the finest baseline present)."""
    base = [r for r in rows if r.kind == "baseline"]
    mincam = sorted((r for r in rows if r.kind == "mincam"), key=lambda r: r.pixel_count)
    if not base or not mincam:
        return None
    ref = [r for r in base if r.k_or_res == reference_resolution] or [max(base, key=lambda r: r.k_or_res)]
    ref_rmse = min(r.test_rmse for r in ref)
    hit = next((r for r in mincam if r.test_rmse <= ref_rmse), None)
    return {
        "reference_resolution": ref[0].k_or_res,
        "reference_rmse": ref_rmse,
        "crossover_pixels": hit.pixel_count if hit else None,
        "reduction": (ref[0].pixel_count / hit.pixel_count) if hit else None,
    }


def nonincreasing_within(values, tol):
    """True when every value is at most ``(1 + tol)`` times the best value
    seen at a smaller pixel count."""
    best = math.inf
    for v in values:
        if v > best * (1 + tol):
            return False
        best = min(best, v)
    return True

