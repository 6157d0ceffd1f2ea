"""Greedy removal of the least important pixels of a trained camera."""

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .trainer import measure, score, train


@dataclass
class PruneTrace:
    removed: list = field(default_factory=list)
    pre_loss: list = field(default_factory=list)
    post_loss: list = field(default_factory=list)
    val_rmse: list = field(default_factory=list)
    candidates: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    initial_loss: float = float("nan")

    def remaining(self, k):
        return [j for j in range(k) if j not in self.removed]

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "removed_index", "pre_loss", "post_finetune_loss", "val_rmse"])
            for i, (j, pre, post, rmse) in enumerate(zip(self.removed, self.pre_loss, self.post_loss,
                                                         self.val_rmse), start=1):
                w.writerow([i, j, repr(pre), repr(post), repr(rmse)])
        return path


def greedy_prune(checkpoint, val_set, target_k, train_set=None, finetune_epochs=3):
    """Remove pixels one at a time until ``target_k`` remain.

    Each round scores every remaining pixel by the validation loss obtained
    when its measurement is forced to zero, removes the pixel with the
    lowest loss (ties go to the lowest index), then fine-tunes the network
    with the masks frozen for ``finetune_epochs`` epochs on ``train_set``.
    With ``finetune_epochs=0`` (or no training data) the head is kept as is.
    """
    bank = checkpoint.bank()
    k = bank.k
    if not 1 <= target_k < k:
        raise ConfigError(f"target_k must lie in [1, {k - 1}], got {target_k}")
    keep = np.ones(k) if checkpoint.keep is None else np.asarray(checkpoint.keep, dtype=np.float64).copy()
    if int(keep.sum()) <= target_k:
        raise ConfigError(f"checkpoint already has only {int(keep.sum())} active pixels")
    cfg = checkpoint.effective_sensor()
    count_range = checkpoint.spec.count_range
    x_val = measure(val_set, bank, cfg, checkpoint.val_noise_seed)
    labels = val_set.labels
    net = checkpoint.net()
    current = checkpoint

    trace = PruneTrace(initial_loss=score(net, x_val * keep, labels, count_range)["loss"])
    while int(keep.sum()) > target_k:
        best_j, best_loss, scores = None, None, {}
        for j in np.flatnonzero(keep):
            trial = keep.copy()
            trial[j] = 0.0
            loss = score(net, x_val * trial, labels, count_range)["loss"]
            scores[int(j)] = loss
            if best_loss is None or loss < best_loss:
                best_j, best_loss = int(j), loss
        keep[best_j] = 0.0
        trace.removed.append(best_j)
        trace.pre_loss.append(best_loss)
        trace.candidates.append(scores)

        if finetune_epochs > 0 and train_set is not None:
            tcfg = dataclasses.replace(current.train, freeze_masks=True, max_epochs=finetune_epochs)
            current = train(train_set, val_set, current.spec, current.sensor, current.mlp, tcfg,
                            bank=bank, net=net, keep=keep)
            net = current.net()
        else:
            current = dataclasses.replace(current, network=net.state(), keep=keep.copy())
        m = score(net, x_val * keep, labels, count_range)
        current.metrics = dict(current.metrics, val_loss=m["loss"], val_rmse=m["rmse"])
        trace.post_loss.append(m["loss"])
        trace.val_rmse.append(m["rmse"])
        trace.checkpoints.append(current)
    return trace
