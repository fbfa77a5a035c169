"""Training loop with milestone learning-rate decay and momentum SGD.

One run is fully determined by (model spec, data, config, seed): batch
order, augmentation, and any adversarial-batch randomness all derive from
the config seed through stable labels.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .lipschitz import project_coeff, total_loss
from .seeds import split_seed
from .tensor import SGD, Tensor, backward, cross_entropy


class NanLossError(RuntimeError):
    """Loss became non-finite; carries the epoch and batch index."""

    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 0.1
    decay: float = 0.2
    milestones: tuple = (10, 15)
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        self.milestones = tuple(self.milestones)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing: {self.milestones}")
        if any(m >= self.epochs for m in self.milestones):
            raise ValueError(f"milestones must be < epochs={self.epochs}: {self.milestones}")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Initial lr times decay once per milestone already reached."""
    return cfg.lr * cfg.decay ** sum(m <= epoch for m in cfg.milestones)


@dataclass
class LossCurve:
    rows: list[dict] = field(default_factory=list)

    def add(self, epoch: int, lr: float, loss: float, accuracy: float):
        self.rows.append({"epoch": epoch, "lr": lr, "loss": loss, "accuracy": accuracy})

    def final_loss(self) -> float:
        return self.rows[-1]["loss"]

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "lr", "loss", "accuracy"])
            for r in self.rows:
                w.writerow([r["epoch"], repr(r["lr"]), repr(r["loss"]), repr(r["accuracy"])])

    @classmethod
    def from_csv(cls, path) -> "LossCurve":
        curve = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                curve.add(int(row["epoch"]), float(row["lr"]),
                          float(row["loss"]), float(row["accuracy"]))
        return curve


def augment_batch(xb: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Pad-4 random crop plus horizontal flip, the usual CIFAR recipe."""
    n, _, h, w = xb.shape
    out = np.empty_like(xb)
    padded = np.pad(xb, ((0, 0), (0, 0), (4, 4), (4, 4)))
    offs = rng.integers(0, 9, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        dy, dx = offs[i]
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def run_epoch(model, dataset, opt: SGD, lr: float, epoch_seed: int,
              batch_size: int, epoch: int = 0, augment: bool = False,
              mixer=None) -> tuple[float, float]:
    """One pass over the data; returns (mean loss, train accuracy %).

    mixer, when given, may replace part of each batch (adversarial
    training); it receives (model, xb, yb, batch_seed) and must return the
    batch to train on. Weight gradients are cleared after every step.
    """
    n = len(dataset)
    order = np.random.default_rng(split_seed(epoch_seed, "order")).permutation(n)
    aug_rng = np.random.default_rng(split_seed(epoch_seed, "augment"))
    reg = model.spec.reg
    loss_sum = 0.0
    correct = 0
    for bi, s in enumerate(range(0, n, batch_size)):
        idx = order[s:s + batch_size]
        xb = dataset.images[idx]
        yb = dataset.labels[idx]
        if augment:
            xb = augment_batch(xb, aug_rng)
        if mixer is not None:
            xb = mixer(model, xb, yb, split_seed(epoch_seed, f"adv/{bi}"))
        logits = model.forward(Tensor(xb), train=True)
        ce = cross_entropy(logits, yb)
        loss = total_loss(ce, model.weight_matrices(), reg)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise NanLossError(epoch, bi)
        backward(loss)
        opt.step(lr)
        if model.coeff is not None:
            project_coeff(model.coeff)
        opt.zero_grad()
        loss_sum += loss_val * len(idx)
        correct += int((logits.data.argmax(axis=1) == yb).sum())
    return loss_sum / n, 100.0 * correct / n


def train(model, dataset, cfg: TrainConfig, advtrain=None, out_dir=None) -> LossCurve:
    """Train in place; returns the per-epoch loss curve.

    advtrain (an AdvTrainConfig) switches every epoch to adversarial-batch
    training with the configured method and mix. Checkpoints land in
    out_dir at each milestone epoch when out_dir is given.
    """
    mixer = None
    if advtrain is not None:
        from .defenses import make_adversarial_mixer  # deferred: defenses imports this module
        mixer = make_adversarial_mixer(advtrain)
    opt = SGD([p for _, p in model.parameters()], lr=cfg.lr, momentum=cfg.momentum)
    curve = LossCurve()
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        loss, acc = run_epoch(model, dataset, opt, lr,
                              split_seed(cfg.seed, f"epoch/{epoch}"),
                              cfg.batch_size, epoch=epoch, augment=cfg.augment,
                              mixer=mixer)
        curve.add(epoch, lr, loss, acc)
        if out_dir is not None and epoch in cfg.milestones:
            model.save(os.path.join(out_dir, f"milestone_{epoch}.dqw"))
    return curve
