"""Input squeezing and adversarial training, the two baseline defenses.

Feature squeezing reduces color depth and median-filters the image, then
flags a sample as adversarial when the squeezed and raw predictions
disagree. Adversarial training replaces a fraction of every batch with
attack samples crafted at a randomly drawn budget.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import AttackConfig, run_attack
from .seeds import split_seed
from .training import run_epoch


@dataclass
class SqueezeConfig:
    color_bits: int = 5
    median: bool = True

    def __post_init__(self):
        if not 1 <= self.color_bits <= 8:
            raise ValueError(f"color_bits must be in [1, 8], got {self.color_bits}")


@dataclass
class AdvTrainConfig:
    method: str = "rfgsm"  # rfgsm | pgd
    delta: float = 8.0  # epsilon-sampling scale, 0-255 units
    test_eps: float = 8.0  # fixed budget at evaluation time
    mix: float = 1.0  # fraction of each batch replaced by adversarial samples

    def __post_init__(self):
        if self.method not in ("rfgsm", "pgd"):
            raise ValueError(f"adversarial training method must be rfgsm|pgd, got {self.method!r}")
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if not 0.0 <= self.mix <= 1.0:
            raise ValueError(f"mix must be in [0, 1], got {self.mix}")


def bit_depth_reduce(img: np.ndarray, bits: int) -> np.ndarray:
    """Round [0,1] pixels onto 2^bits levels; idempotent by construction."""
    if not 1 <= bits <= 8:
        raise ValueError(f"bits must be in [1, 8], got {bits}")
    img = np.asarray(img)
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValueError("bit_depth_reduce expects pixels in [0, 1]")
    levels = np.float64(2 ** bits - 1)
    return (np.floor(img.astype(np.float64) * levels + 0.5) / levels).astype(img.dtype)


def median_filter_2x2(img: np.ndarray) -> np.ndarray:
    """2x2 median per channel, window anchored top-left at each pixel.

    The bottom/right edges replicate, and the median of four values is the
    mean of the two middle ones. Works on [C,H,W] or [N,C,H,W]; shape is
    preserved.
    """
    img = np.asarray(img)
    if img.ndim not in (3, 4):
        raise ValueError(f"expected [C,H,W] or [N,C,H,W], got {img.shape}")
    h, w = img.shape[-2:]
    if h < 1 or w < 1:
        raise ValueError("image must have at least one pixel per side")
    pad = [(0, 0)] * (img.ndim - 2) + [(0, 1), (0, 1)]
    p = np.pad(img, pad, mode="edge")
    windows = np.stack([p[..., :h, :w], p[..., :h, 1:w + 1],
                        p[..., 1:h + 1, :w], p[..., 1:h + 1, 1:w + 1]], axis=0)
    windows.sort(axis=0)
    return ((windows[1] + windows[2]) / 2).astype(img.dtype)


def squeeze(img: np.ndarray, cfg: SqueezeConfig) -> np.ndarray:
    """Color-bit reduction, then the 2x2 median filter when enabled."""
    out = bit_depth_reduce(img, cfg.color_bits)
    if cfg.median:
        out = median_filter_2x2(out)
    return out


def feature_squeeze_detect(model, x: np.ndarray, cfg: SqueezeConfig) -> np.ndarray:
    """Per-sample flag: squeezed prediction disagrees with the raw one."""
    raw = model.predict(x)
    squeezed = model.predict(squeeze(x, cfg))
    return raw != squeezed


def sample_epsilon(delta: float, seed) -> float:
    """One attack budget: |N(0, delta)| clipped into [0, 2*delta], 0-255 units."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return float(np.clip(abs(rng.normal(0.0, delta)), 0.0, 2.0 * delta))


def make_adversarial_mixer(atk: AdvTrainConfig):
    """Batch hook for training: craft and splice in adversarial samples.

    Per batch, a budget is drawn via sample_epsilon and a `mix` fraction of
    the batch is replaced by samples crafted with the configured method
    against the current weights (eval-mode statistics). mix=0 leaves the
    batch untouched, byte for byte.
    """

    def mixer(model, xb: np.ndarray, yb: np.ndarray, batch_seed: int) -> np.ndarray:
        n_adv = int(round(atk.mix * len(xb)))
        if n_adv == 0:
            return xb
        eps = sample_epsilon(atk.delta, split_seed(batch_seed, "eps"))
        if eps == 0.0:
            return xb
        cfg = AttackConfig(kind=atk.method, epsilon=eps, alpha=1.0,
                           seed=split_seed(batch_seed, "craft"))
        pick = np.random.default_rng(split_seed(batch_seed, "mix")).permutation(len(xb))[:n_adv]
        out = xb.copy()
        out[pick] = run_attack(model, xb[pick], yb[pick], cfg)
        return out

    return mixer


def adv_train_epoch(model, dataset, atk: AdvTrainConfig, opt, *, lr: float,
                    epoch_seed: int, batch_size: int = 64, epoch: int = 0):
    """One adversarial-training epoch; returns (mean loss, train accuracy %)."""
    return run_epoch(model, dataset, opt, lr, epoch_seed, batch_size,
                     epoch=epoch, mixer=make_adversarial_mixer(atk))


def masking_warning(white_box_acc: float, black_box_acc: float,
                    margin: float = 2.0) -> bool:
    """True when white-box accuracy beats black-box by more than the margin.

    Black-box attacks are the weaker threat, so a model that resists the
    white-box attack better than the transfer attack is hiding its
    gradients rather than actually robust.
    """
    return white_box_acc > black_box_acc + margin
